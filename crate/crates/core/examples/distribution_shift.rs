// Wasserstein-1 shift between aligned path responses of two environments,
// with and without alignment.

use chanalign::alignment::OversamplingConfig;
use chanalign::channel::SystemConfig;
use chanalign::env::{generate_dataset, EnvironmentSpec};
use chanalign::evaluation::{W1Config, W1Estimate};
use chanalign::experiment::{extract_dataset, shift_study, AblationConfig};
use chanalign::extraction::ExtractionConfig;

pub fn run_example() -> chanalign::Result<Vec<W1Estimate>> {
    let sys = SystemConfig::default();
    let ex = ExtractionConfig::default();
    let os = OversamplingConfig::default();
    let a = generate_dataset(&EnvironmentSpec::preset("env-sparse")?, 40, &sys.array, &sys.bands, None)?;
    let b = generate_dataset(&EnvironmentSpec::preset("env-rich")?, 20, &sys.array, &sys.bands, None)?;
    let ea = extract_dataset(&a, &sys, &ex, &os)?;
    let eb = extract_dataset(&b, &sys, &ex, &os)?;
    let arms = AblationConfig::default().arms;
    let w = shift_study(&ea, &eb, &sys, &arms, &W1Config { max_n: 64, repeats: 5, seed: 0 })?;
    for (arm, w) in arms.iter().zip(&w) {
        println!("{:<5} O={}  W1 = {:.3} ± {:.3}", arm.mode.as_str(), arm.oversampling, w.mean, w.std_err);
    }
    Ok(w)
}

#[allow(dead_code)]
fn main() -> chanalign::Result<()> {
    run_example().map(|_| ())
}
