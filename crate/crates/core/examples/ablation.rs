// Alignment ablation between two environments with the generalization
// bound assembled for every arm.

use chanalign::alignment::OversamplingConfig;
use chanalign::channel::SystemConfig;
use chanalign::env::{generate_dataset, EnvironmentSpec};
use chanalign::experiment::{extract_dataset, run_ablation, AblationConfig, AblationData, AblationReport, LearnConfig};
use chanalign::extraction::ExtractionConfig;
use chanalign::extrapolator::TrainConfig;

pub fn run_example() -> chanalign::Result<AblationReport> {
    let sys = SystemConfig::default();
    let ex = ExtractionConfig::default();
    let os = OversamplingConfig::default();
    let a = generate_dataset(&EnvironmentSpec::preset("env-sparse")?, 40, &sys.array, &sys.bands, None)?;
    let b = generate_dataset(&EnvironmentSpec::preset("env-med")?, 15, &sys.array, &sys.bands, None)?;
    let ea = extract_dataset(&a, &sys, &ex, &os)?;
    let eb = extract_dataset(&b, &sys, &ex, &os)?;
    let learn = LearnConfig {
        hidden: 32,
        train: TrainConfig { epochs: 5, learning_rate: 1e-3, ..TrainConfig::default() },
        ..LearnConfig::default()
    };
    let data = AblationData { train: &a, train_extractions: &ea, test: &b, test_extractions: &eb };
    let report = run_ablation(&data, &sys, &ex, &learn, &AblationConfig::default())?;
    print!("{}", report.to_csv());
    for r in &report.rows {
        if let Some(b) = &r.bound {
            println!("{} O={}: bound {:.3e} vs target path loss {:.3e} (R1 = {:.2})", r.mode, r.oversampling, b.bound, b.target_path_loss, b.r1);
        }
    }
    Ok(report)
}

#[allow(dead_code)]
fn main() -> chanalign::Result<()> {
    run_example().map(|_| ())
}
