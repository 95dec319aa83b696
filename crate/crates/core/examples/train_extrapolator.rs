// Train a path-oriented network with alignment on a small source set and
// score it on the same environment and a shifted one.

use chanalign::alignment::{alignment_mode, AlignmentMode, OversamplingConfig};
use chanalign::channel::SystemConfig;
use chanalign::env::{generate_dataset, EnvironmentSpec};
use chanalign::experiment::{extract_dataset, fit, mean_db, LearnConfig, Method, TrainedModel};
use chanalign::extraction::ExtractionConfig;
use chanalign::extrapolator::{path_pairs, MatrixNet, TrainConfig};

pub struct Summary {
    pub loss_trace: Vec<f64>,
    pub in_env_db: f64,
    pub shifted_db: f64,
}

pub fn run_example() -> chanalign::Result<Summary> {
    let sys = SystemConfig::default();
    let ex = ExtractionConfig::default();
    let os = OversamplingConfig::uniform(2);
    let train_set = generate_dataset(&EnvironmentSpec::preset("env-sparse")?, 60, &sys.array, &sys.bands, None)?;
    let same = generate_dataset(&EnvironmentSpec::preset("env-sparse")?.with_seed(50), 20, &sys.array, &sys.bands, None)?;
    let shifted = generate_dataset(&EnvironmentSpec::preset("env-med")?.with_seed(51), 20, &sys.array, &sys.bands, None)?;
    let extractions = extract_dataset(&train_set, &sys, &ex, &os)?;
    let aligner = alignment_mode(AlignmentMode::Full, os)?;
    let pairs = path_pairs(extractions.iter(), &sys, &aligner)?;
    let learn = LearnConfig {
        hidden: 64,
        train: TrainConfig { epochs: 20, learning_rate: 1e-3, ..TrainConfig::default() },
        ..LearnConfig::default()
    };
    let (outcome, _) = fit(&pairs, &sys, &learn, &os)?;
    println!("{} path pairs, best epoch {}", pairs.len(), outcome.best_epoch);
    let loss_trace = outcome.loss_trace.clone();
    let model = TrainedModel { method: Method::PoPa, aligner: Some(aligner), net: MatrixNet::new(outcome.net, &sys)? };
    let in_env_db = mean_db(&model.evaluate(&same, &sys, &ex)?);
    let shifted_db = mean_db(&model.evaluate(&shifted, &sys, &ex)?);
    println!("test NMSE: same environment {in_env_db:.2} dB, shifted {shifted_db:.2} dB");
    Ok(Summary { loss_trace, in_env_db, shifted_db })
}

#[allow(dead_code)]
fn main() -> chanalign::Result<()> {
    run_example().map(|_| ())
}
