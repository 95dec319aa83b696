// Generate a preset dataset, write it to disk and read it back.

use chanalign::channel::SystemConfig;
use chanalign::env::{generate_dataset, Dataset, EnvironmentSpec};

pub fn run_example() -> chanalign::Result<Dataset> {
    let sys = SystemConfig::default();
    let spec = EnvironmentSpec::preset("env-med")?;
    let data = generate_dataset(&spec, 32, &sys.array, &sys.bands, Some(25.0))?;
    let dir = std::env::temp_dir().join(format!("chanalign-example-{}", std::process::id()));
    data.save(&dir)?;
    let back = Dataset::load(&dir)?;
    std::fs::remove_dir_all(&dir)?;
    assert_eq!(back, data);
    println!("{} samples of {}; dominant-path histogram:", back.len(), back.env_name());
    for (k, n) in back.dominant_histogram(0.9) {
        println!("  {k:>2} paths: {n}");
    }
    Ok(back)
}

#[allow(dead_code)]
fn main() -> chanalign::Result<()> {
    run_example().map(|_| ())
}
