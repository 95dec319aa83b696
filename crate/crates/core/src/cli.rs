//! Batch command-line front end: `gen`, `extract`, `train`, `eval`, `ablate`.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{alignment_mode, AlignmentMode, OversamplingConfig};
use crate::channel::{BandTag, ChannelMatrix, SystemConfig};
use crate::env::{generate_dataset, Dataset, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::evaluation::{to_db, EvalReport};
use crate::experiment::{
    evaluate_with, fit, run_ablation, training_pairs, AblationArm, AblationConfig, AblationData,
    LearnConfig, Method, TrainedModel,
};
use crate::extraction::{extract_joint, ExtractionConfig, ExtractionRecord, JointExtraction, PhysicalPaths};
use crate::extrapolator::{load_model, model_based_extrapolate, save_model, Augmentation, MatrixNet, ModelMeta, MODEL_FORMAT_VERSION};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CHANALIGN_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Power fraction used for the dominant-path histogram printed by `gen`.
    pub dominant_power_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { dominant_power_fraction: 0.9 }
    }
}

/// Everything a run depends on. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: SystemConfig,
    /// Extra environments, looked up by name before the shipped presets.
    pub environments: Vec<EnvironmentSpec>,
    pub extraction: ExtractionConfig,
    /// Scan grid for stored cluster peaks and for `po_pa` alignment.
    pub oversampling: OversamplingConfig,
    pub alignment_mode: AlignmentMode,
    pub learn: LearnConfig,
    pub ablation: AblationConfig,
    pub eval: EvalOptions,
    /// Added to every seed (environment, init, shuffle, augmentation, W1).
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            environments: Vec::new(),
            extraction: ExtractionConfig::default(),
            oversampling: OversamplingConfig::default(),
            alignment_mode: AlignmentMode::Full,
            learn: LearnConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalOptions::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.extraction.validate()?;
        self.oversampling.validate()?;
        self.learn.train.validate()?;
        if self.learn.hidden == 0 {
            return Err(Error::InvalidConfig("learn.hidden must be >= 1".into()));
        }
        for e in &self.environments {
            e.validate()?;
        }
        for arm in &self.ablation.arms {
            OversamplingConfig::uniform(arm.oversampling).validate()?;
        }
        if !(0.0..=1.0).contains(&self.eval.dominant_power_fraction) {
            return Err(Error::InvalidConfig("eval.dominant_power_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn environment(&self, name: &str) -> Result<EnvironmentSpec> {
        let spec = match self.environments.iter().find(|e| e.name == name) {
            Some(e) => e.clone(),
            None => EnvironmentSpec::preset(name)?,
        };
        let seed = spec.seed.wrapping_add(self.seed);
        Ok(spec.with_seed(seed))
    }

    /// Learning settings with the global seed applied.
    pub fn seeded_learn(&self) -> LearnConfig {
        let mut l = self.learn.clone();
        l.init_seed = l.init_seed.wrapping_add(self.seed);
        l.train.shuffle_seed = l.train.shuffle_seed.wrapping_add(self.seed);
        l.augment_seed = l.augment_seed.wrapping_add(self.seed);
        l
    }

    pub fn seeded_ablation(&self) -> AblationConfig {
        let mut a = self.ablation.clone();
        a.w1.seed = a.w1.seed.wrapping_add(self.seed);
        a
    }
}

#[derive(Parser, Debug)]
#[command(name = "chanalign", version, about = "Path-oriented channel extrapolation experiments")]
pub struct Cli {
    /// JSON run configuration; defaults apply when absent.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Run joint path extraction over a dataset.
    Extract(ExtractArgs),
    /// Train an extrapolator.
    Train(TrainArgs),
    /// Evaluate a model (or a reference method) on a dataset.
    Eval(EvalArgs),
    /// Alignment ablation between two environments.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Environment name (config `environments` or a preset).
    #[arg(long)]
    pub env: String,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-element SNR in dB; noiseless when omitted.
    #[arg(long)]
    pub snr: Option<f64>,
    /// Override the environment's generation seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_subpaths: Option<usize>,
    #[arg(long)]
    pub residual_stop_db: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub min_pts: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["co", "po", "po_pa"])]
    pub mode: String,
    #[arg(long, value_parser = ["none", "ads", "flip", "rps"])]
    pub augment: Option<String>,
    /// Extraction file for `po`/`po_pa` (default: DATA/extracted.jsonl).
    #[arg(long)]
    pub extraction: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Alignment for `po_pa`: none, delay_only, angular_only or full.
    #[arg(long)]
    pub alignment: Option<String>,
    #[arg(long)]
    pub oversampling: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present_any = ["oracle", "model_based"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// report.json path; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the extracted target-band paths themselves (extraction floor).
    #[arg(long, conflicts_with_all = ["model", "model_based"])]
    pub oracle: bool,
    /// Score the model-based (SAGE re-synthesis) extrapolator.
    #[arg(long, conflicts_with = "model")]
    pub model_based: bool,
    /// Extraction file used by `--oracle` (computed on the fly otherwise).
    #[arg(long)]
    pub extraction: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Source-environment dataset directory.
    #[arg(long)]
    pub train_env: PathBuf,
    /// Target-environment dataset directory.
    #[arg(long)]
    pub test_env: PathBuf,
    #[arg(long)]
    pub train_extraction: Option<PathBuf>,
    #[arg(long)]
    pub test_extraction: Option<PathBuf>,
    /// Comma-separated MODE:O arms, e.g. `none:1,full:1,full:2`.
    #[arg(long)]
    pub arms: Option<String>,
    /// Add the whole-channel network and model-based rows.
    #[arg(long)]
    pub baselines: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// CSV path; the full report goes to the same stem with `.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let exec = || match cli.command {
        Command::Gen(a) => cmd_gen(&cfg, &a),
        Command::Extract(a) => cmd_extract(&cfg, &a),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Ablate(a) => cmd_ablate(&cfg, &a),
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(exec),
        None => exec(),
    }
}

fn log_override(name: &str, value: impl std::fmt::Debug) {
    eprintln!("override: {name} = {value:?}");
}

fn check_digest(found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        Some(f) if f != expected => Err(Error::DigestMismatch { expected: expected.into(), found: f.into() }),
        _ => Ok(()),
    }
}

fn load_dataset(dir: &Path, cfg: &RunConfig, digest: &str) -> Result<Dataset> {
    let d = Dataset::load(dir)?;
    check_digest(d.meta.config_digest.as_deref(), digest)?;
    if d.meta.array != cfg.system.array || d.meta.bands != cfg.system.bands {
        return Err(Error::dims("array/bands of the run config", format!("those stored in {}", dir.display())));
    }
    if d.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(d)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn cmd_gen(cfg: &RunConfig, a: &GenArgs) -> Result<()> {
    let mut spec = cfg.environment(&a.env)?;
    if let Some(s) = a.seed {
        log_override("seed", s);
        spec = spec.with_seed(s);
    }
    let mut data = generate_dataset(&spec, a.size, &cfg.system.array, &cfg.system.bands, a.snr)?;
    data.meta.config_digest = Some(cfg.digest());
    data.save(&a.out)?;
    println!("generated {} samples of {} into {}", data.len(), spec.name, a.out.display());
    println!("dominant paths (≥{:.0}% power): count,samples", 100.0 * cfg.eval.dominant_power_fraction);
    for (k, n) in data.dominant_histogram(cfg.eval.dominant_power_fraction) {
        println!("{k},{n}");
    }
    Ok(())
}

#[derive(Serialize)]
struct ExtractSummary<'a> {
    config_digest: &'a str,
    samples: usize,
    mean_nmde_db: f64,
    mean_ub_npae_db: f64,
    mean_clusters: f64,
}

fn extraction_record(
    index: usize,
    digest: &str,
    ex: &JointExtraction,
    sample: &crate::env::Sample,
    sys: &SystemConfig,
    os: &OversamplingConfig,
) -> Result<ExtractionRecord> {
    let physical = PhysicalPaths { paths: &sample.true_paths, scale_m: sample.scale_m, scale_e: sample.scale_e };
    Ok(ExtractionRecord {
        index,
        config_digest: digest.to_string(),
        subpaths_m: ex.subpaths_m.clone(),
        subpaths_e: ex.subpaths_e.clone(),
        clusters: ex.clusters.clone(),
        peaks: ex.peaks.clone(),
        nmde: ex.nmde(&sample.h_m, &sample.h_e)?,
        ub_npae: ex.ub_npae(&sample.h_m, &sample.h_e, &physical, sys, os)?,
    })
}

/// Complete records at the head of an extraction file, and the byte length
/// they occupy. A trailing partial line is ignored.
fn read_records_prefix(path: &Path, digest: &str) -> Result<(Vec<ExtractionRecord>, u64)> {
    let mut records = Vec::new();
    let mut valid = 0u64;
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        let rec: ExtractionRecord = match serde_json::from_str(line.trim_end()) {
            Ok(r) => r,
            Err(_) => break,
        };
        check_digest(Some(&rec.config_digest), digest)?;
        if rec.index != records.len() {
            return Err(Error::CorruptData(format!("{}: record {} out of order", path.display(), rec.index)));
        }
        records.push(rec);
        valid += n as u64;
    }
    Ok((records, valid))
}

/// Reads a complete extraction file for `data`.
pub fn load_extractions(
    path: &Path,
    data: &Dataset,
    cfg: &RunConfig,
    digest: &str,
) -> Result<Vec<JointExtraction>> {
    if !path.exists() {
        return Err(Error::InvalidConfig(format!("extraction file {} not found; run `extract` first", path.display())));
    }
    let (records, _) = read_records_prefix(path, digest)?;
    if records.len() != data.len() {
        return Err(Error::CorruptData(format!(
            "{} holds {} records for {} samples",
            path.display(),
            records.len(),
            data.len()
        )));
    }
    records.into_iter().map(|r| r.into_extraction(&cfg.system, &cfg.oversampling)).collect()
}

const EXTRACT_CHUNK: usize = 64;

pub fn cmd_extract(cfg: &RunConfig, a: &ExtractArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    let digest = cfg.digest();
    if let Some(v) = a.max_subpaths {
        log_override("extraction.sage.max_subpaths", v);
        cfg.extraction.sage.max_subpaths = v;
    }
    if let Some(v) = a.residual_stop_db {
        log_override("extraction.sage.residual_stop_db", v);
        cfg.extraction.sage.residual_stop_db = v;
    }
    if let Some(v) = a.eps {
        log_override("extraction.dbscan.eps", v);
        cfg.extraction.dbscan.eps = v;
    }
    if let Some(v) = a.min_pts {
        log_override("extraction.dbscan.min_pts", v);
        cfg.extraction.dbscan.min_pts = v;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data, &cfg, &digest)?;
    let (mut records, valid) = if a.out.exists() { read_records_prefix(&a.out, &digest)? } else { (Vec::new(), 0) };
    if records.len() > data.len() {
        return Err(Error::CorruptData(format!("{} has more records than the dataset", a.out.display())));
    }
    if !records.is_empty() {
        eprintln!("resuming at sample {}", records.len());
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = OpenOptions::new().create(true).write(true).truncate(false).open(&a.out)?;
    file.set_len(valid)?;
    let mut w = BufWriter::new(OpenOptions::new().append(true).open(&a.out)?);
    let start = records.len();
    let indices: Vec<usize> = (start..data.len()).collect();
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let batch = chunk
            .par_iter()
            .map(|&i| {
                let s = &data.samples[i];
                let ex = extract_joint(&s.h_m, &s.h_e, &cfg.system, &cfg.extraction, &cfg.oversampling)?;
                extraction_record(i, &digest, &ex, s, &cfg.system, &cfg.oversampling)
            })
            .collect::<Result<Vec<_>>>()?;
        for rec in batch {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
            records.push(rec);
        }
        w.flush()?;
    }
    let n = records.len() as f64;
    let summary = ExtractSummary {
        config_digest: &digest,
        samples: records.len(),
        mean_nmde_db: to_db(records.iter().map(|r| r.nmde).sum::<f64>() / n),
        mean_ub_npae_db: to_db(records.iter().map(|r| r.ub_npae).sum::<f64>() / n),
        mean_clusters: records.iter().map(|r| r.clusters.len()).sum::<usize>() as f64 / n,
    };
    write_json(&sibling(&a.out, "summary.json"), &summary)?;
    println!(
        "extracted {} samples: mean NMDE {:.2} dB, mean UB-NPAE {:.2} dB, {:.2} clusters/sample",
        summary.samples, summary.mean_nmde_db, summary.mean_ub_npae_db, summary.mean_clusters
    );
    Ok(())
}

fn default_extraction(data: &Path) -> PathBuf {
    data.join("extracted.jsonl")
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let digest = cfg.digest();
    let method = Method::parse(&a.mode)?;
    let mut learn = cfg.seeded_learn();
    let mut mode = cfg.alignment_mode;
    let mut os = cfg.oversampling;
    if let Some(v) = &a.augment {
        log_override("learn.augment", v);
        learn.augment = Augmentation::parse(v)?;
    }
    if let Some(v) = a.epochs {
        log_override("learn.train.epochs", v);
        learn.train.epochs = v;
    }
    if let Some(v) = a.lr {
        log_override("learn.train.learning_rate", v);
        learn.train.learning_rate = v;
    }
    if let Some(v) = &a.alignment {
        log_override("alignment_mode", v);
        mode = AlignmentMode::parse(v)?;
    }
    if let Some(v) = a.oversampling {
        log_override("alignment oversampling", v);
        os = OversamplingConfig::uniform(v);
    }
    learn.train.validate()?;
    let data = load_dataset(&a.data, cfg, &digest)?;
    let aligner = method.aligner(mode, os)?;
    let extractions = match method {
        Method::Co => None,
        _ => {
            let path = a.extraction.clone().unwrap_or_else(|| default_extraction(&a.data));
            Some(load_extractions(&path, &data, cfg, &digest)?)
        }
    };
    let pairs = training_pairs(method, &data, extractions.as_deref(), aligner.as_ref(), &cfg.system)?;
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let (outcome, fitted) = fit(&pairs, &cfg.system, &learn, &os)?;
    eprintln!(
        "training pairs: {} ({} after augmentation {:?})",
        pairs.len(),
        fitted.len(),
        learn.augment
    );
    let mut extra = serde_json::Map::new();
    extra.insert("config_digest".into(), digest.clone().into());
    extra.insert("method".into(), method.as_str().into());
    extra.insert("alignment_mode".into(), aligner.map(|al| al.mode.as_str()).unwrap_or("-").into());
    extra.insert("oversampling".into(), serde_json::to_value(os)?);
    extra.insert("train_env".into(), data.env_name().into());
    extra.insert("augment".into(), serde_json::to_value(learn.augment)?);
    extra.insert("n_pairs".into(), pairs.len().into());
    extra.insert("n_pairs_augmented".into(), fitted.len().into());
    let meta = ModelMeta {
        format_version: MODEL_FORMAT_VERSION,
        mlp: crate::extrapolator::MlpConfig::for_system(&cfg.system, learn.hidden, learn.init_seed),
        train: learn.train.clone(),
        loss_trace: outcome.loss_trace.clone(),
        val_trace: outcome.val_trace.clone(),
        best_epoch: outcome.best_epoch,
        n_params: outcome.net.n_params(),
        extra,
    };
    save_model(&a.out, &outcome.net, &meta)?;
    let mut trace = String::from("epoch,train_loss,val_nmse,config_digest\n");
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        let v = outcome.val_trace.get(i).map(|v| v.to_string()).unwrap_or_default();
        trace.push_str(&format!("{i},{l},{v},{digest}\n"));
    }
    fs::write(a.out.join("trace.csv"), trace)?;
    println!(
        "trained {} on {} pairs; best epoch {}, final loss {:.4e}",
        method.as_str(),
        fitted.len(),
        outcome.best_epoch,
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn meta_str<'a>(meta: &'a ModelMeta, key: &str) -> Result<&'a str> {
    meta.extra
        .get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::CorruptData(format!("model.json lacks {key}")))
}

/// Loads a checkpoint written by `train`.
pub fn load_trained(dir: &Path, cfg: &RunConfig, digest: &str) -> Result<(TrainedModel, ModelMeta)> {
    if !dir.join("model.json").exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no model at {}", dir.display()),
        )));
    }
    let (net, meta) = load_model(dir)?;
    check_digest(Some(meta_str(&meta, "config_digest")?), digest)?;
    let method = Method::parse(meta_str(&meta, "method")?)?;
    let os: OversamplingConfig = serde_json::from_value(
        meta.extra.get("oversampling").cloned().ok_or_else(|| Error::CorruptData("model.json lacks oversampling".into()))?,
    )?;
    let aligner = match method {
        Method::Co => None,
        _ => Some(alignment_mode(AlignmentMode::parse(meta_str(&meta, "alignment_mode")?)?, os)?),
    };
    let net = MatrixNet::new(net, &cfg.system)?;
    Ok((TrainedModel { method, aligner, net }, meta))
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let digest = cfg.digest();
    let data = load_dataset(&a.data, cfg, &digest)?;
    let (method, train_env, per_sample) = if a.oracle {
        let extractions = match &a.extraction {
            Some(p) => load_extractions(p, &data, cfg, &digest)?,
            None => crate::experiment::extract_dataset(&data, &cfg.system, &cfg.extraction, &cfg.oversampling)?,
        };
        let (n_t, k_e) = cfg.system.shape(BandTag::Target);
        let v = data
            .samples
            .iter()
            .zip(&extractions)
            .map(|(s, ex)| {
                let mut h = ChannelMatrix::zeros(n_t, k_e, BandTag::Target);
                for p in &ex.paths_e {
                    h.add_assign(&p.response)?;
                }
                crate::evaluation::nmse(&h, &s.h_e)
            })
            .collect::<Result<Vec<_>>>()?;
        ("oracle".to_string(), "-".to_string(), v)
    } else if a.model_based {
        let v = evaluate_with(&data, |h| model_based_extrapolate(h, &cfg.system, &cfg.extraction.sage))?;
        ("model_based".to_string(), "-".to_string(), v)
    } else {
        let dir = a.model.as_ref().ok_or_else(|| Error::InvalidConfig("--model is required".into()))?;
        let (model, meta) = load_trained(dir, cfg, &digest)?;
        let v = model.evaluate(&data, &cfg.system, &cfg.extraction)?;
        (model.method.as_str().to_string(), meta_str(&meta, "train_env")?.to_string(), v)
    };
    let report = EvalReport::new(method, train_env, data.env_name(), digest, per_sample)?;
    write_json(&a.out, &report)?;
    fs::write(sibling(&a.out, "csv"), report.to_csv())?;
    println!("{} on {}: mean NMSE {:.2} dB", report.method, report.test_env, report.mean_nmse_db);
    Ok(())
}

/// Parses `MODE:O[,MODE:O...]`.
pub fn parse_arms(s: &str) -> Result<Vec<AblationArm>> {
    s.split(',')
        .map(|part| {
            let (m, o) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("arm {part:?} is not MODE:O")))?;
            let oversampling = o
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad oversampling in arm {part:?}")))?;
            Ok(AblationArm { mode: AlignmentMode::parse(m.trim())?, oversampling })
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<()> {
    let digest = cfg.digest();
    let mut ablation = cfg.seeded_ablation();
    let mut learn = cfg.seeded_learn();
    if let Some(s) = &a.arms {
        log_override("ablation.arms", s);
        ablation.arms = parse_arms(s)?;
    }
    if a.baselines {
        log_override("ablation.baselines", true);
        ablation.baselines = true;
    }
    if let Some(v) = a.epochs {
        log_override("learn.train.epochs", v);
        learn.train.epochs = v;
    }
    let train = load_dataset(&a.train_env, cfg, &digest)?;
    let test = load_dataset(&a.test_env, cfg, &digest)?;
    let extract = |d: &Dataset, p: &Option<PathBuf>| match p {
        Some(p) => load_extractions(p, d, cfg, &digest),
        None => crate::experiment::extract_dataset(d, &cfg.system, &cfg.extraction, &cfg.oversampling),
    };
    let train_ex = extract(&train, &a.train_extraction)?;
    let test_ex = extract(&test, &a.test_extraction)?;
    let data = AblationData { train: &train, train_extractions: &train_ex, test: &test, test_extractions: &test_ex };
    let mut report = run_ablation(&data, &cfg.system, &cfg.extraction, &learn, &ablation)?;
    report.config_digest = digest;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, report.to_csv())?;
    write_json(&sibling(&a.out, "json"), &report)?;
    for r in &report.rows {
        let w1 = r.w1.as_ref().map(|w| format!("{:.4} ± {:.4}", w.mean, w.std_err)).unwrap_or_else(|| "-".into());
        println!("{:<12} {:<13} O={} NMSE {:>7.2} dB  W1 {}", r.method, r.mode, r.oversampling, r.test_nmse_db, w1);
        if let Some(b) = &r.bound {
            println!(
                "             bound {:.3e} ≥ target path loss {:.3e}; R1 = {:.2}, R2 = {:.3e} (loose)",
                b.bound, b.target_path_loss, b.r1, b.r2
            );
        }
    }
    Ok(())
}
