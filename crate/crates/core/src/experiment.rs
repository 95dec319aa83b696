//! End-to-end experiment pieces shared by the command line, the examples and
//! the acceptance suite: batch extraction, method training, evaluation and
//! alignment ablations.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_mode, Aligner, AlignmentMode, OversamplingConfig};
use crate::channel::{ChannelMatrix, SystemConfig};
use crate::env::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{bound_report, nmse, to_db, wasserstein1, BoundInputs, BoundReport, W1Config, W1Estimate};
use crate::extraction::{extract_joint, ExtractionConfig, JointExtraction};
use crate::extrapolator::{
    augment, co_extrapolate, model_based_extrapolate, path_pairs, po_pa_extrapolate, renormalize, train, Augmentation,
    MatrixNet, MlpConfig, Network, PairSet, TrainConfig, TrainOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Whole channel in, whole channel out.
    Co,
    /// Per-path network without alignment.
    Po,
    /// Per-path network on aligned paths.
    PoPa,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "co" => Ok(Self::Co),
            "po" => Ok(Self::Po),
            "po_pa" => Ok(Self::PoPa),
            _ => Err(Error::InvalidConfig(format!("unknown method {s:?} (co|po|po_pa)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Co => "co",
            Self::Po => "po",
            Self::PoPa => "po_pa",
        }
    }

    /// Alignment used by the path-oriented methods; `Co` has none.
    pub fn aligner(self, mode: AlignmentMode, os: OversamplingConfig) -> Result<Option<Aligner>> {
        match self {
            Self::Co => Ok(None),
            Self::Po => alignment_mode(AlignmentMode::None, os).map(Some),
            Self::PoPa => alignment_mode(mode, os).map(Some),
        }
    }
}

/// Joint extraction of every sample, in sample order.
pub fn extract_dataset(
    data: &Dataset,
    sys: &SystemConfig,
    cfg: &ExtractionConfig,
    os: &OversamplingConfig,
) -> Result<Vec<JointExtraction>> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    data.samples.par_iter().map(|s| extract_joint(&s.h_m, &s.h_e, sys, cfg, os)).collect()
}

/// Whole-channel pairs `(H_m, H_e)`.
pub fn channel_pairs(data: &Dataset) -> PairSet {
    let mut out = PairSet::default();
    for s in &data.samples {
        out.push(s.h_m.clone(), s.h_e.clone());
    }
    out
}

/// Per-sample NMSE of `f(H_m)` against `H_e` after renormalizing the
/// prediction to the dataset's per-band norm.
pub fn evaluate_with<F>(data: &Dataset, f: F) -> Result<Vec<f64>>
where
    F: Fn(&ChannelMatrix) -> Result<ChannelMatrix> + Sync,
{
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    data.samples.par_iter().map(|s| nmse(&renormalize(&f(&s.h_m)?), &s.h_e)).collect()
}

pub fn mean_db(values: &[f64]) -> f64 {
    to_db(values.iter().sum::<f64>() / values.len() as f64)
}

/// A trained extrapolator plus what is needed to run it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub method: Method,
    pub aligner: Option<Aligner>,
    pub net: MatrixNet,
}

impl TrainedModel {
    pub fn predict(&self, h_m: &ChannelMatrix, sys: &SystemConfig, ex: &ExtractionConfig) -> Result<ChannelMatrix> {
        match &self.aligner {
            None => co_extrapolate(h_m, &self.net),
            Some(al) => po_pa_extrapolate(h_m, &self.net, sys, ex, al),
        }
    }

    pub fn evaluate(&self, data: &Dataset, sys: &SystemConfig, ex: &ExtractionConfig) -> Result<Vec<f64>> {
        evaluate_with(data, |h| self.predict(h, sys, ex))
    }
}

/// Training set for `method`. Path-oriented methods need the joint
/// extractions of `data`.
pub fn training_pairs(
    method: Method,
    data: &Dataset,
    extractions: Option<&[JointExtraction]>,
    aligner: Option<&Aligner>,
    sys: &SystemConfig,
) -> Result<PairSet> {
    match (method, extractions, aligner) {
        (Method::Co, _, _) => Ok(channel_pairs(data)),
        (_, Some(ex), Some(al)) => path_pairs(ex.iter(), sys, al),
        (_, None, _) => Err(Error::InvalidConfig(format!("method {} needs an extraction file", method.as_str()))),
        (_, _, None) => Err(Error::InvalidConfig("path-oriented training needs an aligner".into())),
    }
}

/// Knobs shared by the training runs of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub hidden: usize,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub augment: Augmentation,
    pub augment_seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            init_seed: 1,
            train: TrainConfig::default(),
            augment: Augmentation::None,
            augment_seed: 0,
        }
    }
}

pub fn fit(
    pairs: &PairSet,
    sys: &SystemConfig,
    learn: &LearnConfig,
    os: &OversamplingConfig,
) -> Result<(TrainOutcome, PairSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(learn.augment_seed);
    let data = augment(pairs, learn.augment, sys, os, &mut rng)?;
    let mlp = MlpConfig::for_system(sys, learn.hidden, learn.init_seed);
    Ok((train(&data, &mlp, &learn.train)?, data))
}

/// Mean per-row loss of `net` on the pairs at `idx`.
pub fn pair_loss(net: &Network, pairs: &PairSet, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Empty("pair subset"));
    }
    let (x, y) = pairs.to_arrays(idx)?;
    net.loss(&x, &y)
}

/// Training and validation per-path losses of a finished run.
pub fn split_losses(outcome: &TrainOutcome, pairs: &PairSet) -> Result<(f64, f64)> {
    let mut is_val = vec![false; pairs.len()];
    for &i in &outcome.val_indices {
        is_val[i] = true;
    }
    let train_idx: Vec<usize> = (0..pairs.len()).filter(|&i| !is_val[i]).collect();
    let train_loss = pair_loss(&outcome.net, pairs, &train_idx)?;
    let val_loss = if outcome.val_indices.is_empty() {
        train_loss
    } else {
        pair_loss(&outcome.net, pairs, &outcome.val_indices)?
    };
    Ok((train_loss, val_loss))
}

/// One configuration of an ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArm {
    pub mode: AlignmentMode,
    pub oversampling: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arms: Vec<AblationArm>,
    /// Also train and score the whole-channel network and the model-based
    /// extrapolator.
    pub baselines: bool,
    pub w1: W1Config,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arms: vec![
                AblationArm { mode: AlignmentMode::None, oversampling: 1 },
                AblationArm { mode: AlignmentMode::Full, oversampling: 1 },
                AblationArm { mode: AlignmentMode::Full, oversampling: 2 },
            ],
            baselines: false,
            w1: W1Config::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub mode: String,
    pub oversampling: usize,
    pub n_pairs: usize,
    pub test_nmse_db: f64,
    pub per_sample_nmse: Vec<f64>,
    pub w1: Option<W1Estimate>,
    pub bound: Option<BoundReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct AblationReport {
    pub train_env: String,
    pub test_env: String,
    pub config_digest: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "train_env,test_env,method,mode,oversampling,n_pairs,test_nmse_db,w1,w1_std_err,r1,r2,bound,target_path_loss,config_digest";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let b = r.bound.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.4},{},{},{},{},{},{},{}",
                self.train_env,
                self.test_env,
                r.method,
                r.mode,
                r.oversampling,
                r.n_pairs,
                r.test_nmse_db,
                opt(r.w1.as_ref().map(|w| w.mean)),
                opt(r.w1.as_ref().map(|w| w.std_err)),
                opt(b.map(|b| b.r1)),
                opt(b.map(|b| b.r2)),
                opt(b.map(|b| b.bound)),
                opt(b.map(|b| b.target_path_loss)),
                self.config_digest
            );
        }
        out
    }

    pub fn row(&self, method: Method, mode: AlignmentMode, oversampling: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| {
            r.method == method.as_str() && (method == Method::Co || (r.mode == mode.as_str() && r.oversampling == oversampling))
        })
    }
}

/// Inputs of an ablation: a source and a target dataset with their joint
/// extractions.
pub struct AblationData<'a> {
    pub train: &'a Dataset,
    pub train_extractions: &'a [JointExtraction],
    pub test: &'a Dataset,
    pub test_extractions: &'a [JointExtraction],
}

/// Trains one path network per arm on the source environment, scores it on
/// the target environment, and reports the W1 shift between aligned source
/// and target path inputs plus the assembled generalization bound.
pub fn run_ablation(
    data: &AblationData<'_>,
    sys: &SystemConfig,
    ex: &ExtractionConfig,
    learn: &LearnConfig,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    if data.train_extractions.len() != data.train.len() || data.test_extractions.len() != data.test.len() {
        return Err(Error::dims("one extraction per sample", "mismatched extraction count"));
    }
    let mut rows = Vec::new();
    if cfg.baselines {
        let pairs = channel_pairs(data.train);
        let (out, _) = fit(&pairs, sys, learn, &OversamplingConfig::default())?;
        let model = TrainedModel { method: Method::Co, aligner: None, net: MatrixNet::new(out.net, sys)? };
        let v = model.evaluate(data.test, sys, ex)?;
        rows.push(AblationRow {
            method: "co".into(),
            mode: "-".into(),
            oversampling: 0,
            n_pairs: pairs.len(),
            test_nmse_db: mean_db(&v),
            per_sample_nmse: v,
            w1: None,
            bound: None,
        });
        let v = evaluate_with(data.test, |h| model_based_extrapolate(h, sys, &ex.sage))?;
        rows.push(AblationRow {
            method: "model_based".into(),
            mode: "-".into(),
            oversampling: 0,
            n_pairs: 0,
            test_nmse_db: mean_db(&v),
            per_sample_nmse: v,
            w1: None,
            bound: None,
        });
    }
    for arm in &cfg.arms {
        let os = OversamplingConfig::uniform(arm.oversampling);
        let aligner = alignment_mode(arm.mode, os)?;
        let method = if arm.mode == AlignmentMode::None { Method::Po } else { Method::PoPa };
        let pairs = path_pairs(data.train_extractions.iter(), sys, &aligner)?;
        let target = path_pairs(data.test_extractions.iter(), sys, &aligner)?;
        if pairs.is_empty() || target.is_empty() {
            return Err(Error::Empty("path pairs"));
        }
        let (outcome, fitted) = fit(&pairs, sys, learn, &os)?;
        let (train_loss, val_loss) = split_losses(&outcome, &fitted)?;
        let all: Vec<usize> = (0..target.len()).collect();
        let target_path_loss = pair_loss(&outcome.net, &target, &all)?;
        let net = outcome.net.clone();
        let model = TrainedModel { method, aligner: Some(aligner), net: MatrixNet::new(outcome.net, sys)? };
        let v = model.evaluate(data.test, sys, ex)?;
        let w1 = wasserstein1(&pairs.inputs, &target.inputs, &cfg.w1)?;
        let l_hat_counts: Vec<usize> = data.test_extractions.iter().map(|e| e.training_pairs().count().max(1)).collect();
        let target_channel_loss = data
            .test
            .samples
            .iter()
            .zip(&v)
            .map(|(s, e)| e * s.h_e.norm_sqr())
            .sum::<f64>()
            / v.len() as f64;
        let (n_t, k_m) = sys.shape(crate::channel::BandTag::Measured);
        let bound = bound_report(
            &net,
            &BoundInputs {
                train_loss,
                val_loss,
                w1: w1.mean,
                n_t,
                k_m,
                l_hat_counts,
                target_path_loss,
                target_channel_loss,
            },
        )?;
        rows.push(AblationRow {
            method: method.as_str().into(),
            mode: arm.mode.as_str().into(),
            oversampling: arm.oversampling,
            n_pairs: fitted.len(),
            test_nmse_db: mean_db(&v),
            per_sample_nmse: v,
            w1: Some(w1),
            bound: Some(bound),
        });
    }
    Ok(AblationReport {
        train_env: data.train.env_name().to_string(),
        test_env: data.test.env_name().to_string(),
        config_digest: String::new(),
        rows,
    })
}

/// W1 between aligned measured-band path inputs of two extraction sets, one
/// estimate per arm.
pub fn shift_study(
    source: &[JointExtraction],
    target: &[JointExtraction],
    sys: &SystemConfig,
    arms: &[AblationArm],
    w1: &W1Config,
) -> Result<Vec<W1Estimate>> {
    arms.iter()
        .map(|arm| {
            let al = alignment_mode(arm.mode, OversamplingConfig::uniform(arm.oversampling))?;
            let p = path_pairs(source.iter(), sys, &al)?;
            let q = path_pairs(target.iter(), sys, &al)?;
            wasserstein1(&p.inputs, &q.inputs, w1)
        })
        .collect()
}
