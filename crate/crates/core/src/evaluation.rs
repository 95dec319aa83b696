//! Extrapolation metrics, the empirical Wasserstein-1 distance between sets
//! of path responses, and the generalization-bound report.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::extrapolator::Network;

/// `‖Ĥ − H‖² / ‖H‖²`.
pub fn nmse(h_hat: &ChannelMatrix, h_true: &ChannelMatrix) -> Result<f64> {
    let den = h_true.norm_sqr();
    if den == 0.0 {
        return Err(Error::Degenerate("NMSE against a zero reference".into()));
    }
    Ok(h_hat.distance_sqr(h_true)? / den)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Percentile `p ∈ [0, 100]` with linear interpolation between order
/// statistics at rank `(n − 1)·p/100`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (v.len() - 1) as f64 * p / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Empirical CDF of per-sample accuracy `‖H‖²/‖Ĥ − H‖² = 1/NMSE` in dB, as
/// `(accuracy_db, fraction ≤ accuracy)` points in ascending order.
pub fn accuracy_cdf(nmses: &[f64]) -> Result<Vec<(f64, f64)>> {
    if nmses.is_empty() {
        return Err(Error::Empty("accuracy CDF input"));
    }
    let mut acc: Vec<f64> = nmses.iter().map(|x| -to_db(*x)).collect();
    acc.sort_by(f64::total_cmp);
    let n = acc.len() as f64;
    Ok(acc.into_iter().enumerate().map(|(i, a)| (a, (i + 1) as f64 / n)).collect())
}

/// Per-method evaluation on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub train_env: String,
    pub test_env: String,
    pub config_digest: String,
    pub per_sample_nmse: Vec<f64>,
    /// `10 log10` of the mean linear NMSE.
    pub mean_nmse_db: f64,
    pub median_nmse_db: f64,
    pub p5_nmse_db: f64,
    pub p95_nmse_db: f64,
    pub accuracy_cdf: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn new(
        method: impl Into<String>,
        train_env: impl Into<String>,
        test_env: impl Into<String>,
        config_digest: impl Into<String>,
        per_sample_nmse: Vec<f64>,
    ) -> Result<Self> {
        if per_sample_nmse.is_empty() {
            return Err(Error::Empty("evaluation samples"));
        }
        if per_sample_nmse.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Numerical("NMSE values must be finite and non-negative".into()));
        }
        let mean = per_sample_nmse.iter().sum::<f64>() / per_sample_nmse.len() as f64;
        Ok(Self {
            method: method.into(),
            train_env: train_env.into(),
            test_env: test_env.into(),
            config_digest: config_digest.into(),
            mean_nmse_db: to_db(mean),
            median_nmse_db: to_db(percentile(&per_sample_nmse, 50.0)?),
            p5_nmse_db: to_db(percentile(&per_sample_nmse, 5.0)?),
            p95_nmse_db: to_db(percentile(&per_sample_nmse, 95.0)?),
            accuracy_cdf: accuracy_cdf(&per_sample_nmse)?,
            per_sample_nmse,
        })
    }

    pub const CSV_HEADER: &'static str = "method,train_env,test_env,sample,nmse,nmse_db,config_digest";

    /// One row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, v) in self.per_sample_nmse.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:.6},{}",
                self.method,
                self.train_env,
                self.test_env,
                i,
                v,
                to_db(*v),
                self.config_digest
            );
        }
        out
    }
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns the column assigned to each row and the cost.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::dims(format!("{n}x{n}"), format!("{:?}", cost.dim())));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite assignment cost".into()));
    }
    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((assign, total))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct W1Config {
    pub max_n: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for W1Config {
    fn default() -> Self {
        Self { max_n: 128, repeats: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1Estimate {
    pub mean: f64,
    /// Standard error of the mean over repeats; zero for exact solutions.
    pub std_err: f64,
    pub repeats: Vec<f64>,
    /// Points per side in each solved assignment.
    pub n: usize,
    pub exact: bool,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn frobenius_costs(p: &[&ChannelMatrix], q: &[&ChannelMatrix]) -> Result<Array2<f64>> {
    let mut c = Array2::zeros((p.len(), q.len()));
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            c[(i, j)] = a.distance_sqr(b)?.sqrt();
        }
    }
    Ok(c)
}

fn uniform_w1(p: &[&ChannelMatrix], q: &[&ChannelMatrix]) -> Result<f64> {
    let m = p.len() / gcd(p.len(), q.len()) * q.len();
    let base = frobenius_costs(p, q)?;
    let (rp, rq) = (m / p.len(), m / q.len());
    let cost = Array2::from_shape_fn((m, m), |(i, j)| base[(i / rp, j / rq)]);
    Ok(min_cost_assignment(&cost)?.1 / m as f64)
}

/// Empirical Wasserstein-1 distance under the Frobenius ground cost with
/// uniform weights.
///
/// When `lcm(|P|, |Q|) ≤ max_n` the point sets are replicated to a common
/// size and solved exactly. Otherwise each repeat draws `min(max_n, |P|, |Q|)`
/// points per side without replacement (the same indices on both sides when
/// the sets have equal size) and solves the assignment between the draws.
pub fn wasserstein1(p: &[ChannelMatrix], q: &[ChannelMatrix], cfg: &W1Config) -> Result<W1Estimate> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("Wasserstein point set"));
    }
    if cfg.max_n == 0 || cfg.repeats == 0 {
        return Err(Error::InvalidConfig("W1 max_n and repeats must be >= 1".into()));
    }
    let lcm = p.len() / gcd(p.len(), q.len()) * q.len();
    if lcm <= cfg.max_n {
        let pr: Vec<_> = p.iter().collect();
        let qr: Vec<_> = q.iter().collect();
        let w = uniform_w1(&pr, &qr)?;
        return Ok(W1Estimate { mean: w, std_err: 0.0, repeats: vec![w], n: lcm, exact: true });
    }
    let n = cfg.max_n.min(p.len()).min(q.len());
    let repeats = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let ip = sample(&mut rng, p.len(), n).into_vec();
            let iq = if p.len() == q.len() { ip.clone() } else { sample(&mut rng, q.len(), n).into_vec() };
            let pr: Vec<_> = ip.iter().map(|&i| &p[i]).collect();
            let qr: Vec<_> = iq.iter().map(|&i| &q[i]).collect();
            Ok(min_cost_assignment(&frobenius_costs(&pr, &qr)?)?.1 / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let k = repeats.len() as f64;
    let mean = repeats.iter().sum::<f64>() / k;
    let std_err = if repeats.len() > 1 {
        (repeats.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
    } else {
        0.0
    };
    Ok(W1Estimate { mean, std_err, repeats, n, exact: false })
}

/// `a > b` by more than twice the combined standard error.
pub fn separated(a: &W1Estimate, b: &W1Estimate) -> bool {
    a.mean - b.mean > 2.0 * (a.std_err.powi(2) + b.std_err.powi(2)).sqrt()
}

/// Paired version of [`separated`]: repeats of both estimates were drawn with
/// the same subsample indices, so the margin is twice the standard error of
/// the per-repeat differences `a_r − b_r`.
pub fn paired_separated(a: &W1Estimate, b: &W1Estimate) -> Result<bool> {
    if a.repeats.len() != b.repeats.len() || a.n != b.n {
        return Err(Error::dims(a.repeats.len(), b.repeats.len()));
    }
    let d: Vec<f64> = a.repeats.iter().zip(&b.repeats).map(|(x, y)| x - y).collect();
    let k = d.len() as f64;
    let mean = d.iter().sum::<f64>() / k;
    if d.len() < 2 {
        return Ok(mean > 0.0);
    }
    let se = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt();
    Ok(mean > 2.0 * se)
}

/// Largest singular value by power iteration on `WᵀW` from a fixed start.
pub fn spectral_norm(w: &Array2<f64>, iters: usize) -> f64 {
    let n = w.ncols();
    if n == 0 || w.nrows() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: ndarray::Array1<f64> = ndarray::Array1::from_shape_fn(n, |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let nx = x.dot(&x).sqrt();
        if nx == 0.0 {
            return 0.0;
        }
        x /= nx;
        let y = w.dot(&x);
        sigma = y.dot(&y).sqrt();
        x = w.t().dot(&y);
    }
    sigma
}

/// Product of per-layer spectral norms: a Lipschitz bound for a network with
/// 1-Lipschitz activations.
pub fn lipschitz_upper_bound(net: &Network, iters: usize) -> f64 {
    net.weights.iter().map(|w| spectral_norm(w, iters)).product()
}

/// Components of the generalization bound for one trained path network and
/// one source/target environment pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Mean per-path loss on the training rows.
    pub train_loss: f64,
    /// `|train − validation|` per-path loss, the intra-environment gap estimate.
    pub intra_gap: f64,
    pub w1: f64,
    pub r1: f64,
    pub r2: f64,
    /// `R₂` is a product of spectral norms, not a tight Lipschitz constant.
    pub r2_loose: bool,
    pub c: f64,
    /// Mean of `L̂²` over target-environment samples.
    pub mean_l_hat_sq: f64,
    pub bound: f64,
    /// Measured mean per-path loss in the target environment.
    pub target_path_loss: f64,
    /// Measured mean `‖Ĥᵉ − Hᵉ‖²` in the target environment.
    pub target_channel_loss: f64,
}

pub struct BoundInputs {
    pub train_loss: f64,
    pub val_loss: f64,
    pub w1: f64,
    pub n_t: usize,
    pub k_m: usize,
    pub l_hat_counts: Vec<usize>,
    pub target_path_loss: f64,
    pub target_channel_loss: f64,
}

pub const SPECTRAL_ITERS: usize = 50;

/// `(L_D + |L_D − L_val| + C·W1) · E[L̂²]` with `C = 8 R₁ R₂²`,
/// `R₁ = √(N_T K_m)` and `R₂` the spectral-norm product of `net`.
pub fn bound_report(net: &Network, inputs: &BoundInputs) -> Result<BoundReport> {
    if inputs.l_hat_counts.is_empty() {
        return Err(Error::Empty("target extraction counts"));
    }
    let r1 = ((inputs.n_t * inputs.k_m) as f64).sqrt();
    let r2 = lipschitz_upper_bound(net, SPECTRAL_ITERS);
    let c = 8.0 * r1 * r2 * r2;
    let mean_l_hat_sq = inputs.l_hat_counts.iter().map(|&l| (l * l) as f64).sum::<f64>() / inputs.l_hat_counts.len() as f64;
    let intra_gap = (inputs.train_loss - inputs.val_loss).abs();
    let bound = (inputs.train_loss + intra_gap + c * inputs.w1) * mean_l_hat_sq;
    Ok(BoundReport {
        train_loss: inputs.train_loss,
        intra_gap,
        w1: inputs.w1,
        r1,
        r2,
        r2_loose: true,
        c,
        mean_l_hat_sq,
        bound,
        target_path_loss: inputs.target_path_loss,
        target_channel_loss: inputs.target_channel_loss,
    })
}

/// One row of a shift study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub source_env: String,
    pub target_env: String,
    pub mode: String,
    pub oversampling: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub w1: W1Estimate,
    pub bound: Option<BoundReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ShiftReport {
    pub config_digest: String,
    pub rows: Vec<ShiftRow>,
}

impl ShiftReport {
    pub const CSV_HEADER: &'static str =
        "source_env,target_env,mode,oversampling,n_source,n_target,w1,w1_std_err,train_loss,c,w1_term,mean_l_hat_sq,bound,target_path_loss,config_digest";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let (tl, c, wt, l2, b, tp) = match &r.bound {
                Some(b) => (
                    b.train_loss.to_string(),
                    b.c.to_string(),
                    (b.c * b.w1).to_string(),
                    b.mean_l_hat_sq.to_string(),
                    b.bound.to_string(),
                    b.target_path_loss.to_string(),
                ),
                None => Default::default(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.source_env,
                r.target_env,
                r.mode,
                r.oversampling,
                r.n_source,
                r.n_target,
                r.w1.mean,
                r.w1.std_err,
                tl,
                c,
                wt,
                l2,
                b,
                tp,
                self.config_digest
            );
        }
        out
    }
}
