//! Sub-path estimation (SAGE), clustering of sub-paths into path responses,
//! and extraction-quality metrics.
//!
//! Sub-paths are estimated in the coordinates the model is periodic in:
//! horizontal and vertical spatial frequency (cycles per element) and
//! normalized delay `Δf·τ` (cycles per subcarrier). Delays are therefore
//! reported modulo `1/Δf`.

use std::f64::consts::TAU;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alignment::{find_peak, find_peak_on_target, OversamplingConfig, PeakPosition};
use crate::channel::{
    cis_cycles, phase_path_response, steering_from_freqs, ArrayConfig, BandConfig, BandTag,
    ChannelMatrix, PathParams, PhasePath, SystemConfig, C64,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SageConfig {
    pub max_subpaths: usize,
    /// Stop adding sub-paths once residual/total power falls below this (dB).
    pub residual_stop_db: f64,
    /// Coarse search grid as a multiple of the DFT grid, per
    /// (horizontal, vertical, delay) dimension.
    pub grid_factor: [usize; 3],
    /// Golden-section iterations per coordinate and refinement cycle.
    pub refine_iters: usize,
    pub refine_cycles: usize,
    /// Bracket half-width multiplier between refinement cycles.
    pub refine_shrink: f64,
    pub em_sweeps: usize,
    /// Re-estimate all current sub-paths once after each new one is added
    /// during initialization.
    pub refit_on_add: bool,
}

impl Default for SageConfig {
    fn default() -> Self {
        Self {
            max_subpaths: 24,
            residual_stop_db: -40.0,
            grid_factor: [2, 2, 2],
            refine_iters: 20,
            refine_cycles: 3,
            refine_shrink: 0.01,
            em_sweeps: 3,
            refit_on_add: true,
        }
    }
}

impl SageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_subpaths == 0 {
            return Err(Error::InvalidConfig("max_subpaths must be >= 1".into()));
        }
        if !(self.residual_stop_db < 0.0) {
            return Err(Error::InvalidConfig("residual_stop_db must be negative".into()));
        }
        if self.grid_factor.contains(&0) {
            return Err(Error::InvalidConfig("grid factors must be >= 1".into()));
        }
        if self.refine_cycles == 0 || !(self.refine_shrink > 0.0 && self.refine_shrink <= 1.0) {
            return Err(Error::InvalidConfig("refinement needs >= 1 cycle and shrink in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One estimated sub-path.
///
/// The spatial frequencies are the canonical parameters. Azimuth and
/// elevation are derived from them and clamped onto the visible region, since
/// an estimate can land outside it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPathEstimate {
    pub gain: C64,
    /// Seconds, in `[0, 1/Δf)`.
    pub delay: f64,
    pub azimuth: f64,
    pub elevation: f64,
    /// Cycles per element, in `[-0.5, 0.5)`.
    pub h_freq: f64,
    pub v_freq: f64,
    pub band: BandTag,
}

impl SubPathEstimate {
    pub fn phase_path(&self) -> PhasePath {
        PhasePath {
            gain: self.gain,
            h_freq: self.h_freq,
            v_freq: self.v_freq,
            delay: self.delay,
        }
    }

    pub fn response(&self, array: &ArrayConfig, band: &BandConfig) -> ChannelMatrix {
        phase_path_response(&self.phase_path(), array, band, self.band)
    }

    /// `(2π h_freq, 2π v_freq, 2π Δf τ)`.
    pub fn omega(&self, delta_f: f64) -> [f64; 3] {
        [TAU * self.h_freq, TAU * self.v_freq, TAU * delta_f * self.delay]
    }
}

/// Wrapped-phase location of a physical path, same convention as
/// [`SubPathEstimate::omega`].
pub fn path_omega(path: &PathParams, array: &ArrayConfig, delta_f: f64) -> [f64; 3] {
    let (h, v) = array.spatial_freqs(path.azimuth, path.elevation);
    [TAU * h, TAU * v, TAU * delta_f * path.delay]
}

fn wrap_centered(x: f64) -> f64 {
    let w = x - (x + 0.5).floor();
    if w >= 0.5 {
        w - 1.0
    } else {
        w
    }
}

fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

fn band_vector(t: f64, k: usize) -> Vec<C64> {
    (0..k).map(|i| cis_cycles(i as f64 * t)).collect()
}

/// `a^H X` for every column.
fn project_rows(a: &[C64], x: &Array2<C64>) -> Vec<C64> {
    let mut y = vec![C64::default(); x.ncols()];
    for (ap, row) in a.iter().zip(x.rows()) {
        let c = ap.conj();
        for (yk, z) in y.iter_mut().zip(row) {
            *yk += c * z;
        }
    }
    y
}

/// `X b`.
fn project_cols(x: &Array2<C64>, b: &[C64]) -> Vec<C64> {
    x.rows()
        .into_iter()
        .map(|row| row.iter().zip(b).map(|(z, w)| z * w).sum())
        .collect()
}

fn dot(y: &[C64], b: &[C64]) -> C64 {
    y.iter().zip(b).map(|(y, b)| y * b).sum()
}

/// Maximizes `f` on `[x0 − h, x0 + h]` by golden-section search, returning
/// the best point evaluated (never worse than `x0`).
fn golden_max(f: impl Fn(f64) -> f64, x0: f64, f0: f64, h: f64, iters: usize) -> (f64, f64) {
    const R: f64 = 0.618_033_988_749_894_9;
    let (mut lo, mut hi) = (x0 - h, x0 + h);
    let mut best = (x0, f0);
    let mut c = hi - R * (hi - lo);
    let mut d = lo + R * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        for (x, fx) in [(c, fc), (d, fd)] {
            if fx > best.1 {
                best = (x, fx);
            }
        }
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - R * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + R * (hi - lo);
            fd = f(d);
        }
    }
    for (x, fx) in [(c, fc), (d, fd)] {
        if fx > best.1 {
            best = (x, fx);
        }
    }
    best
}

/// `|Σᵢ wᵢ e^{j2π mᵢ x}|²` along one coordinate.
struct Trig {
    w: Vec<C64>,
    m: Vec<f64>,
}

impl Trig {
    fn value(&self, x: f64) -> f64 {
        self.w
            .iter()
            .zip(&self.m)
            .map(|(w, m)| w * cis_cycles(m * x))
            .sum::<C64>()
            .norm_sqr()
    }

    /// Value, first and second derivative.
    fn derivatives(&self, x: f64) -> (f64, f64, f64) {
        let (mut s, mut d1, mut d2) = (C64::default(), C64::default(), C64::default());
        for (w, m) in self.w.iter().zip(&self.m) {
            let term = w * cis_cycles(m * x);
            let k = TAU * m;
            s += term;
            d1 += term * C64::new(0.0, k);
            d2 -= term * (k * k);
        }
        let g = 2.0 * (s.conj() * d1).re;
        let h = 2.0 * (d1.norm_sqr() + (s.conj() * d2).re);
        (s.norm_sqr(), g, h)
    }

    /// Golden-section search on `[x0 − h, x0 + h]`, then Newton steps on the
    /// derivative. Steps that lower the value beyond rounding are rejected.
    fn maximize(&self, x0: f64, f0: f64, h: f64, iters: usize) -> (f64, f64) {
        let (mut x, mut fx) = golden_max(|x| self.value(x), x0, f0, h, iters);
        for _ in 0..4 {
            let (_, g, hess) = self.derivatives(x);
            if !(hess < 0.0) {
                break;
            }
            let step = (-g / hess).clamp(-h, h);
            let xn = x + step;
            let fn_ = self.value(xn);
            if !(fn_ >= fx * (1.0 - 1e-15)) {
                break;
            }
            (x, fx) = (xn, fn_.max(fx));
            if step.abs() < 1e-15 {
                break;
            }
        }
        (x, fx)
    }
}

/// Working-coordinate sub-path: `c · a(u, v) · b(t)^H` with unit-norm `a`.
#[derive(Clone, Copy, Debug)]
struct Atom {
    u: f64,
    v: f64,
    t: f64,
    c: C64,
}

struct Estimator<'a> {
    array: &'a ArrayConfig,
    k: usize,
    cfg: &'a SageConfig,
}

impl Estimator<'_> {
    fn objective(&self, x: &Array2<C64>, u: f64, v: f64, t: f64) -> f64 {
        let a = steering_from_freqs(u, v, self.array);
        dot(&project_rows(&a, x), &band_vector(t, self.k)).norm_sqr()
    }

    fn coarse(&self, x: &Array2<C64>) -> (f64, f64, f64) {
        let gh = self.cfg.grid_factor[0] * self.array.n_h;
        let gv = self.cfg.grid_factor[1] * self.array.n_v;
        let gd = self.cfg.grid_factor[2] * self.k;
        let bs: Vec<Vec<C64>> = (0..gd).map(|j| band_vector(j as f64 / gd as f64, self.k)).collect();
        let mut best = (f64::MIN, 0.0, 0.0, 0.0);
        for ih in 0..gh {
            let u = ih as f64 / gh as f64;
            for iv in 0..gv {
                let v = iv as f64 / gv as f64;
                let y = project_rows(&steering_from_freqs(u, v, self.array), x);
                for (j, b) in bs.iter().enumerate() {
                    let obj = dot(&y, b).norm_sqr();
                    if obj > best.0 {
                        best = (obj, u, v, j as f64 / gd as f64);
                    }
                }
            }
        }
        (best.1, best.2, best.3)
    }

    /// `s(u) = a(u, v)^H z` as a trigonometric polynomial in `u`.
    fn horizontal(&self, z: &[C64], v: f64) -> Trig {
        let n_v = self.array.n_v;
        let scale = 1.0 / (self.array.n_t() as f64).sqrt();
        Trig {
            w: z.iter()
                .enumerate()
                .map(|(p, z)| cis_cycles(-((p % n_v) as f64) * v) * z * scale)
                .collect(),
            m: (0..z.len()).map(|p| -((p / n_v) as f64)).collect(),
        }
    }

    fn vertical(&self, z: &[C64], u: f64) -> Trig {
        let n_v = self.array.n_v;
        let scale = 1.0 / (self.array.n_t() as f64).sqrt();
        Trig {
            w: z.iter()
                .enumerate()
                .map(|(p, z)| cis_cycles(-((p / n_v) as f64) * u) * z * scale)
                .collect(),
            m: (0..z.len()).map(|p| -((p % n_v) as f64)).collect(),
        }
    }

    /// Coordinate-wise refinement from `(u, v, t)`: golden-section search on
    /// each coordinate followed by a guarded Newton polish.
    fn refine(&self, x: &Array2<C64>, mut u: f64, mut v: f64, mut t: f64) -> Atom {
        let mut hw = [
            1.0 / (self.cfg.grid_factor[0] * self.array.n_h) as f64,
            1.0 / (self.cfg.grid_factor[1] * self.array.n_v) as f64,
            1.0 / (self.cfg.grid_factor[2] * self.k) as f64,
        ];
        let iters = self.cfg.refine_iters;
        let mut cur = self.objective(x, u, v, t);
        for _ in 0..self.cfg.refine_cycles {
            let z = project_cols(x, &band_vector(t, self.k));
            (u, cur) = self.horizontal(&z, v).maximize(u, cur, hw[0], iters);
            (v, cur) = self.vertical(&z, u).maximize(v, cur, hw[1], iters);
            let y = project_rows(&steering_from_freqs(u, v, self.array), x);
            let trig = Trig { w: y, m: (0..self.k).map(|k| k as f64).collect() };
            (t, cur) = trig.maximize(t, cur, hw[2], iters);
            hw.iter_mut().for_each(|h| *h *= self.cfg.refine_shrink);
        }
        let (u, v, t) = (wrap_centered(u), wrap_centered(v), wrap_unit(t));
        let a = steering_from_freqs(u, v, self.array);
        let c = dot(&project_rows(&a, x), &band_vector(t, self.k)) / self.k as f64;
        Atom { u, v, t, c }
    }

    fn response(&self, atom: &Atom) -> Array2<C64> {
        let a = steering_from_freqs(atom.u, atom.v, self.array);
        let b = band_vector(atom.t, self.k);
        Array2::from_shape_fn((a.len(), self.k), |(p, q)| atom.c * a[p] * b[q].conj())
    }
}

fn power(x: &Array2<C64>) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

/// SAGE estimates together with the residual power after initialization and
/// after every EM sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SageOutput {
    pub subpaths: Vec<SubPathEstimate>,
    pub residual_trace: Vec<f64>,
}

/// Estimates sub-path parameters of `h` on `band`.
pub fn sage_estimate(
    h: &ChannelMatrix,
    array: &ArrayConfig,
    band: &BandConfig,
    cfg: &SageConfig,
) -> Result<Vec<SubPathEstimate>> {
    Ok(sage_estimate_traced(h, array, band, cfg)?.subpaths)
}

pub fn sage_estimate_traced(
    h: &ChannelMatrix,
    array: &ArrayConfig,
    band: &BandConfig,
    cfg: &SageConfig,
) -> Result<SageOutput> {
    cfg.validate()?;
    array.validate()?;
    band.validate()?;
    if h.shape() != (array.n_t(), band.n_subcarriers) {
        return Err(Error::dims(
            format!("{}x{}", array.n_t(), band.n_subcarriers),
            format!("{:?}", h.shape()),
        ));
    }
    if !h.is_finite() {
        return Err(Error::Numerical("non-finite channel entries".into()));
    }
    let total = h.norm_sqr();
    if total == 0.0 {
        return Err(Error::Degenerate("SAGE on a zero channel".into()));
    }
    let est = Estimator { array, k: band.n_subcarriers, cfg };
    let stop = total * 10f64.powf(cfg.residual_stop_db / 10.0);

    let mut residual = h.entries().clone();
    let mut atoms: Vec<Atom> = Vec::new();
    while atoms.len() < cfg.max_subpaths && power(&residual) >= stop {
        let (u, v, t) = est.coarse(&residual);
        let atom = est.refine(&residual, u, v, t);
        residual -= &est.response(&atom);
        atoms.push(atom);
        if cfg.refit_on_add {
            for i in 0..atoms.len() {
                residual += &est.response(&atoms[i]);
                atoms[i] = est.refine(&residual, atoms[i].u, atoms[i].v, atoms[i].t);
                residual -= &est.response(&atoms[i]);
            }
        }
    }
    let mut trace = vec![power(&residual)];
    for _ in 0..cfg.em_sweeps {
        for i in 0..atoms.len() {
            residual += &est.response(&atoms[i]);
            atoms[i] = est.refine(&residual, atoms[i].u, atoms[i].v, atoms[i].t);
            residual -= &est.response(&atoms[i]);
        }
        let p = power(&residual);
        // the objective is only resolved to rounding relative to total power
        debug_assert!(p <= trace.last().unwrap() + 1e-12 * total, "{p} > {trace:?}");
        trace.push(p);
    }

    let tag = h.band();
    let subpaths = atoms
        .iter()
        .map(|a| {
            let delay = a.t / band.delta_f;
            let (azimuth, elevation) = array.angles_from_freqs(a.u, a.v);
            SubPathEstimate {
                gain: a.c * cis_cycles(band.f_start * delay),
                delay,
                azimuth,
                elevation,
                h_freq: a.u,
                v_freq: a.v,
                band: tag,
            }
        })
        .collect();
    Ok(SageOutput { subpaths, residual_trace: trace })
}

/// `√(Σᵢ |e^{jωₖ,ᵢ} − e^{jωₗ,ᵢ}|²)`.
pub fn path_distance(omega_k: &[f64; 3], omega_l: &[f64; 3]) -> f64 {
    omega_k
        .iter()
        .zip(omega_l)
        .map(|(a, b)| {
            let s = ((a - b) / 2.0).sin();
            4.0 * s * s
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self { eps: 0.5, min_pts: 1 }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if self.min_pts == 0 {
            return Err(Error::InvalidConfig("min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// DBSCAN over points given by their wrapped-phase locations. Points left as
/// noise become singleton clusters so the result is always a partition.
/// Clusters are ordered by smallest member; members are ascending.
pub fn dbscan_omegas(omegas: &[[f64; 3]], cfg: &DbscanConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let n = omegas.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| path_distance(&omegas[i], &omegas[j]) <= cfg.eps).collect())
        .collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if label[i].is_some() || neighbors[i].len() < cfg.min_pts {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![i];
        label[i] = Some(id);
        let mut queue: std::collections::VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            if label[q].is_some() {
                continue;
            }
            label[q] = Some(id);
            members.push(q);
            if neighbors[q].len() >= cfg.min_pts {
                queue.extend(neighbors[q].iter().copied().filter(|&r| label[r].is_none()));
            }
        }
        clusters.push(members);
    }
    for (i, l) in label.iter().enumerate() {
        if l.is_none() {
            clusters.push(vec![i]);
        }
    }
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(clusters)
}

pub fn dbscan_cluster(subpaths: &[SubPathEstimate], delta_f: f64, cfg: &DbscanConfig) -> Result<Vec<Vec<usize>>> {
    let omegas: Vec<_> = subpaths.iter().map(|s| s.omega(delta_f)).collect();
    dbscan_omegas(&omegas, cfg)
}

/// Per-band member indices of one joint cluster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointCluster {
    pub measured: Vec<usize>,
    pub target: Vec<usize>,
}

/// Clusters the union of both bands' sub-paths and splits every cluster back
/// into per-band index sets.
pub fn joint_cluster(
    subpaths_m: &[SubPathEstimate],
    subpaths_e: &[SubPathEstimate],
    delta_f: f64,
    cfg: &DbscanConfig,
) -> Result<Vec<JointCluster>> {
    if subpaths_m.is_empty() {
        return Err(Error::Empty("measured-band sub-paths"));
    }
    if subpaths_e.is_empty() {
        return Err(Error::Empty("target-band sub-paths"));
    }
    let n_m = subpaths_m.len();
    let union: Vec<_> = subpaths_m.iter().chain(subpaths_e).copied().collect();
    let clusters = dbscan_cluster(&union, delta_f, cfg)?;
    Ok(clusters
        .into_iter()
        .map(|c| JointCluster {
            measured: c.iter().copied().filter(|&i| i < n_m).collect(),
            target: c.iter().filter(|&&i| i >= n_m).map(|i| i - n_m).collect(),
        })
        .collect())
}

/// Response of one cluster: the coherent sum of its members' responses.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedPath {
    pub member_indices: Vec<usize>,
    pub response: ChannelMatrix,
    pub band: BandTag,
}

pub fn aggregate_cluster(
    subpaths: &[SubPathEstimate],
    indices: &[usize],
    array: &ArrayConfig,
    band: &BandConfig,
    tag: BandTag,
) -> Result<ExtractedPath> {
    if indices.is_empty() {
        return Err(Error::Empty("cluster"));
    }
    let mut acc = ChannelMatrix::zeros(array.n_t(), band.n_subcarriers, tag);
    for &i in indices {
        let s = subpaths
            .get(i)
            .ok_or_else(|| Error::dims(format!("index < {}", subpaths.len()), i))?;
        acc.add_assign(&phase_path_response(&s.phase_path(), array, band, tag))?;
    }
    Ok(ExtractedPath {
        member_indices: indices.to_vec(),
        response: acc,
        band: tag,
    })
}

/// Like [`aggregate_cluster`] but an empty index set yields a zero response.
fn aggregate_or_zero(
    subpaths: &[SubPathEstimate],
    indices: &[usize],
    array: &ArrayConfig,
    band: &BandConfig,
    tag: BandTag,
) -> Result<ExtractedPath> {
    if indices.is_empty() {
        return Ok(ExtractedPath {
            member_indices: Vec::new(),
            response: ChannelMatrix::zeros(array.n_t(), band.n_subcarriers, tag),
            band: tag,
        });
    }
    aggregate_cluster(subpaths, indices, array, band, tag)
}

fn relative_residual(h: &ChannelMatrix, parts: &[ExtractedPath]) -> Result<f64> {
    let hn = h.norm_sqr();
    if hn == 0.0 {
        return Err(Error::Degenerate("zero-norm reference channel".into()));
    }
    let mut r = h.clone();
    for p in parts {
        r = r.sub(&p.response)?;
    }
    Ok(r.norm_sqr() / hn)
}

/// Normalized missed-detection error (linear).
pub fn nmde(
    h_m: &ChannelMatrix,
    h_e: &ChannelMatrix,
    extracted_m: &[ExtractedPath],
    extracted_e: &[ExtractedPath],
) -> Result<f64> {
    Ok(0.5 * (relative_residual(h_m, extracted_m)? + relative_residual(h_e, extracted_e)?))
}

/// Ground-truth paths of a sample, with the per-band normalization scales
/// applied to the stored channels.
#[derive(Clone, Copy, Debug)]
pub struct PhysicalPaths<'a> {
    pub paths: &'a [PathParams],
    pub scale_m: f64,
    pub scale_e: f64,
}

impl PhysicalPaths<'_> {
    pub fn responses(&self, sys: &SystemConfig, tag: BandTag) -> Vec<ChannelMatrix> {
        let scale = match tag {
            BandTag::Measured => self.scale_m,
            BandTag::Target => self.scale_e,
        };
        self.paths
            .iter()
            .map(|p| {
                let pp = p.to_phase_path(&sys.array);
                phase_path_response(&pp, &sys.array, sys.band(tag), tag).scaled(C64::new(scale, 0.0))
            })
            .collect()
    }
}

/// Upper bound on the normalized physical-association error, using the greedy
/// assignment of each physical path to the cluster whose peak is nearest.
#[allow(clippy::too_many_arguments)]
pub fn ub_npae(
    h_m: &ChannelMatrix,
    h_e: &ChannelMatrix,
    extracted_m: &[ExtractedPath],
    extracted_e: &[ExtractedPath],
    physical: &PhysicalPaths,
    peaks: &[PeakPosition],
    sys: &SystemConfig,
    os: &OversamplingConfig,
) -> Result<f64> {
    let l_hat = extracted_m.len();
    if extracted_e.len() != l_hat {
        return Err(Error::dims(format!("{l_hat} target clusters"), extracted_e.len()));
    }
    if peaks.len() != l_hat {
        return Err(Error::InvalidConfig(format!(
            "{} peak positions for {l_hat} clusters",
            peaks.len()
        )));
    }
    let (nm, ne) = (h_m.norm_sqr(), h_e.norm_sqr());
    if nm == 0.0 || ne == 0.0 {
        return Err(Error::Degenerate("zero-norm reference channel".into()));
    }
    let true_m = physical.responses(sys, BandTag::Measured);
    let true_e = physical.responses(sys, BandTag::Target);
    let delta_f = sys.bands.delta_f();
    let peak_omegas: Vec<_> = peaks.iter().map(|p| p.omega(os, &sys.array, &sys.bands.measured)).collect();

    let mut assoc_m: Vec<ChannelMatrix> = extracted_m.iter().map(|p| p.response.clone()).collect();
    let mut assoc_e: Vec<ChannelMatrix> = extracted_e.iter().map(|p| p.response.clone()).collect();
    if l_hat > 0 {
        for (k, path) in physical.paths.iter().enumerate() {
            let w = path_omega(path, &sys.array, delta_f);
            let mut best = 0;
            for (l, pw) in peak_omegas.iter().enumerate() {
                if path_distance(&w, pw) < path_distance(&w, &peak_omegas[best]) {
                    best = l;
                }
            }
            assoc_m[best] = assoc_m[best].sub(&true_m[k])?;
            assoc_e[best] = assoc_e[best].sub(&true_e[k])?;
        }
    } else {
        // no clusters: every physical path is unmatched
        return Ok(0.5 * (ChannelMatrix::sum(&true_m)?.norm_sqr() / nm + ChannelMatrix::sum(&true_e)?.norm_sqr() / ne));
    }
    let em: f64 = assoc_m.iter().map(|m| m.norm_sqr()).sum();
    let ee: f64 = assoc_e.iter().map(|m| m.norm_sqr()).sum();
    Ok(0.5 * (em / nm + ee / ne))
}

/// Extraction settings shared by training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub sage: SageConfig,
    pub dbscan: DbscanConfig,
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        self.sage.validate()?;
        self.dbscan.validate()
    }
}

/// Joint extraction of one sample on both bands.
#[derive(Clone, Debug, PartialEq)]
pub struct JointExtraction {
    pub subpaths_m: Vec<SubPathEstimate>,
    pub subpaths_e: Vec<SubPathEstimate>,
    pub clusters: Vec<JointCluster>,
    /// Per-cluster responses; a side with no members has a zero response.
    pub paths_m: Vec<ExtractedPath>,
    pub paths_e: Vec<ExtractedPath>,
    /// Per-cluster peak, searched on the measured response when it is
    /// nonzero and on the target response otherwise.
    pub peaks: Vec<PeakPosition>,
}

impl JointExtraction {
    /// Rebuilds responses and peaks from stored sub-paths and clusters.
    pub fn from_parts(
        subpaths_m: Vec<SubPathEstimate>,
        subpaths_e: Vec<SubPathEstimate>,
        clusters: Vec<JointCluster>,
        sys: &SystemConfig,
        os: &OversamplingConfig,
    ) -> Result<Self> {
        let mut paths_m = Vec::with_capacity(clusters.len());
        let mut paths_e = Vec::with_capacity(clusters.len());
        let mut peaks = Vec::with_capacity(clusters.len());
        for c in &clusters {
            let pm = aggregate_or_zero(&subpaths_m, &c.measured, &sys.array, &sys.bands.measured, BandTag::Measured)?;
            let pe = aggregate_or_zero(&subpaths_e, &c.target, &sys.array, &sys.bands.target, BandTag::Target)?;
            let peak = if pm.response.norm_sqr() > 0.0 {
                find_peak(&pm.response, &sys.array, &sys.bands.measured, os)?
            } else {
                find_peak_on_target(&pe.response, sys, os)?
            };
            paths_m.push(pm);
            paths_e.push(pe);
            peaks.push(peak);
        }
        Ok(Self { subpaths_m, subpaths_e, clusters, paths_m, paths_e, peaks })
    }

    pub fn nmde(&self, h_m: &ChannelMatrix, h_e: &ChannelMatrix) -> Result<f64> {
        nmde(h_m, h_e, &self.paths_m, &self.paths_e)
    }

    pub fn ub_npae(
        &self,
        h_m: &ChannelMatrix,
        h_e: &ChannelMatrix,
        physical: &PhysicalPaths,
        sys: &SystemConfig,
        os: &OversamplingConfig,
    ) -> Result<f64> {
        ub_npae(h_m, h_e, &self.paths_m, &self.paths_e, physical, &self.peaks, sys, os)
    }

    /// `(Â_l, B̂_l)` for every cluster with a nonzero measured side.
    pub fn training_pairs(&self) -> impl Iterator<Item = (&ChannelMatrix, &ChannelMatrix)> {
        self.clusters
            .iter()
            .zip(self.paths_m.iter().zip(&self.paths_e))
            .filter(|(c, _)| !c.measured.is_empty())
            .map(|(_, (m, e))| (&m.response, &e.response))
    }
}

/// SAGE on both bands followed by joint clustering.
pub fn extract_joint(
    h_m: &ChannelMatrix,
    h_e: &ChannelMatrix,
    sys: &SystemConfig,
    cfg: &ExtractionConfig,
    os: &OversamplingConfig,
) -> Result<JointExtraction> {
    cfg.validate()?;
    let sm = sage_estimate(h_m, &sys.array, &sys.bands.measured, &cfg.sage)?;
    let se = sage_estimate(h_e, &sys.array, &sys.bands.target, &cfg.sage)?;
    let clusters = joint_cluster(&sm, &se, sys.bands.delta_f(), &cfg.dbscan)?;
    JointExtraction::from_parts(sm, se, clusters, sys, os)
}

/// Inference-time extraction from the measured band alone.
pub fn extract_measured(h_m: &ChannelMatrix, sys: &SystemConfig, cfg: &ExtractionConfig) -> Result<Vec<ExtractedPath>> {
    cfg.validate()?;
    let sm = sage_estimate(h_m, &sys.array, &sys.bands.measured, &cfg.sage)?;
    dbscan_cluster(&sm, sys.bands.delta_f(), &cfg.dbscan)?
        .iter()
        .map(|c| aggregate_cluster(&sm, c, &sys.array, &sys.bands.measured, BandTag::Measured))
        .collect()
}

/// One line of `extracted.jsonl`. Responses are not stored; they are
/// regenerated from sub-paths and clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub index: usize,
    pub config_digest: String,
    pub subpaths_m: Vec<SubPathEstimate>,
    pub subpaths_e: Vec<SubPathEstimate>,
    pub clusters: Vec<JointCluster>,
    pub peaks: Vec<PeakPosition>,
    pub nmde: f64,
    pub ub_npae: f64,
}

impl ExtractionRecord {
    pub fn into_extraction(self, sys: &SystemConfig, os: &OversamplingConfig) -> Result<JointExtraction> {
        let ex = JointExtraction::from_parts(self.subpaths_m, self.subpaths_e, self.clusters, sys, os)?;
        if ex.peaks != self.peaks {
            return Err(Error::CorruptData(format!(
                "record {}: stored peaks disagree with regenerated responses",
                self.index
            )));
        }
        Ok(ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::synthesize_channel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sys() -> SystemConfig {
        SystemConfig::default()
    }

    fn phase_sum(paths: &[PhasePath], s: &SystemConfig, tag: BandTag) -> ChannelMatrix {
        let mut h = ChannelMatrix::zeros(s.array.n_t(), s.band(tag).n_subcarriers, tag);
        for p in paths {
            h.add_assign(&phase_path_response(p, &s.array, s.band(tag), tag)).unwrap();
        }
        h
    }

    fn phase_err(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(1.0);
        TAU * d.min(1.0 - d)
    }

    #[test]
    fn zero_and_cancelled_channels_rejected() {
        let s = sys();
        let p = PhasePath { gain: C64::new(1.0, 0.0), h_freq: 0.1, v_freq: -0.2, delay: 3e-8 };
        let a = phase_path_response(&p, &s.array, &s.bands.measured, BandTag::Measured);
        let h = a.sub(&a).unwrap();
        assert!(matches!(
            sage_estimate(&h, &s.array, &s.bands.measured, &SageConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    // On-grid single path: a fine-grid scan of the matched-filter objective peaks
    // at the truth, and SAGE lands on it.
    #[test]
    fn single_on_grid_path_recovered() {
        let s = sys();
        let m = &s.bands.measured;
        let cfg = SageConfig::default();
        for &(ih, iv, id) in &[(1usize, 0usize, 3usize), (5, 3, 20), (0, 1, 31), (7, 2, 9)] {
            let truth = PhasePath {
                gain: C64::from_polar(0.8, 1.1),
                h_freq: wrap_centered(ih as f64 / 8.0),
                v_freq: wrap_centered(iv as f64 / 4.0),
                delay: id as f64 / 32.0 / m.delta_f,
            };
            let h = phase_sum(&[truth], &s, BandTag::Measured);

            let fine = 64;
            let est = Estimator { array: &s.array, k: m.n_subcarriers, cfg: &cfg };
            let mut best = (f64::MIN, 0, 0, 0);
            for a in 0..fine {
                for b in 0..fine / 2 {
                    for c in 0..fine {
                        let o = est.objective(
                            h.entries(),
                            a as f64 / fine as f64,
                            b as f64 / (fine / 2) as f64,
                            c as f64 / fine as f64,
                        );
                        if o > best.0 + 1e-9 {
                            best = (o, a, b, c);
                        }
                    }
                }
            }
            assert_eq!((best.1, best.2, best.3), (ih * 8, iv * 8, id * 2));

            let out = sage_estimate(&h, &s.array, m, &cfg).unwrap();
            assert_eq!(out.len(), 1);
            let e = out[0];
            assert!(phase_err(e.h_freq, truth.h_freq) < 1e-6);
            assert!(phase_err(e.v_freq, truth.v_freq) < 1e-6);
            assert!(phase_err(e.delay * m.delta_f, truth.delay * m.delta_f) < 1e-6);
            assert!((e.gain - truth.gain).norm() < 1e-6 * truth.gain.norm());
            assert!(e.delay >= 0.0 && e.delay < 1.0 / m.delta_f);
        }
    }

    #[test]
    fn off_grid_single_path_recovered() {
        let s = sys();
        let m = &s.bands.measured;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let truth = PhasePath {
                gain: C64::from_polar(rng.gen_range(0.2..2.0), rng.gen_range(-3.0..3.0)),
                h_freq: rng.gen_range(-0.5..0.5),
                v_freq: rng.gen_range(-0.5..0.5),
                delay: rng.gen_range(0.0..1.0) / m.delta_f,
            };
            let h = phase_sum(&[truth], &s, BandTag::Measured);
            let out = sage_estimate(&h, &s.array, m, &SageConfig::default()).unwrap();
            let e = out[0];
            assert!(phase_err(e.h_freq, truth.h_freq) < 1e-6);
            assert!(phase_err(e.v_freq, truth.v_freq) < 1e-6);
            assert!(phase_err(e.delay * m.delta_f, truth.delay * m.delta_f) < 1e-6);
            assert!((e.gain - truth.gain).norm() < 1e-6 * truth.gain.norm());
        }
    }

    #[test]
    fn two_separated_paths_recovered() {
        let s = sys();
        let m = &s.bands.measured;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SageConfig { em_sweeps: 10, ..SageConfig::default() };
        for _ in 0..10 {
            let u0: f64 = rng.gen_range(-0.5..0.5);
            let v0: f64 = rng.gen_range(-0.5..0.5);
            let t0: f64 = rng.gen_range(0.0..1.0);
            // two resolution bins apart horizontally and in delay
            let p1 = PhasePath { gain: C64::from_polar(1.0, 0.3), h_freq: u0, v_freq: v0, delay: t0 / m.delta_f };
            let p2 = PhasePath {
                gain: C64::from_polar(0.7, -1.9),
                h_freq: u0 + 2.0 / 4.0,
                v_freq: v0,
                delay: (t0 + 2.0 / 16.0) / m.delta_f,
            };
            let h = phase_sum(&[p1, p2], &s, BandTag::Measured);
            let out = sage_estimate_traced(&h, &s.array, m, &cfg).unwrap();
            let rec = phase_sum(&out.subpaths.iter().map(|e| e.phase_path()).collect::<Vec<_>>(), &s, BandTag::Measured);
            let resid = h.distance_sqr(&rec).unwrap() / h.norm_sqr();
            assert!(10.0 * resid.log10() < -60.0, "residual {} dB", 10.0 * resid.log10());
            for truth in [p1, p2] {
                assert!(out.subpaths.iter().any(|e| phase_err(e.h_freq, truth.h_freq) < 1e-4
                    && phase_err(e.v_freq, truth.v_freq) < 1e-4
                    && phase_err(e.delay * m.delta_f, truth.delay * m.delta_f) < 1e-4));
            }
        }
    }

    #[test]
    fn residual_trace_is_monotone() {
        let s = sys();
        let m = &s.bands.measured;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let paths: Vec<PhasePath> = (0..5)
                .map(|_| PhasePath {
                    gain: C64::from_polar(rng.gen_range(0.1..1.0), rng.gen_range(-3.0..3.0)),
                    h_freq: rng.gen_range(-0.5..0.5),
                    v_freq: rng.gen_range(-0.5..0.5),
                    delay: rng.gen_range(0.0..1.0) / m.delta_f,
                })
                .collect();
            let h = phase_sum(&paths, &s, BandTag::Measured);
            let out = sage_estimate_traced(&h, &s.array, m, &SageConfig::default()).unwrap();
            assert_eq!(out.residual_trace.len(), 4);
            for w in out.residual_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * h.norm_sqr());
            }
        }
    }

    #[test]
    fn nmde_weakly_decreases_with_subpath_budget() {
        let s = sys();
        let spec = crate::env::EnvironmentSpec::preset("env-med").unwrap();
        for i in 0..4 {
            let sample = crate::env::generate_sample(&spec, i, &s.array, &s.bands, None).unwrap();
            let mut prev = f64::INFINITY;
            for max in [1, 2, 4, 8, 16, 24] {
                let cfg = ExtractionConfig {
                    sage: SageConfig { max_subpaths: max, ..SageConfig::default() },
                    ..ExtractionConfig::default()
                };
                let ex = extract_joint(&sample.h_m, &sample.h_e, &s, &cfg, &OversamplingConfig::default()).unwrap();
                let v = ex.nmde(&sample.h_m, &sample.h_e).unwrap();
                assert!(v <= prev * (1.0 + 1e-9), "max {max}: {v} > {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn path_distance_examples() {
        let w = [0.3, -1.2, 2.0];
        assert_eq!(path_distance(&w, &w), 0.0);
        let pi = std::f64::consts::PI;
        let d = path_distance(&[0.0, 0.0, 0.0], &[pi, pi, pi]);
        assert!((d - 2.0 * 3f64.sqrt()).abs() < 1e-15);
        let delta = [1e-4, -2e-4, 0.5e-4];
        let lin = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let moved = [w[0] + delta[0], w[1] + delta[1], w[2] + delta[2]];
        assert!((path_distance(&w, &moved) - lin).abs() < 1e-10 * lin.max(1.0) + lin * 1e-7);
        // wrapping
        assert!(path_distance(&[0.0, 0.0, 0.0], &[TAU, -TAU, 2.0 * TAU]) < 1e-12);
    }

    /// Textbook label-based DBSCAN with a full distance scan per query.
    fn naive_dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
        const NOISE: i64 = -1;
        const UNDEF: i64 = -2;
        let n = points.len();
        let region = |p: usize| -> Vec<usize> {
            (0..n).filter(|&q| path_distance(&points[p], &points[q]) <= eps).collect()
        };
        let mut label = vec![UNDEF; n];
        let mut c = 0i64;
        for p in 0..n {
            if label[p] != UNDEF {
                continue;
            }
            let nb = region(p);
            if nb.len() < min_pts {
                label[p] = NOISE;
                continue;
            }
            label[p] = c;
            let mut seeds: Vec<usize> = nb.into_iter().filter(|&q| q != p).collect();
            let mut i = 0;
            while i < seeds.len() {
                let q = seeds[i];
                i += 1;
                if label[q] == NOISE {
                    label[q] = c;
                }
                if label[q] != UNDEF {
                    continue;
                }
                label[q] = c;
                let nq = region(q);
                if nq.len() >= min_pts {
                    seeds.extend(nq);
                }
            }
            c += 1;
        }
        let mut out: Vec<Vec<usize>> = (0..c).map(|id| (0..n).filter(|&i| label[i] == id).collect()).collect();
        out.extend((0..n).filter(|&i| label[i] == NOISE).map(|i| vec![i]));
        out.sort_by_key(|v| v[0]);
        out
    }

    #[test]
    fn dbscan_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..50 {
            let pts: Vec<[f64; 3]> = (0..12)
                .map(|_| [rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5)])
                .collect();
            let min_pts = 1 + trial % 3;
            let cfg = DbscanConfig { eps: 0.6, min_pts };
            assert_eq!(dbscan_omegas(&pts, &cfg).unwrap(), naive_dbscan(&pts, 0.6, min_pts));
        }
    }

    #[test]
    fn dbscan_examples() {
        let cfg = DbscanConfig::default();
        assert_eq!(dbscan_omegas(&[[0.1, 0.2, 0.3]], &cfg).unwrap(), vec![vec![0]]);
        let pts = [[0.0, 0.0, 0.0], [3.0, 3.0, 3.0], [0.05, 0.0, 0.0], [3.0, 3.1, 3.0]];
        assert_eq!(dbscan_omegas(&pts, &cfg).unwrap(), vec![vec![0, 2], vec![1, 3]]);
        assert!(dbscan_omegas(&pts, &DbscanConfig { eps: 0.0, min_pts: 1 }).is_err());
        assert!(dbscan_omegas(&pts, &DbscanConfig { eps: 0.5, min_pts: 0 }).is_err());
    }

    fn est(u: f64, v: f64, t: f64, band: BandTag, delta_f: f64) -> SubPathEstimate {
        SubPathEstimate {
            gain: C64::new(1.0, 0.0),
            delay: t / delta_f,
            azimuth: 0.0,
            elevation: 0.0,
            h_freq: u,
            v_freq: v,
            band,
        }
    }

    #[test]
    fn joint_cluster_pairs_bands() {
        let df = 5e6;
        let m = vec![est(0.1, 0.2, 0.3, BandTag::Measured, df), est(-0.3, 0.0, 0.7, BandTag::Measured, df)];
        let e = vec![est(-0.3, 0.0, 0.7, BandTag::Target, df), est(0.1, 0.2, 0.3, BandTag::Target, df)];
        let c = joint_cluster(&m, &e, df, &DbscanConfig::default()).unwrap();
        assert_eq!(
            c,
            vec![
                JointCluster { measured: vec![0], target: vec![1] },
                JointCluster { measured: vec![1], target: vec![0] }
            ]
        );
        assert!(joint_cluster(&m, &[], df, &DbscanConfig::default()).is_err());
        assert!(joint_cluster(&[], &e, df, &DbscanConfig::default()).is_err());
        let lonely = vec![est(0.45, -0.4, 0.05, BandTag::Target, df)];
        let c = joint_cluster(&m, &lonely, df, &DbscanConfig::default()).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().any(|c| c.measured.is_empty() && c.target == vec![0]));
    }

    #[test]
    fn joint_cluster_follows_true_association() {
        let s = sys();
        let df = s.bands.delta_f();
        let truth = [
            PathParams { gain: C64::new(1.0, 0.0), delay: 30e-9, azimuth: -0.5, elevation: 1.4 },
            PathParams { gain: C64::new(0.0, 0.8), delay: 110e-9, azimuth: 0.6, elevation: 1.8 },
        ];
        let hm = synthesize_channel(&truth, &s.array, &s.bands.measured, BandTag::Measured).unwrap();
        let he = synthesize_channel(&truth, &s.array, &s.bands.target, BandTag::Target).unwrap();
        let cfg = SageConfig::default();
        let sm = sage_estimate(&hm, &s.array, &s.bands.measured, &cfg).unwrap();
        let se = sage_estimate(&he, &s.array, &s.bands.target, &cfg).unwrap();
        let clusters = joint_cluster(&sm, &se, df, &DbscanConfig::default()).unwrap();
        let nearest = |e: &SubPathEstimate| -> usize {
            let w = e.omega(df);
            let d: Vec<f64> = truth.iter().map(|p| path_distance(&w, &path_omega(p, &s.array, df))).collect();
            if d[0] <= d[1] { 0 } else { 1 }
        };
        assert!(clusters.len() >= 2);
        for c in &clusters {
            let owners: Vec<usize> = c
                .measured
                .iter()
                .map(|&i| nearest(&sm[i]))
                .chain(c.target.iter().map(|&i| nearest(&se[i])))
                .collect();
            assert!(!c.measured.is_empty() && !c.target.is_empty());
            assert!(owners.iter().all(|&o| o == owners[0]));
        }
    }

    #[test]
    fn aggregation_is_linear_and_conserves_power() {
        let s = sys();
        let m = &s.bands.measured;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let subs: Vec<SubPathEstimate> = (0..7)
            .map(|_| SubPathEstimate {
                gain: C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                delay: rng.gen_range(0.0..1.0) / m.delta_f,
                azimuth: 0.0,
                elevation: 0.0,
                h_freq: rng.gen_range(-0.5..0.5),
                v_freq: rng.gen_range(-0.5..0.5),
                band: BandTag::Measured,
            })
            .collect();
        let single = aggregate_cluster(&subs, &[3], &s.array, m, BandTag::Measured).unwrap();
        assert_eq!(single.response, subs[3].response(&s.array, m));
        let pair = aggregate_cluster(&subs, &[1, 4], &s.array, m, BandTag::Measured).unwrap();
        let mut direct = subs[1].response(&s.array, m);
        direct.add_assign(&subs[4].response(&s.array, m)).unwrap();
        assert!(pair.response.distance_sqr(&direct).unwrap().sqrt() <= 1e-12 * direct.norm());
        assert!(aggregate_cluster(&subs, &[], &s.array, m, BandTag::Measured).is_err());

        let clusters = dbscan_cluster(&subs, m.delta_f, &DbscanConfig { eps: 1.0, min_pts: 1 }).unwrap();
        let mut flat: Vec<usize> = clusters.iter().flatten().copied().collect();
        flat.sort_unstable();
        assert_eq!(flat, (0..7).collect::<Vec<_>>());
        let sum_clusters = ChannelMatrix::sum(
            &clusters
                .iter()
                .map(|c| aggregate_cluster(&subs, c, &s.array, m, BandTag::Measured).unwrap().response)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let sum_direct = ChannelMatrix::sum(&subs.iter().map(|e| e.response(&s.array, m)).collect::<Vec<_>>()).unwrap();
        assert!(sum_clusters.distance_sqr(&sum_direct).unwrap().sqrt() <= 1e-12 * sum_direct.norm());
    }

    #[test]
    fn nmde_examples() {
        let s = sys();
        let (m, e) = (&s.bands.measured, &s.bands.target);
        // orthogonal on-grid paths of equal power
        let p1 = PhasePath { gain: C64::new(1.0, 0.0), h_freq: 0.0, v_freq: 0.0, delay: 0.0 };
        let p2 = PhasePath { gain: C64::new(0.0, 1.0), h_freq: 0.25, v_freq: 0.5, delay: 4.0 / 16.0 / m.delta_f };
        let hm = phase_sum(&[p1, p2], &s, BandTag::Measured);
        let he = phase_sum(&[p1, p2], &s, BandTag::Target);
        let one = |band: &BandConfig, tag| ExtractedPath {
            member_indices: vec![0],
            response: phase_path_response(&p1, &s.array, band, tag),
            band: tag,
        };
        let full = |h: &ChannelMatrix| ExtractedPath { member_indices: vec![0, 1], response: h.clone(), band: h.band() };
        assert_eq!(nmde(&hm, &he, &[full(&hm)], &[full(&he)]).unwrap(), 0.0);
        assert_eq!(nmde(&hm, &he, &[], &[]).unwrap(), 1.0);
        let half = nmde(&hm, &he, &[one(m, BandTag::Measured)], &[one(e, BandTag::Target)]).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        let z = ChannelMatrix::zeros(8, 16, BandTag::Measured);
        assert!(nmde(&z, &he, &[], &[]).is_err());
    }

    fn phys_responses(paths: &[PathParams], s: &SystemConfig, tag: BandTag) -> Vec<ChannelMatrix> {
        paths
            .iter()
            .map(|p| crate::channel::path_response(p, &s.array, s.band(tag), tag))
            .collect()
    }

    /// Minimum association error over all `L̂^L` weak partitions.
    fn exhaustive_npae(
        hm: &ChannelMatrix,
        he: &ChannelMatrix,
        am: &[ChannelMatrix],
        ae: &[ChannelMatrix],
        tm: &[ChannelMatrix],
        te: &[ChannelMatrix],
    ) -> f64 {
        let (l_hat, l) = (am.len(), tm.len());
        let mut best = f64::INFINITY;
        for code in 0..l_hat.pow(l as u32) {
            let mut assign = vec![0; l];
            let mut c = code;
            for a in assign.iter_mut() {
                *a = c % l_hat;
                c /= l_hat;
            }
            let mut err = [0.0, 0.0];
            for j in 0..l_hat {
                let mut dm = am[j].clone();
                let mut de = ae[j].clone();
                for k in 0..l {
                    if assign[k] == j {
                        dm = dm.sub(&tm[k]).unwrap();
                        de = de.sub(&te[k]).unwrap();
                    }
                }
                err[0] += dm.norm_sqr();
                err[1] += de.norm_sqr();
            }
            best = best.min(0.5 * (err[0] / hm.norm_sqr() + err[1] / he.norm_sqr()));
        }
        best
    }

    #[test]
    fn ub_npae_examples_and_bound() {
        let s = sys();
        let os = OversamplingConfig::default();
        let one = [PathParams { gain: C64::new(0.6, 0.2), delay: 40e-9, azimuth: 0.3, elevation: 1.3 }];
        let hm = synthesize_channel(&one, &s.array, &s.bands.measured, BandTag::Measured).unwrap();
        let he = synthesize_channel(&one, &s.array, &s.bands.target, BandTag::Target).unwrap();
        let phys = PhysicalPaths { paths: &one, scale_m: 1.0, scale_e: 1.0 };
        let ext = |h: &ChannelMatrix| ExtractedPath { member_indices: vec![0], response: h.clone(), band: h.band() };
        let peak = find_peak(&hm, &s.array, &s.bands.measured, &os).unwrap();
        let v = ub_npae(&hm, &he, &[ext(&hm)], &[ext(&he)], &phys, &[peak], &s, &os).unwrap();
        assert!(v < 1e-20);
        let zm = ext(&hm.scaled(C64::new(0.0, 0.0)));
        let ze = ext(&he.scaled(C64::new(0.0, 0.0)));
        let v = ub_npae(&hm, &he, &[zm.clone()], &[ze.clone()], &phys, &[peak], &s, &os).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(ub_npae(&hm, &he, &[zm], &[ze], &phys, &[], &s, &os).is_err());

        // three-path scenes, two clusters
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let paths: Vec<PathParams> = (0..3)
                .map(|_| PathParams {
                    gain: C64::from_polar(rng.gen_range(0.2..1.0), rng.gen_range(-3.0..3.0)),
                    delay: rng.gen_range(0.0..150e-9),
                    azimuth: rng.gen_range(-1.2..1.2),
                    elevation: rng.gen_range(1.0..2.1),
                })
                .collect();
            let hm = synthesize_channel(&paths, &s.array, &s.bands.measured, BandTag::Measured).unwrap();
            let he = synthesize_channel(&paths, &s.array, &s.bands.target, BandTag::Target).unwrap();
            let ex = extract_joint(
                &hm,
                &he,
                &s,
                &ExtractionConfig {
                    sage: SageConfig { max_subpaths: 2, ..SageConfig::default() },
                    dbscan: DbscanConfig { eps: 0.05, min_pts: 1 },
                },
                &os,
            )
            .unwrap();
            let phys = PhysicalPaths { paths: &paths, scale_m: 1.0, scale_e: 1.0 };
            let ub = ex.ub_npae(&hm, &he, &phys, &s, &os).unwrap();
            let am: Vec<_> = ex.paths_m.iter().map(|p| p.response.clone()).collect();
            let ae: Vec<_> = ex.paths_e.iter().map(|p| p.response.clone()).collect();
            let exact = exhaustive_npae(
                &hm,
                &he,
                &am,
                &ae,
                &phys_responses(&paths, &s, BandTag::Measured),
                &phys_responses(&paths, &s, BandTag::Target),
            );
            assert!(ub >= exact * (1.0 - 1e-12), "ub {ub} < exact {exact}");
        }
    }

    #[test]
    fn record_round_trip() {
        let s = sys();
        let os = OversamplingConfig::default();
        let spec = crate::env::EnvironmentSpec::preset("env-sparse").unwrap();
        let sample = crate::env::generate_sample(&spec, 0, &s.array, &s.bands, None).unwrap();
        let ex = extract_joint(&sample.h_m, &sample.h_e, &s, &ExtractionConfig::default(), &os).unwrap();
        let rec = ExtractionRecord {
            index: 0,
            config_digest: "x".into(),
            subpaths_m: ex.subpaths_m.clone(),
            subpaths_e: ex.subpaths_e.clone(),
            clusters: ex.clusters.clone(),
            peaks: ex.peaks.clone(),
            nmde: ex.nmde(&sample.h_m, &sample.h_e).unwrap(),
            ub_npae: 0.0,
        };
        let line = serde_json::to_string(&rec).unwrap();
        let back: ExtractionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.into_extraction(&s, &os).unwrap(), ex);
    }

    proptest! {
        #[test]
        fn path_distance_is_a_metric(
            a in prop::array::uniform3(-10.0..10.0f64),
            b in prop::array::uniform3(-10.0..10.0f64),
            c in prop::array::uniform3(-10.0..10.0f64),
        ) {
            let ab = path_distance(&a, &b);
            prop_assert!((ab - path_distance(&b, &a)).abs() < 1e-15);
            prop_assert!(path_distance(&a, &a) == 0.0);
            prop_assert!(ab <= path_distance(&a, &c) + path_distance(&c, &b) + 1e-12);
        }

        #[test]
        fn min_pts_one_gives_partition(seed in 0u64..500, n in 1usize..20, eps in 0.05..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
            let cl = dbscan_omegas(&pts, &DbscanConfig { eps, min_pts: 1 }).unwrap();
            let mut flat: Vec<usize> = cl.iter().flatten().copied().collect();
            flat.sort_unstable();
            prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
        }
    }
}
