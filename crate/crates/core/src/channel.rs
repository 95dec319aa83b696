//! Wideband uniform-planar-array channel synthesis.
//!
//! A channel matrix has one row per antenna and one column per subcarrier.
//! Antennas are ordered horizontal-major, vertical-minor, so that the array
//! response is `a_h ⊗ a_v`. Every matrix in the crate uses this order.
//!
//! A path `(α, τ, φ, θ)` contributes
//! `α · e^{-j2π f₁ τ} · a(φ, θ) · b(τ)^H` where `a` is the unit-norm array
//! response and `b(τ)[k] = e^{j2π k Δf τ}`.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// `e^{j2π·cycles}` with the integer part of `cycles` removed first, so large
/// carrier-frequency products keep full phase precision.
#[inline]
pub fn cis_cycles(cycles: f64) -> C64 {
    let frac = cycles - cycles.round();
    C64::from_polar(1.0, 2.0 * PI * frac)
}

/// Uniform planar array geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub n_h: usize,
    pub n_v: usize,
    /// Element spacing over wavelength.
    #[serde(default = "half")]
    pub spacing_ratio: f64,
}

fn half() -> f64 {
    0.5
}

impl ArrayConfig {
    pub fn new(n_h: usize, n_v: usize) -> Self {
        Self {
            n_h,
            n_v,
            spacing_ratio: 0.5,
        }
    }

    /// 16 × 8 array used for the full-size experiments.
    pub fn full_scale() -> Self {
        Self::new(16, 8)
    }

    pub fn n_t(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_h == 0 || self.n_v == 0 {
            return Err(Error::InvalidConfig("array needs at least one antenna per axis".into()));
        }
        if !(self.spacing_ratio.is_finite() && self.spacing_ratio > 0.0) {
            return Err(Error::InvalidConfig("spacing_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Horizontal and vertical spatial frequencies (cycles per element) seen
    /// by a plane wave arriving from `(azimuth, elevation)`.
    pub fn spatial_freqs(&self, azimuth: f64, elevation: f64) -> (f64, f64) {
        (
            self.spacing_ratio * azimuth.sin() * elevation.sin(),
            self.spacing_ratio * elevation.cos(),
        )
    }

    /// Best-effort inverse of [`spatial_freqs`](Self::spatial_freqs). Spatial
    /// frequencies outside the visible region are clamped onto its boundary.
    pub fn angles_from_freqs(&self, h_freq: f64, v_freq: f64) -> (f64, f64) {
        let d = self.spacing_ratio;
        let cos_el = (v_freq / d).clamp(-1.0, 1.0);
        let elevation = cos_el.acos();
        let sin_el = elevation.sin();
        let azimuth = if sin_el <= f64::EPSILON {
            0.0
        } else {
            (h_freq / (d * sin_el)).clamp(-1.0, 1.0).asin()
        };
        (azimuth, elevation)
    }
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self::new(4, 2)
    }
}

/// A band of equally spaced subcarriers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    /// Frequency of the first subcarrier, Hz.
    pub f_start: f64,
    pub n_subcarriers: usize,
    /// Subcarrier spacing, Hz.
    pub delta_f: f64,
}

impl BandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers == 0 {
            return Err(Error::InvalidConfig("band needs at least one subcarrier".into()));
        }
        if !(self.delta_f.is_finite() && self.delta_f > 0.0) {
            return Err(Error::InvalidConfig("delta_f must be positive".into()));
        }
        if !self.f_start.is_finite() {
            return Err(Error::InvalidConfig("f_start must be finite".into()));
        }
        Ok(())
    }

    /// Delays are only identifiable modulo this period.
    pub fn unambiguous_delay(&self) -> f64 {
        1.0 / self.delta_f
    }
}

/// Measured and target bands. Both share one subcarrier spacing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandPair {
    pub measured: BandConfig,
    pub target: BandConfig,
}

impl BandPair {
    pub fn validate(&self) -> Result<()> {
        self.measured.validate()?;
        self.target.validate()?;
        if (self.measured.delta_f - self.target.delta_f).abs() > 1e-9 * self.measured.delta_f {
            return Err(Error::InvalidConfig(
                "measured and target bands must share delta_f".into(),
            ));
        }
        Ok(())
    }

    pub fn delta_f(&self) -> f64 {
        self.measured.delta_f
    }

    pub fn get(&self, tag: BandTag) -> &BandConfig {
        match tag {
            BandTag::Measured => &self.measured,
            BandTag::Target => &self.target,
        }
    }

    /// 3.4 GHz → 3.5 GHz with 32 subcarriers at 2.5 MHz.
    pub fn full_scale() -> Self {
        Self {
            measured: BandConfig {
                f_start: 3.4e9,
                n_subcarriers: 32,
                delta_f: 2.5e6,
            },
            target: BandConfig {
                f_start: 3.5e9,
                n_subcarriers: 32,
                delta_f: 2.5e6,
            },
        }
    }
}

impl Default for BandPair {
    /// Desk-scale bands: 16 subcarriers at 5 MHz (same 80 MHz bandwidth and
    /// 12.5 ns resolution as the full-scale setup).
    fn default() -> Self {
        Self {
            measured: BandConfig {
                f_start: 3.4e9,
                n_subcarriers: 16,
                delta_f: 5e6,
            },
            target: BandConfig {
                f_start: 3.5e9,
                n_subcarriers: 16,
                delta_f: 5e6,
            },
        }
    }
}

/// Array geometry plus the two bands: everything needed to synthesize or
/// interpret a channel pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub array: ArrayConfig,
    pub bands: BandPair,
}

impl SystemConfig {
    pub fn new(array: ArrayConfig, bands: BandPair) -> Self {
        Self { array, bands }
    }

    pub fn full_scale() -> Self {
        Self::new(ArrayConfig::full_scale(), BandPair::full_scale())
    }

    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.bands.validate()
    }

    pub fn band(&self, tag: BandTag) -> &BandConfig {
        self.bands.get(tag)
    }

    /// Shape of a channel on the given band.
    pub fn shape(&self, tag: BandTag) -> (usize, usize) {
        (self.array.n_t(), self.band(tag).n_subcarriers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandTag {
    Measured,
    Target,
}

/// One physical propagation path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub gain: C64,
    /// Seconds.
    pub delay: f64,
    /// Radians, in (−π, π].
    pub azimuth: f64,
    /// Radians, in (0, π).
    pub elevation: f64,
}

impl PathParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain.re.is_finite() && self.gain.im.is_finite()) {
            return Err(Error::InvalidConfig("path gain must be finite".into()));
        }
        if !(self.delay.is_finite() && self.delay >= 0.0) {
            return Err(Error::InvalidConfig("path delay must be non-negative".into()));
        }
        if !(self.elevation > 0.0 && self.elevation < PI) {
            return Err(Error::InvalidConfig("elevation must lie in (0, π)".into()));
        }
        if !(self.azimuth > -PI && self.azimuth <= PI) {
            return Err(Error::InvalidConfig("azimuth must lie in (−π, π]".into()));
        }
        Ok(())
    }

    pub fn to_phase_path(&self, array: &ArrayConfig) -> PhasePath {
        let (h_freq, v_freq) = array.spatial_freqs(self.azimuth, self.elevation);
        PhasePath {
            gain: self.gain,
            h_freq,
            v_freq,
            delay: self.delay,
        }
    }
}

/// A path expressed directly in the quantities the array and band observe:
/// spatial frequencies in cycles per element, and delay in seconds. Any real
/// value is allowed, including spatial frequencies outside the visible region
/// and negative delays, which is what shifted or estimated paths need.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePath {
    pub gain: C64,
    pub h_freq: f64,
    pub v_freq: f64,
    pub delay: f64,
}

/// Complex channel response of one link on one band.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    entries: Array2<C64>,
    band: BandTag,
}

impl ChannelMatrix {
    pub fn new(entries: Array2<C64>, band: BandTag) -> Self {
        Self { entries, band }
    }

    pub fn zeros(n_t: usize, n_sub: usize, band: BandTag) -> Self {
        Self::new(Array2::zeros((n_t, n_sub)), band)
    }

    pub fn from_fn(
        n_t: usize,
        n_sub: usize,
        band: BandTag,
        f: impl FnMut((usize, usize)) -> C64,
    ) -> Self {
        Self::new(Array2::from_shape_fn((n_t, n_sub), f), band)
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Array2<C64> {
        &mut self.entries
    }

    pub fn into_entries(self) -> Array2<C64> {
        self.entries
    }

    pub fn band(&self) -> BandTag {
        self.band
    }

    pub fn n_antennas(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_subcarriers(&self) -> usize {
        self.entries.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self::new(self.entries.mapv(|z| z * c), self.band)
    }

    pub fn check_same_shape(&self, other: &ChannelMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ChannelMatrix) -> Result<()> {
        self.check_same_shape(other)?;
        self.entries += &other.entries;
        Ok(())
    }

    pub fn sub(&self, other: &ChannelMatrix) -> Result<ChannelMatrix> {
        self.check_same_shape(other)?;
        Ok(Self::new(&self.entries - &other.entries, self.band))
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &ChannelMatrix) -> Result<ChannelMatrix> {
        self.check_same_shape(other)?;
        Ok(Self::new(&self.entries * &other.entries, self.band))
    }

    /// `‖self − other‖_F²`.
    pub fn distance_sqr(&self, other: &ChannelMatrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum())
    }

    /// Sum of several matrices of identical shape. Fails on an empty slice.
    pub fn sum<'a>(items: impl IntoIterator<Item = &'a ChannelMatrix>) -> Result<ChannelMatrix> {
        let mut it = items.into_iter();
        let mut acc = it.next().ok_or(Error::Empty("matrix sum"))?.clone();
        for m in it {
            acc.add_assign(m)?;
        }
        Ok(acc)
    }

    /// Flip the antenna axis.
    pub fn flip_antennas(&self) -> ChannelMatrix {
        let mut e = self.entries.clone();
        e.invert_axis(Axis(0));
        Self::new(e, self.band)
    }
}

/// Unit-norm steering vector `a_h(h_freq) ⊗ a_v(v_freq)`.
pub fn steering_from_freqs(h_freq: f64, v_freq: f64, array: &ArrayConfig) -> Vec<C64> {
    let scale = 1.0 / (array.n_t() as f64).sqrt();
    let mut out = Vec::with_capacity(array.n_t());
    for ph in 0..array.n_h {
        let ah = cis_cycles(ph as f64 * h_freq);
        for pv in 0..array.n_v {
            out.push(ah * cis_cycles(pv as f64 * v_freq) * scale);
        }
    }
    out
}

/// Array response `a(φ, θ) = a_h(φ, θ) ⊗ a_v(θ)`, unit Euclidean norm.
pub fn array_response(azimuth: f64, elevation: f64, array: &ArrayConfig) -> Vec<C64> {
    let (h, v) = array.spatial_freqs(azimuth, elevation);
    steering_from_freqs(h, v, array)
}

/// Frequency response vector, entry `k` equal to `e^{j2π k Δf τ}`.
pub fn band_steering(delay: f64, band: &BandConfig) -> Vec<C64> {
    let step = band.delta_f * delay;
    (0..band.n_subcarriers)
        .map(|k| cis_cycles(k as f64 * step))
        .collect()
}

/// Response of a path given in spatial-frequency form.
pub fn phase_path_response(
    path: &PhasePath,
    array: &ArrayConfig,
    band: &BandConfig,
    tag: BandTag,
) -> ChannelMatrix {
    let a = steering_from_freqs(path.h_freq, path.v_freq, array);
    let b = band_steering(path.delay, band);
    let c = path.gain * cis_cycles(-band.f_start * path.delay);
    ChannelMatrix::from_fn(a.len(), b.len(), tag, |(p, k)| c * a[p] * b[k].conj())
}

/// `α e^{-j2π f₁ τ} a(φ, θ) b(τ)^H`.
pub fn path_response(
    path: &PathParams,
    array: &ArrayConfig,
    band: &BandConfig,
    tag: BandTag,
) -> ChannelMatrix {
    phase_path_response(&path.to_phase_path(array), array, band, tag)
}

/// Sum of all path responses on one band.
pub fn synthesize_channel(
    paths: &[PathParams],
    array: &ArrayConfig,
    band: &BandConfig,
    tag: BandTag,
) -> Result<ChannelMatrix> {
    if paths.is_empty() {
        return Err(Error::Empty("path list (degenerate channel)"));
    }
    let mut acc = ChannelMatrix::zeros(array.n_t(), band.n_subcarriers, tag);
    for p in paths {
        acc.add_assign(&path_response(p, array, band, tag))?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Angular-delay representation `T H F^H` with `T = F_{N_h} ⊗ F_{N_v}`
/// (forward) or its inverse `T^H X F`. All DFTs are unitary.
pub fn angular_delay_transform(
    h: &ChannelMatrix,
    array: &ArrayConfig,
    direction: Direction,
) -> Result<ChannelMatrix> {
    if h.n_antennas() != array.n_t() {
        return Err(Error::dims(
            format!("{} antennas", array.n_t()),
            format!("{} antennas", h.n_antennas()),
        ));
    }
    let (n_t, k) = h.shape();
    let mut planner = FftPlanner::<f64>::new();
    let (spatial_fwd, freq_fwd) = match direction {
        // rows: forward DFT, columns: inverse DFT
        Direction::Forward => (true, false),
        Direction::Inverse => (false, true),
    };
    let fft = |planner: &mut FftPlanner<f64>, n: usize, fwd: bool| {
        if fwd {
            planner.plan_fft_forward(n)
        } else {
            planner.plan_fft_inverse(n)
        }
    };
    let f_h = fft(&mut planner, array.n_h, spatial_fwd);
    let f_v = fft(&mut planner, array.n_v, spatial_fwd);
    let f_k = fft(&mut planner, k, freq_fwd);
    let scale = 1.0 / ((n_t * k) as f64).sqrt();

    let mut out = h.entries().clone();
    let mut buf_v = vec![C64::default(); array.n_v];
    let mut buf_h = vec![C64::default(); array.n_h];
    for mut col in out.columns_mut() {
        // vertical transform within each horizontal block
        for ph in 0..array.n_h {
            for pv in 0..array.n_v {
                buf_v[pv] = col[ph * array.n_v + pv];
            }
            f_v.process(&mut buf_v);
            for pv in 0..array.n_v {
                col[ph * array.n_v + pv] = buf_v[pv];
            }
        }
        for pv in 0..array.n_v {
            for ph in 0..array.n_h {
                buf_h[ph] = col[ph * array.n_v + pv];
            }
            f_h.process(&mut buf_h);
            for ph in 0..array.n_h {
                col[ph * array.n_v + pv] = buf_h[ph];
            }
        }
    }
    let mut buf_k = vec![C64::default(); k];
    for mut row in out.rows_mut() {
        for (dst, src) in buf_k.iter_mut().zip(row.iter()) {
            *dst = *src;
        }
        f_k.process(&mut buf_k);
        for (dst, src) in row.iter_mut().zip(buf_k.iter()) {
            *dst = *src * scale;
        }
    }
    Ok(ChannelMatrix::new(out, h.band()))
}

/// Adds circular complex Gaussian noise at `snr_db` relative to the average
/// per-entry power of `h`. `f64::INFINITY` disables noise.
pub fn add_awgn(h: &ChannelMatrix, snr_db: f64, seed: u64) -> Result<ChannelMatrix> {
    if snr_db == f64::INFINITY {
        return Ok(h.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidConfig(format!("snr_db must be finite, got {snr_db}")));
    }
    let n = (h.n_antennas() * h.n_subcarriers()) as f64;
    let variance = h.norm_sqr() / (n * 10f64.powf(snr_db / 10.0));
    let sigma = (variance / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = h.clone();
    for z in out.entries_mut().iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *z += C64::new(re * sigma, im * sigma);
    }
    Ok(out)
}

/// Scales `h` to Frobenius norm `√(N_T K)`.
pub fn normalize_channel(h: &ChannelMatrix) -> Result<ChannelMatrix> {
    let norm = h.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Degenerate("cannot normalize a zero channel".into()));
    }
    let target = ((h.n_antennas() * h.n_subcarriers()) as f64).sqrt();
    Ok(h.scaled(C64::new(target / norm, 0.0)))
}
