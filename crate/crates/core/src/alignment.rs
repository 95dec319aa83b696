//! Path alignment: oversampled angular/delay peak search and the unit-modulus
//! phase masks that move an extracted path's peak to the origin bin.
//!
//! The measured-band mask `U` shifts the path's spatial frequencies and delay
//! by the scanned peak. The target-band label mask `V` applies the same shift
//! plus a phase rotation `β(n3) = 2π (f₁ᵉ − f₁ᵐ) n3 / (O_d K_m Δf)` that keeps
//! the measured→target mapping unchanged. Network outputs are mapped back with
//! `conj(V)`.

use serde::{Deserialize, Serialize};

use crate::channel::{cis_cycles, ArrayConfig, BandConfig, BandTag, ChannelMatrix, SystemConfig, C64};
use crate::error::{Error, Result};

/// Oversampling factors of the horizontal, vertical and delay scan grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OversamplingConfig {
    pub o_h: usize,
    pub o_v: usize,
    pub o_d: usize,
}

impl OversamplingConfig {
    pub fn uniform(o: usize) -> Self {
        Self { o_h: o, o_v: o, o_d: o }
    }

    pub fn validate(&self) -> Result<()> {
        if self.o_h == 0 || self.o_v == 0 || self.o_d == 0 {
            return Err(Error::InvalidConfig("oversampling factors must be >= 1".into()));
        }
        Ok(())
    }

    /// Scan-grid sizes `(O_h N_h, O_v N_v, O_d K_m)`.
    pub fn grid(&self, array: &ArrayConfig, measured: &BandConfig) -> (usize, usize, usize) {
        (
            self.o_h * array.n_h,
            self.o_v * array.n_v,
            self.o_d * measured.n_subcarriers,
        )
    }
}

impl Default for OversamplingConfig {
    fn default() -> Self {
        Self::uniform(2)
    }
}

/// Oversampled angular-delay peak indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct PeakPosition {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl PeakPosition {
    pub const ORIGIN: PeakPosition = PeakPosition { n1: 0, n2: 0, n3: 0 };

    pub fn new(n1: usize, n2: usize, n3: usize) -> Self {
        Self { n1, n2, n3 }
    }

    fn check(&self, os: &OversamplingConfig, array: &ArrayConfig, measured: &BandConfig) -> Result<()> {
        let (g1, g2, g3) = os.grid(array, measured);
        if self.n1 >= g1 || self.n2 >= g2 || self.n3 >= g3 {
            return Err(Error::InvalidConfig(format!(
                "peak {self:?} outside scan grid ({g1}, {g2}, {g3})"
            )));
        }
        Ok(())
    }

    /// Phase-domain location `(2π n1/(O_h N_h), 2π n2/(O_v N_v), 2π n3/(O_d K_m))`.
    pub fn omega(&self, os: &OversamplingConfig, array: &ArrayConfig, measured: &BandConfig) -> [f64; 3] {
        let (g1, g2, g3) = os.grid(array, measured);
        let tau = std::f64::consts::TAU;
        [
            tau * self.n1 as f64 / g1 as f64,
            tau * self.n2 as f64 / g2 as f64,
            tau * self.n3 as f64 / g3 as f64,
        ]
    }
}

/// `e^{j2π·num/den}` with the numerator reduced modulo `den` first.
fn root_of_unity(num: usize, den: usize) -> C64 {
    cis_cycles((num % den) as f64 / den as f64)
}

/// Unnormalized scan vector `[1, e^{j2π n/G}, …, e^{j2π n(len−1)/G}]`.
fn scan_vector(n: usize, grid: usize, len: usize) -> Vec<C64> {
    (0..len).map(|i| root_of_unity(n * i, grid)).collect()
}

/// Objective of the angular scan, `Σ_k |w_{n1,n2}^H Â[:, k]|²`, for every grid
/// point, indexed `[n1 * G_v + n2]`.
fn angular_spectrum(a_hat: &ChannelMatrix, array: &ArrayConfig, g1: usize, g2: usize) -> Vec<f64> {
    let (n_h, n_v) = (array.n_h, array.n_v);
    let k = a_hat.n_subcarriers();
    let e = a_hat.entries();
    let wv: Vec<Vec<C64>> = (0..g2).map(|n2| scan_vector(n2, g2, n_v)).collect();
    let wh: Vec<Vec<C64>> = (0..g1).map(|n1| scan_vector(n1, g1, n_h)).collect();
    // partial[n2][ph][k] = Σ_pv conj(wv[pv]) Â[(ph, pv), k]
    let mut partial = vec![C64::default(); g2 * n_h * k];
    for n2 in 0..g2 {
        for ph in 0..n_h {
            for pv in 0..n_v {
                let w = wv[n2][pv].conj();
                let row = e.row(ph * n_v + pv);
                let base = (n2 * n_h + ph) * k;
                for (q, z) in row.iter().enumerate() {
                    partial[base + q] += w * z;
                }
            }
        }
    }
    let mut out = vec![0.0; g1 * g2];
    let mut acc = vec![C64::default(); k];
    for n1 in 0..g1 {
        for n2 in 0..g2 {
            acc.iter_mut().for_each(|z| *z = C64::default());
            for ph in 0..n_h {
                let w = wh[n1][ph].conj();
                let base = (n2 * n_h + ph) * k;
                for q in 0..k {
                    acc[q] += w * partial[base + q];
                }
            }
            out[n1 * g2 + n2] = acc.iter().map(|z| z.norm_sqr()).sum();
        }
    }
    out
}

/// Objective of the delay scan, `‖Â w_{n3}‖²`, for every grid point.
fn delay_spectrum(a_hat: &ChannelMatrix, g3: usize) -> Vec<f64> {
    let k = a_hat.n_subcarriers();
    let e = a_hat.entries();
    (0..g3)
        .map(|n3| {
            let w = scan_vector(n3, g3, k);
            e.rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(&w)
                        .map(|(z, w)| z * w)
                        .sum::<C64>()
                        .norm_sqr()
                })
                .sum()
        })
        .collect()
}

/// Lowest index among the maxima.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_measured_shape(a_hat: &ChannelMatrix, array: &ArrayConfig, band: &BandConfig) -> Result<()> {
    if a_hat.shape() != (array.n_t(), band.n_subcarriers) {
        return Err(Error::dims(
            format!("{}x{}", array.n_t(), band.n_subcarriers),
            format!("{:?}", a_hat.shape()),
        ));
    }
    Ok(())
}

/// Independent angular and delay peak searches over the oversampled grids.
pub fn find_peak(
    a_hat: &ChannelMatrix,
    array: &ArrayConfig,
    band: &BandConfig,
    os: &OversamplingConfig,
) -> Result<PeakPosition> {
    os.validate()?;
    check_measured_shape(a_hat, array, band)?;
    if a_hat.norm_sqr() == 0.0 {
        return Err(Error::Degenerate("peak search on a zero response".into()));
    }
    let (g1, g2, g3) = os.grid(array, band);
    let ang = argmax(&angular_spectrum(a_hat, array, g1, g2));
    let n3 = argmax(&delay_spectrum(a_hat, g3));
    Ok(PeakPosition::new(ang / g2, ang % g2, n3))
}

/// Peak of a target-band response on the measured-band scan grid. The delay
/// scan uses the measured grid step `1/(O_d K_m)` over the target columns, so
/// the result is comparable with [`find_peak`] on the measured response.
pub fn find_peak_on_target(b_hat: &ChannelMatrix, sys: &SystemConfig, os: &OversamplingConfig) -> Result<PeakPosition> {
    os.validate()?;
    let (n_t, k_e) = sys.shape(BandTag::Target);
    if b_hat.shape() != (n_t, k_e) {
        return Err(Error::dims(format!("{n_t}x{k_e}"), format!("{:?}", b_hat.shape())));
    }
    if b_hat.norm_sqr() == 0.0 {
        return Err(Error::Degenerate("peak search on a zero response".into()));
    }
    let (g1, g2, g3) = os.grid(&sys.array, &sys.bands.measured);
    let ang = argmax(&angular_spectrum(b_hat, &sys.array, g1, g2));
    let n3 = argmax(&delay_spectrum(b_hat, g3));
    Ok(PeakPosition::new(ang / g2, ang % g2, n3))
}

/// Angular and delay scan objectives at the maximizing grid point.
pub fn peak_power(
    a_hat: &ChannelMatrix,
    array: &ArrayConfig,
    band: &BandConfig,
    os: &OversamplingConfig,
) -> Result<(f64, f64)> {
    os.validate()?;
    check_measured_shape(a_hat, array, band)?;
    let (g1, g2, g3) = os.grid(array, band);
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok((max(angular_spectrum(a_hat, array, g1, g2)), max(delay_spectrum(a_hat, g3))))
}

/// Unit-modulus element-wise phase mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentOperator {
    pub mask: ChannelMatrix,
    pub band: BandTag,
    /// `β(n3)`, radians; zero for measured-band masks.
    pub phase_rotation: f64,
}

impl AlignmentOperator {
    pub fn apply(&self, x: &ChannelMatrix) -> Result<ChannelMatrix> {
        let mut out = self.mask.hadamard(x)?;
        out = ChannelMatrix::new(out.into_entries(), x.band());
        Ok(out)
    }

    /// Applies `conj(mask)`, undoing [`apply`](Self::apply).
    pub fn apply_inverse(&self, x: &ChannelMatrix) -> Result<ChannelMatrix> {
        self.mask.check_same_shape(x)?;
        let e = x
            .entries()
            .iter()
            .zip(self.mask.entries().iter())
            .map(|(z, m)| z * m.conj());
        let out = ndarray::Array2::from_shape_vec(x.shape(), e.collect())
            .map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(ChannelMatrix::new(out, x.band()))
    }
}

/// `conj(w_{n1,n2}^{(h,v)}) ⊗ 1ᵀ ⊙ 1 ⊗ (w_{n3})ᵀ` over `n_sub` columns, with the
/// delay scan step fixed by the measured grid `g3`.
fn shift_mask(
    peak: &PeakPosition,
    array: &ArrayConfig,
    g1: usize,
    g2: usize,
    g3: usize,
    n_sub: usize,
    rotation: C64,
    band: BandTag,
) -> ChannelMatrix {
    let n_v = array.n_v;
    let row: Vec<C64> = (0..array.n_t())
        .map(|p| {
            let (ph, pv) = (p / n_v, p % n_v);
            (root_of_unity(peak.n1 * ph, g1) * root_of_unity(peak.n2 * pv, g2)).conj()
        })
        .collect();
    let col: Vec<C64> = scan_vector(peak.n3, g3, n_sub)
        .into_iter()
        .map(|z| z * rotation)
        .collect();
    ChannelMatrix::from_fn(array.n_t(), n_sub, band, |(p, q)| row[p] * col[q])
}

/// Measured-band mask `U = S_a(n1, n2) ⊙ S_d(n3)`.
pub fn build_measured_mask(
    peak: &PeakPosition,
    array: &ArrayConfig,
    measured: &BandConfig,
    os: &OversamplingConfig,
) -> Result<AlignmentOperator> {
    os.validate()?;
    peak.check(os, array, measured)?;
    let (g1, g2, g3) = os.grid(array, measured);
    Ok(AlignmentOperator {
        mask: shift_mask(
            peak,
            array,
            g1,
            g2,
            g3,
            measured.n_subcarriers,
            C64::new(1.0, 0.0),
            BandTag::Measured,
        ),
        band: BandTag::Measured,
        phase_rotation: 0.0,
    })
}

/// `β(n3)` in cycles.
fn rotation_cycles(peak: &PeakPosition, sys: &SystemConfig, os: &OversamplingConfig) -> f64 {
    let m = &sys.bands.measured;
    let e = &sys.bands.target;
    let g3 = (os.o_d * m.n_subcarriers) as f64;
    (e.f_start - m.f_start) / m.delta_f * (peak.n3 as f64 / g3)
}

/// Target-band label mask `V = e^{jβ(n3)} · S_a(n1, n2) ⊙ S_d^{(e)}(n3)`.
pub fn build_label_mask(
    peak: &PeakPosition,
    sys: &SystemConfig,
    os: &OversamplingConfig,
) -> Result<AlignmentOperator> {
    os.validate()?;
    let array = &sys.array;
    let measured = &sys.bands.measured;
    peak.check(os, array, measured)?;
    let (g1, g2, g3) = os.grid(array, measured);
    let cycles = rotation_cycles(peak, sys, os);
    Ok(AlignmentOperator {
        mask: shift_mask(
            peak,
            array,
            g1,
            g2,
            g3,
            sys.bands.target.n_subcarriers,
            cis_cycles(cycles),
            BandTag::Target,
        ),
        band: BandTag::Target,
        phase_rotation: std::f64::consts::TAU * (cycles - cycles.round()),
    })
}

/// Finds the peak of `a_hat` and relocates it to the origin bin.
pub fn align_path(
    a_hat: &ChannelMatrix,
    array: &ArrayConfig,
    measured: &BandConfig,
    os: &OversamplingConfig,
) -> Result<(ChannelMatrix, PeakPosition)> {
    let peak = find_peak(a_hat, array, measured, os)?;
    let u = build_measured_mask(&peak, array, measured, os)?;
    Ok((u.apply(a_hat)?, peak))
}

/// `B̃ = V ⊙ B̂`.
pub fn co_transform_label(
    b_hat: &ChannelMatrix,
    peak: &PeakPosition,
    sys: &SystemConfig,
    os: &OversamplingConfig,
) -> Result<ChannelMatrix> {
    build_label_mask(peak, sys, os)?.apply(b_hat)
}

/// `Ĥᵉ = Σ_l conj(V_l) ⊙ output_l`.
pub fn co_compensate(
    outputs: &[ChannelMatrix],
    peaks: &[PeakPosition],
    sys: &SystemConfig,
    os: &OversamplingConfig,
) -> Result<ChannelMatrix> {
    if outputs.len() != peaks.len() {
        return Err(Error::dims(
            format!("{} peaks", outputs.len()),
            format!("{} peaks", peaks.len()),
        ));
    }
    let (n_t, k_e) = sys.shape(BandTag::Target);
    let mut acc = ChannelMatrix::zeros(n_t, k_e, BandTag::Target);
    for (out, peak) in outputs.iter().zip(peaks) {
        let v = build_label_mask(peak, sys, os)?;
        acc.add_assign(&v.apply_inverse(out)?)?;
    }
    Ok(acc)
}

/// Which alignment components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    None,
    DelayOnly,
    AngularOnly,
    Full,
}

impl AlignmentMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "delay_only" => Ok(Self::DelayOnly),
            "angular_only" => Ok(Self::AngularOnly),
            "full" => Ok(Self::Full),
            _ => Err(Error::InvalidConfig(format!("unknown alignment mode {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::DelayOnly => "delay_only",
            Self::AngularOnly => "angular_only",
            Self::Full => "full",
        }
    }
}

/// Alignment restricted to a subset of components. Disabled components keep
/// their peak index at zero, which makes the corresponding masks identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aligner {
    pub mode: AlignmentMode,
    pub os: OversamplingConfig,
}

/// Configured aligner for an ablation mode.
pub fn alignment_mode(mode: AlignmentMode, os: OversamplingConfig) -> Result<Aligner> {
    os.validate()?;
    Ok(Aligner { mode, os })
}

impl Aligner {
    pub fn restrict(&self, peak: PeakPosition) -> PeakPosition {
        match self.mode {
            AlignmentMode::None => PeakPosition::ORIGIN,
            AlignmentMode::DelayOnly => PeakPosition::new(0, 0, peak.n3),
            AlignmentMode::AngularOnly => PeakPosition::new(peak.n1, peak.n2, 0),
            AlignmentMode::Full => peak,
        }
    }

    pub fn find_peak(&self, a_hat: &ChannelMatrix, sys: &SystemConfig) -> Result<PeakPosition> {
        if self.mode == AlignmentMode::None {
            check_measured_shape(a_hat, &sys.array, &sys.bands.measured)?;
            return Ok(PeakPosition::ORIGIN);
        }
        Ok(self.restrict(find_peak(a_hat, &sys.array, &sys.bands.measured, &self.os)?))
    }

    pub fn align(&self, a_hat: &ChannelMatrix, sys: &SystemConfig) -> Result<(ChannelMatrix, PeakPosition)> {
        let peak = self.find_peak(a_hat, sys)?;
        if peak == PeakPosition::ORIGIN {
            return Ok((a_hat.clone(), peak));
        }
        let u = build_measured_mask(&peak, &sys.array, &sys.bands.measured, &self.os)?;
        Ok((u.apply(a_hat)?, peak))
    }

    pub fn co_transform(&self, b_hat: &ChannelMatrix, peak: &PeakPosition, sys: &SystemConfig) -> Result<ChannelMatrix> {
        co_transform_label(b_hat, &self.restrict(*peak), sys, &self.os)
    }

    pub fn co_compensate(&self, outputs: &[ChannelMatrix], peaks: &[PeakPosition], sys: &SystemConfig) -> Result<ChannelMatrix> {
        let restricted: Vec<_> = peaks.iter().map(|p| self.restrict(*p)).collect();
        co_compensate(outputs, &restricted, sys, &self.os)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{angular_delay_transform, phase_path_response, Direction, PhasePath};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sys() -> SystemConfig {
        SystemConfig::default()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize, band: BandTag) -> ChannelMatrix {
        ChannelMatrix::from_fn(n, k, band, |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn on_grid_path(s: &SystemConfig, os: &OversamplingConfig, peak: PeakPosition) -> ChannelMatrix {
        let (g1, g2, g3) = os.grid(&s.array, &s.bands.measured);
        let p = PhasePath {
            gain: C64::from_polar(1.3, 0.4),
            h_freq: peak.n1 as f64 / g1 as f64,
            v_freq: peak.n2 as f64 / g2 as f64,
            delay: peak.n3 as f64 / g3 as f64 / s.bands.delta_f(),
        };
        phase_path_response(&p, &s.array, &s.bands.measured, BandTag::Measured)
    }

    #[test]
    fn on_grid_peak_is_exact() {
        let s = sys();
        for o in 1..=3 {
            let os = OversamplingConfig::uniform(o);
            let (g1, g2, g3) = os.grid(&s.array, &s.bands.measured);
            for &(n1, n2, n3) in &[(0, 0, 0), (1, 1, 5), (g1 - 1, g2 - 1, g3 - 1), (3, 0, 17 % g3)] {
                let peak = PeakPosition::new(n1, n2, n3);
                let a = on_grid_path(&s, &os, peak);
                assert_eq!(find_peak(&a, &s.array, &s.bands.measured, &os).unwrap(), peak);
                let scaled = a.scaled(C64::new(-0.2, 3.0));
                assert_eq!(find_peak(&scaled, &s.array, &s.bands.measured, &os).unwrap(), peak);
            }
        }
    }

    #[test]
    fn zero_response_rejected() {
        let s = sys();
        let z = ChannelMatrix::zeros(8, 16, BandTag::Measured);
        assert!(find_peak(&z, &s.array, &s.bands.measured, &OversamplingConfig::default()).is_err());
    }

    // Naive scan: explicit Kronecker scan vectors and full matrix products per grid point.
    #[test]
    fn off_grid_peak_matches_naive_scan() {
        let s = sys();
        let os = OversamplingConfig::uniform(2);
        let (g1, g2, g3) = os.grid(&s.array, &s.bands.measured);
        let (n_h, n_v) = (s.array.n_h, s.array.n_v);
        let tau = std::f64::consts::TAU;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = PhasePath {
                gain: C64::new(1.0, 0.0),
                h_freq: rng.gen_range(-0.5..0.5),
                v_freq: rng.gen_range(-0.5..0.5),
                delay: rng.gen_range(0.0..1.0) / s.bands.delta_f(),
            };
            let a = phase_path_response(&p, &s.array, &s.bands.measured, BandTag::Measured);
            let e = a.entries();
            let mut best_ang = (f64::MIN, 0, 0);
            for n1 in 0..g1 {
                for n2 in 0..g2 {
                    let w: Vec<C64> = (0..n_h * n_v)
                        .map(|i| {
                            let x = (n1 * (i / n_v)) as f64 / g1 as f64 + (n2 * (i % n_v)) as f64 / g2 as f64;
                            C64::from_polar(1.0, tau * x)
                        })
                        .collect();
                    let obj: f64 = (0..16)
                        .map(|k| (0..n_h * n_v).map(|i| w[i].conj() * e[(i, k)]).sum::<C64>().norm_sqr())
                        .sum();
                    if obj > best_ang.0 + 1e-9 {
                        best_ang = (obj, n1, n2);
                    }
                }
            }
            let mut best_d = (f64::MIN, 0);
            for n3 in 0..g3 {
                let obj: f64 = (0..n_h * n_v)
                    .map(|i| {
                        (0..16)
                            .map(|k| e[(i, k)] * C64::from_polar(1.0, tau * (n3 * k) as f64 / g3 as f64))
                            .sum::<C64>()
                            .norm_sqr()
                    })
                    .sum();
                if obj > best_d.0 + 1e-9 {
                    best_d = (obj, n3);
                }
            }
            let peak = find_peak(&a, &s.array, &s.bands.measured, &os).unwrap();
            assert_eq!(peak, PeakPosition::new(best_ang.1, best_ang.2, best_d.1));
        }
    }

    #[test]
    fn origin_mask_is_all_ones() {
        let s = sys();
        let os = OversamplingConfig::default();
        let u = build_measured_mask(&PeakPosition::ORIGIN, &s.array, &s.bands.measured, &os).unwrap();
        assert!(u.mask.entries().iter().all(|z| *z == C64::new(1.0, 0.0)));
        let v = build_label_mask(&PeakPosition::ORIGIN, &s, &os).unwrap();
        assert!(v.mask.entries().iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
        assert_eq!(v.phase_rotation, 0.0);
    }

    #[test]
    fn horizontal_mask_alternates() {
        let array = ArrayConfig::new(2, 1);
        let band = BandConfig { f_start: 0.0, n_subcarriers: 3, delta_f: 1e6 };
        let os = OversamplingConfig::uniform(1);
        let u = build_measured_mask(&PeakPosition::new(1, 0, 0), &array, &band, &os).unwrap();
        for q in 0..3 {
            assert!((u.mask.entries()[(0, q)] - C64::new(1.0, 0.0)).norm() < 1e-15);
            assert!((u.mask.entries()[(1, q)] - C64::new(-1.0, 0.0)).norm() < 1e-15);
        }
        assert!(build_measured_mask(&PeakPosition::new(2, 0, 0), &array, &band, &os).is_err());
    }

    #[test]
    fn label_rotation_vanishes_at_integer_cycles() {
        // f_e - f_m = 100 MHz, Δf = 2.5 MHz, O_d = 2, K_m = 32, n3 = 16: β = 2π·10
        let s = SystemConfig::full_scale();
        let os = OversamplingConfig::uniform(2);
        let peak = PeakPosition::new(3, 1, 16);
        let v = build_label_mask(&peak, &s, &os).unwrap();
        assert!(v.phase_rotation.abs() < 1e-9);
        // mask equals the bare peak masks
        let (g1, g2, g3) = os.grid(&s.array, &s.bands.measured);
        for ((p, q), z) in v.mask.entries().indexed_iter() {
            let (ph, pv) = (p / 8, p % 8);
            let cyc = -(3.0 * ph as f64) / g1 as f64 - (pv as f64) / g2 as f64 + 16.0 * q as f64 / g3 as f64;
            let ph = 2.0 * std::f64::consts::PI * cyc;
            assert!((z - C64::new(ph.cos(), ph.sin())).norm() < 1e-12);
        }
    }

    #[test]
    fn aligned_on_grid_path_concentrates_in_origin() {
        let s = sys();
        let os = OversamplingConfig::uniform(1);
        let a = on_grid_path(&s, &os, PeakPosition::new(2, 1, 9));
        let (at, peak) = align_path(&a, &s.array, &s.bands.measured, &os).unwrap();
        assert_eq!(peak, PeakPosition::new(2, 1, 9));
        let ad = angular_delay_transform(&at, &s.array, Direction::Forward).unwrap();
        let origin = ad.entries()[(0, 0)].norm_sqr();
        assert!(origin >= 0.999 * ad.norm_sqr());
    }

    #[test]
    fn aligned_input_is_fixed_point() {
        let s = sys();
        let os = OversamplingConfig::default();
        let a = on_grid_path(&s, &os, PeakPosition::ORIGIN);
        let (at, peak) = align_path(&a, &s.array, &s.bands.measured, &os).unwrap();
        assert_eq!(peak, PeakPosition::ORIGIN);
        assert_eq!(at, a);
    }

    #[test]
    fn compensation_inverts_cotransform() {
        let s = sys();
        let os = OversamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<_> = (0..4).map(|_| random_matrix(&mut rng, 8, 16, BandTag::Target)).collect();
        let peaks: Vec<_> = (0..4)
            .map(|_| PeakPosition::new(rng.gen_range(0..8), rng.gen_range(0..4), rng.gen_range(0..32)))
            .collect();
        let outs: Vec<_> = labels
            .iter()
            .zip(&peaks)
            .map(|(b, p)| co_transform_label(b, p, &s, &os).unwrap())
            .collect();
        let est = co_compensate(&outs, &peaks, &s, &os).unwrap();
        let plain = ChannelMatrix::sum(&labels).unwrap();
        assert!(est.distance_sqr(&plain).unwrap().sqrt() <= 1e-12 * plain.norm());
        assert!(co_compensate(&outs, &peaks[..3], &s, &os).is_err());

        let single = co_compensate(&labels[..1], &[PeakPosition::ORIGIN], &s, &os).unwrap();
        assert!(single.distance_sqr(&labels[0]).unwrap() < 1e-28);
    }

    #[test]
    fn none_mode_is_identity() {
        let s = sys();
        let al = alignment_mode(AlignmentMode::None, OversamplingConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 8, 16, BandTag::Measured);
        let (at, peak) = al.align(&a, &s).unwrap();
        assert_eq!(peak, PeakPosition::ORIGIN);
        assert_eq!(at, a);
    }

    #[test]
    fn finer_grid_never_loses_power() {
        let s = sys();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 8, 16, BandTag::Measured);
            let (a1, d1) = peak_power(&a, &s.array, &s.bands.measured, &OversamplingConfig::uniform(1)).unwrap();
            let (a2, d2) = peak_power(&a, &s.array, &s.bands.measured, &OversamplingConfig::uniform(2)).unwrap();
            assert!(a2 >= a1 * (1.0 - 1e-12) && d2 >= d1 * (1.0 - 1e-12));
        }
    }

    #[test]
    fn delay_only_leaves_angles() {
        let s = sys();
        let os = OversamplingConfig::uniform(1);
        let a = on_grid_path(&s, &os, PeakPosition::new(1, 1, 6));
        let al = alignment_mode(AlignmentMode::DelayOnly, os).unwrap();
        let (at, peak) = al.align(&a, &s).unwrap();
        assert_eq!(peak, PeakPosition::new(0, 0, 6));
        let ad = angular_delay_transform(&at, &s.array, Direction::Forward).unwrap();
        // spatial bin (1,1) -> row 3, delay bin 0
        assert!(ad.entries()[(3, 0)].norm_sqr() >= 0.999 * ad.norm_sqr());

        let al = alignment_mode(AlignmentMode::AngularOnly, os).unwrap();
        let (at, peak) = al.align(&a, &s).unwrap();
        assert_eq!(peak, PeakPosition::new(1, 1, 0));
        let ad = angular_delay_transform(&at, &s.array, Direction::Forward).unwrap();
        assert!(ad.entries()[(0, 6)].norm_sqr() >= 0.999 * ad.norm_sqr());
    }

    // Shifting the path parameters by the peak and folding the measured-band phase
    // difference into the gain must reproduce the masked responses in both bands.
    #[test]
    fn cotransform_matches_shifted_physics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in [sys(), SystemConfig::full_scale()] {
            let m = &s.bands.measured;
            let e = &s.bands.target;
            for o in 1..=3 {
                let os = OversamplingConfig::uniform(o);
                let (g1, g2, g3) = os.grid(&s.array, m);
                for _ in 0..10 {
                    let path = PhasePath {
                        gain: C64::from_polar(rng.gen_range(0.1..2.0), rng.gen_range(-3.0..3.0)),
                        h_freq: rng.gen_range(-0.5..0.5),
                        v_freq: rng.gen_range(-0.5..0.5),
                        delay: rng.gen_range(0.0..1.0) / m.delta_f,
                    };
                    let a = phase_path_response(&path, &s.array, m, BandTag::Measured);
                    let b = phase_path_response(&path, &s.array, e, BandTag::Target);
                    let peak = find_peak(&a, &s.array, m, &os).unwrap();
                    let delay = path.delay - peak.n3 as f64 / (g3 as f64 * m.delta_f);
                    let shifted = PhasePath {
                        gain: path.gain * cis_cycles(-m.f_start * (path.delay - delay)),
                        h_freq: path.h_freq - peak.n1 as f64 / g1 as f64,
                        v_freq: path.v_freq - peak.n2 as f64 / g2 as f64,
                        delay,
                    };
                    let a_ref = phase_path_response(&shifted, &s.array, m, BandTag::Measured);
                    let b_ref = phase_path_response(&shifted, &s.array, e, BandTag::Target);
                    let (at, _) = align_path(&a, &s.array, m, &os).unwrap();
                    let bt = co_transform_label(&b, &peak, &s, &os).unwrap();
                    assert!(at.distance_sqr(&a_ref).unwrap().sqrt() <= 1e-9 * a.norm());
                    assert!(bt.distance_sqr(&b_ref).unwrap().sqrt() <= 1e-9 * b.norm());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn masks_are_unit_modulus(n1 in 0usize..8, n2 in 0usize..4, n3 in 0usize..32) {
            let s = sys();
            let os = OversamplingConfig::default();
            let peak = PeakPosition::new(n1, n2, n3);
            let u = build_measured_mask(&peak, &s.array, &s.bands.measured, &os).unwrap();
            let v = build_label_mask(&peak, &s, &os).unwrap();
            for z in u.mask.entries().iter().chain(v.mask.entries().iter()) {
                prop_assert!((z.norm() - 1.0).abs() < 1e-15);
            }
        }

        #[test]
        fn alignment_preserves_norm_and_is_scale_equivariant(seed in 0u64..1000, cre in -3.0..3.0f64, cim in -3.0..3.0f64) {
            prop_assume!(cre.abs() + cim.abs() > 1e-3);
            let s = sys();
            let os = OversamplingConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 8, 16, BandTag::Measured);
            let (at, peak) = align_path(&a, &s.array, &s.bands.measured, &os).unwrap();
            prop_assert!((at.norm() - a.norm()).abs() <= 1e-12 * a.norm());
            prop_assert_eq!(find_peak(&at, &s.array, &s.bands.measured, &os).unwrap(), PeakPosition::ORIGIN);
            let c = C64::new(cre, cim);
            let (ac, pc) = align_path(&a.scaled(c), &s.array, &s.bands.measured, &os).unwrap();
            prop_assert_eq!(pc, peak);
            prop_assert!(ac.distance_sqr(&at.scaled(c)).unwrap().sqrt() <= 1e-12 * ac.norm());
        }
    }
}
