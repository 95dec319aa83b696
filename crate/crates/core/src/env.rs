//! Synthetic multipath environments and the on-disk dataset container.
//!
//! The three shipped presets (`env-sparse`, `env-med`, `env-rich`) differ in
//! path count, delay spread and angular sector, so both the multipath
//! structure and the single-path marginals shift between them. Their
//! intervals are hand-picked stand-ins for ray-traced scenes and are flagged
//! as such in every `meta.json`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    add_awgn, normalize_channel, synthesize_channel, ArrayConfig, BandPair, BandTag, ChannelMatrix,
    PathParams, C64,
};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const NOISE_SALT: u64 = 0x5851_f42d_4c95_7f2d;

/// Closed interval `[lo, hi]`; a point when `lo == hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn point(x: f64) -> Self {
        Interval(x, x)
    }

    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.0 + self.1)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 <= self.1) {
            return Err(Error::InvalidConfig(format!("{what}: bad interval {self:?}")));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        if self.0 == self.1 {
            self.0
        } else {
            self.0 + u * (self.1 - self.0)
        }
    }
}

/// Statistical description of one propagation environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub name: String,
    /// Inclusive range of the number of primary paths.
    pub n_paths_range: (usize, usize),
    /// Seconds.
    pub delay_range: Interval,
    pub azimuth_range: Interval,
    pub elevation_range: Interval,
    /// Expected path amplitude falls off as `e^{-delay / gain_decay}` (seconds).
    pub gain_decay: f64,
    #[serde(default = "full_circle")]
    pub gain_phase_range: Interval,
    /// Probability that a path gets a ground-reflection twin.
    pub ground_twin_prob: f64,
    /// Extra delay of the twin, seconds.
    pub twin_delay_offset_range: Interval,
    /// Twin amplitude relative to its parent.
    #[serde(default = "twin_ratio")]
    pub twin_gain_ratio_range: Interval,
    /// Maximum angular perturbation of a twin (radians, each of azimuth and elevation).
    #[serde(default = "twin_jitter")]
    pub twin_angle_jitter: f64,
    pub seed: u64,
}

fn full_circle() -> Interval {
    Interval(-PI, PI)
}

fn twin_ratio() -> Interval {
    Interval(0.4, 0.9)
}

fn twin_jitter() -> f64 {
    2f64.to_radians()
}

impl EnvironmentSpec {
    pub const PRESETS: [&'static str; 3] = ["env-sparse", "env-med", "env-rich"];

    /// Shipped presets: `env-sparse`, `env-med`, `env-rich`.
    pub fn preset(name: &str) -> Result<Self> {
        let deg = f64::to_radians;
        let ns = 1e-9;
        let twin_offset = Interval(10.0 * ns, 13.3 * ns);
        let spec = match name {
            "env-sparse" => EnvironmentSpec {
                name: name.into(),
                n_paths_range: (1, 4),
                delay_range: Interval(15.0 * ns, 95.0 * ns),
                azimuth_range: Interval(deg(-70.0), deg(10.0)),
                elevation_range: Interval(deg(75.0), deg(105.0)),
                gain_decay: 30.0 * ns,
                gain_phase_range: full_circle(),
                ground_twin_prob: 0.3,
                twin_delay_offset_range: twin_offset,
                twin_gain_ratio_range: twin_ratio(),
                twin_angle_jitter: twin_jitter(),
                seed: 1,
            },
            "env-med" => EnvironmentSpec {
                name: name.into(),
                n_paths_range: (2, 8),
                delay_range: Interval(30.0 * ns, 140.0 * ns),
                azimuth_range: Interval(deg(-40.0), deg(40.0)),
                elevation_range: Interval(deg(70.0), deg(110.0)),
                gain_decay: 45.0 * ns,
                gain_phase_range: full_circle(),
                ground_twin_prob: 0.4,
                twin_delay_offset_range: twin_offset,
                twin_gain_ratio_range: twin_ratio(),
                twin_angle_jitter: twin_jitter(),
                seed: 2,
            },
            "env-rich" => EnvironmentSpec {
                name: name.into(),
                n_paths_range: (4, 15),
                delay_range: Interval(50.0 * ns, 190.0 * ns),
                azimuth_range: Interval(deg(-10.0), deg(70.0)),
                elevation_range: Interval(deg(65.0), deg(115.0)),
                gain_decay: 60.0 * ns,
                gain_phase_range: full_circle(),
                ground_twin_prob: 0.5,
                twin_delay_offset_range: twin_offset,
                twin_gain_ratio_range: twin_ratio(),
                twin_angle_jitter: twin_jitter(),
                seed: 3,
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown environment preset {other:?} (known: {:?})",
                    Self::PRESETS
                )))
            }
        };
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_paths_range;
        if lo < 1 || hi < lo {
            return Err(Error::InvalidConfig(format!(
                "n_paths_range must satisfy 1 <= min <= max, got {:?}",
                self.n_paths_range
            )));
        }
        self.delay_range.validate("delay_range")?;
        self.azimuth_range.validate("azimuth_range")?;
        self.elevation_range.validate("elevation_range")?;
        self.gain_phase_range.validate("gain_phase_range")?;
        self.twin_delay_offset_range.validate("twin_delay_offset_range")?;
        self.twin_gain_ratio_range.validate("twin_gain_ratio_range")?;
        if self.delay_range.lo() < 0.0 || self.twin_delay_offset_range.lo() < 0.0 {
            return Err(Error::InvalidConfig("delays must be non-negative".into()));
        }
        if self.elevation_range.lo() <= 0.0 || self.elevation_range.hi() >= PI {
            return Err(Error::InvalidConfig("elevation_range must lie inside (0, π)".into()));
        }
        if self.azimuth_range.lo() <= -PI || self.azimuth_range.hi() > PI {
            return Err(Error::InvalidConfig("azimuth_range must lie inside (−π, π]".into()));
        }
        if !(0.0..=1.0).contains(&self.ground_twin_prob) {
            return Err(Error::InvalidConfig("ground_twin_prob must be in [0, 1]".into()));
        }
        if !(self.gain_decay.is_finite() && self.gain_decay > 0.0) {
            return Err(Error::InvalidConfig("gain_decay must be positive".into()));
        }
        if !(self.twin_angle_jitter.is_finite() && self.twin_angle_jitter >= 0.0) {
            return Err(Error::InvalidConfig("twin_angle_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws one multipath realization. All primary paths are drawn before any
/// twin, so two specs differing only in their twin settings share primaries
/// under the same RNG state.
pub fn sample_paths<R: Rng>(spec: &EnvironmentSpec, rng: &mut R) -> Vec<PathParams> {
    let (lo, hi) = spec.n_paths_range;
    let n = rng.gen_range(lo..=hi);
    let mut paths: Vec<PathParams> = (0..n)
        .map(|_| {
            let delay = spec.delay_range.sample(rng);
            let azimuth = spec.azimuth_range.sample(rng);
            let elevation = spec.elevation_range.sample(rng);
            let phase = spec.gain_phase_range.sample(rng);
            PathParams {
                gain: C64::from_polar((-delay / spec.gain_decay).exp(), phase),
                delay,
                azimuth,
                elevation,
            }
        })
        .collect();
    let mut twins = Vec::new();
    for parent in &paths {
        let u: f64 = rng.gen();
        if u >= spec.ground_twin_prob {
            continue;
        }
        let offset = spec.twin_delay_offset_range.sample(rng);
        let ratio = spec.twin_gain_ratio_range.sample(rng);
        let phase = spec.gain_phase_range.sample(rng);
        let jitter = Interval(-spec.twin_angle_jitter, spec.twin_angle_jitter);
        let azimuth = wrap_azimuth(parent.azimuth + jitter.sample(rng));
        let elevation = (parent.elevation + jitter.sample(rng)).clamp(1e-6, PI - 1e-6);
        twins.push(PathParams {
            gain: C64::from_polar(parent.gain.norm() * ratio, phase),
            delay: parent.delay + offset,
            azimuth,
            elevation,
        });
    }
    paths.extend(twins);
    paths
}

fn wrap_azimuth(a: f64) -> f64 {
    let mut x = a;
    while x <= -PI {
        x += 2.0 * PI;
    }
    while x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Smallest number of strongest paths holding at least `threshold` of the
/// total power.
pub fn dominant_path_count(paths: &[PathParams], threshold: f64) -> usize {
    let mut powers: Vec<f64> = paths.iter().map(|p| p.gain.norm_sqr()).collect();
    powers.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = powers.iter().sum();
    let mut acc = 0.0;
    for (i, p) in powers.iter().enumerate() {
        acc += p;
        if acc >= threshold * total {
            return i + 1;
        }
    }
    powers.len()
}

/// One channel realization in both bands.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub h_m: ChannelMatrix,
    pub h_e: ChannelMatrix,
    pub true_paths: Vec<PathParams>,
    /// Factor applied to the noisy measured channel by normalization.
    pub scale_m: f64,
    pub scale_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub env: EnvironmentSpec,
    pub array: ArrayConfig,
    pub bands: BandPair,
    pub size: usize,
    pub snr_db: Option<f64>,
    pub generation_seed: u64,
    #[serde(default)]
    pub config_digest: Option<String>,
    /// True for the shipped presets, whose parameter intervals are invented.
    pub intervals_invented: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

/// Per-sample RNG: one ChaCha stream per sample index, so generation order
/// does not matter.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn noise_seeds(seed: u64, index: usize) -> (u64, u64) {
    let mut rng = sample_rng(seed ^ NOISE_SALT, index);
    (rng.gen(), rng.gen())
}

pub fn generate_sample(
    spec: &EnvironmentSpec,
    index: usize,
    array: &ArrayConfig,
    bands: &BandPair,
    snr_db: Option<f64>,
) -> Result<Sample> {
    let mut rng = sample_rng(spec.seed, index);
    let true_paths = sample_paths(spec, &mut rng);
    let raw_m = synthesize_channel(&true_paths, array, &bands.measured, BandTag::Measured)?;
    let raw_e = synthesize_channel(&true_paths, array, &bands.target, BandTag::Target)?;
    let (seed_m, seed_e) = noise_seeds(spec.seed, index);
    let snr = snr_db.unwrap_or(f64::INFINITY);
    let noisy_m = add_awgn(&raw_m, snr, seed_m)?;
    let noisy_e = add_awgn(&raw_e, snr, seed_e)?;
    let h_m = normalize_channel(&noisy_m)?;
    let h_e = normalize_channel(&noisy_e)?;
    Ok(Sample {
        scale_m: h_m.norm() / noisy_m.norm(),
        scale_e: h_e.norm() / noisy_e.norm(),
        h_m,
        h_e,
        true_paths,
    })
}

/// Generates `size` samples of `spec`. Deterministic in all arguments and
/// independent of thread count.
pub fn generate_dataset(
    spec: &EnvironmentSpec,
    size: usize,
    array: &ArrayConfig,
    bands: &BandPair,
    snr_db: Option<f64>,
) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Empty("dataset size"));
    }
    spec.validate()?;
    array.validate()?;
    bands.validate()?;
    let samples = (0..size)
        .into_par_iter()
        .map(|i| generate_sample(spec, i, array, bands, snr_db))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            format_version: FORMAT_VERSION,
            env: spec.clone(),
            array: *array,
            bands: *bands,
            size,
            snr_db,
            generation_seed: spec.seed,
            config_digest: None,
            intervals_invented: EnvironmentSpec::PRESETS.contains(&spec.name.as_str()),
        },
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct PathRecord {
    index: usize,
    scale_m: f64,
    scale_e: f64,
    paths: Vec<PathParams>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn env_name(&self) -> &str {
        &self.meta.env.name
    }

    /// Histogram of dominant-path counts at the given power fraction.
    pub fn dominant_histogram(&self, threshold: f64) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for s in &self.samples {
            *hist.entry(dominant_path_count(&s.true_paths, threshold)).or_insert(0) += 1;
        }
        hist
    }

    /// Writes `meta.json`, `channels_m.bin`, `channels_e.bin` and `paths.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut meta = self.meta.clone();
        meta.size = self.samples.len();
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        write_channels(&dir.join("channels_m.bin"), self.samples.iter().map(|s| &s.h_m))?;
        write_channels(&dir.join("channels_e.bin"), self.samples.iter().map(|s| &s.h_e))?;
        let mut w = BufWriter::new(File::create(dir.join("paths.jsonl"))?);
        for (index, s) in self.samples.iter().enumerate() {
            let rec = PathRecord {
                index,
                scale_m: s.scale_m,
                scale_e: s.scale_e,
                paths: s.true_paths.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::CorruptData(format!("{} is missing", meta_path.display())));
        }
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::CorruptData(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        let n_t = meta.array.n_t();
        let h_m = read_channels(
            &dir.join("channels_m.bin"),
            meta.size,
            n_t,
            meta.bands.measured.n_subcarriers,
            BandTag::Measured,
        )?;
        let h_e = read_channels(
            &dir.join("channels_e.bin"),
            meta.size,
            n_t,
            meta.bands.target.n_subcarriers,
            BandTag::Target,
        )?;
        let reader = BufReader::new(File::open(dir.join("paths.jsonl"))?);
        let mut records = Vec::with_capacity(meta.size);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PathRecord = serde_json::from_str(&line)
                .map_err(|e| Error::CorruptData(format!("paths.jsonl: {e}")))?;
            if rec.index != records.len() {
                return Err(Error::CorruptData(format!(
                    "paths.jsonl out of order at record {}",
                    records.len()
                )));
            }
            records.push(rec);
        }
        if records.len() != meta.size {
            return Err(Error::CorruptData(format!(
                "paths.jsonl holds {} records, meta.json declares {}",
                records.len(),
                meta.size
            )));
        }
        let samples = h_m
            .into_iter()
            .zip(h_e)
            .zip(records)
            .map(|((h_m, h_e), rec)| Sample {
                h_m,
                h_e,
                true_paths: rec.paths,
                scale_m: rec.scale_m,
                scale_e: rec.scale_e,
            })
            .collect();
        Ok(Dataset { meta, samples })
    }
}

fn write_channels<'a>(
    path: &Path,
    mats: impl Iterator<Item = &'a ChannelMatrix>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in mats {
        for z in m.entries().iter() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_channels(
    path: &Path,
    count: usize,
    n_t: usize,
    n_sub: usize,
    band: BandTag,
) -> Result<Vec<ChannelMatrix>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let per = n_t * n_sub * 16;
    if bytes.len() != per * count {
        return Err(Error::CorruptData(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            per * count
        )));
    }
    let f = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    Ok((0..count)
        .map(|s| {
            ChannelMatrix::from_fn(n_t, n_sub, band, |(p, k)| {
                let off = s * per + (p * n_sub + k) * 16;
                C64::new(f(off), f(off + 8))
            })
        })
        .collect())
}
