//! Multilayer perceptron with Adam training, the path-oriented and
//! channel-oriented extrapolation pipelines, the parameter-based baseline,
//! and the training-set augmentation schemes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{build_label_mask, build_measured_mask, Aligner, OversamplingConfig, PeakPosition};
use crate::channel::{BandTag, ChannelMatrix, SystemConfig, C64};
use crate::error::{Error, Result};
use crate::extraction::{extract_measured, sage_estimate, ExtractionConfig, JointExtraction, SageConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths from input to output; hidden layers use `activation`, the
/// output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

impl MlpConfig {
    /// Five linear layers with `hidden`-wide hidden layers, sized for the
    /// system's measured input and target output.
    pub fn for_system(sys: &SystemConfig, hidden: usize, init_seed: u64) -> Self {
        let (n, km) = sys.shape(BandTag::Measured);
        let ke = sys.bands.target.n_subcarriers;
        Self {
            layer_dims: vec![2 * n * km, hidden, hidden, hidden, hidden, 2 * n * ke],
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::InvalidConfig("MLP needs >= 2 positive layer widths".into()));
        }
        Ok(())
    }

    /// Checks the input/output widths against the system's flattened shapes.
    pub fn check_system(&self, sys: &SystemConfig) -> Result<()> {
        let (n, km) = sys.shape(BandTag::Measured);
        let ke = sys.bands.target.n_subcarriers;
        let (i, o) = (self.layer_dims[0], *self.layer_dims.last().unwrap());
        if i != 2 * n * km || o != 2 * n * ke {
            return Err(Error::dims(format!("{}->{}", 2 * n * km, 2 * n * ke), format!("{i}->{o}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.1,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation_fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Fully connected network. Layer `l` maps `x ↦ W_l x + b_l` with
/// `W_l` stored as (out × in).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
}

/// Gradients (or any other per-parameter quantity) shaped like a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Network {
    /// Uniform `±1/√fan_in` initialization.
    pub fn new(cfg: &MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in cfg.layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound)));
            biases.push(Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bound..=bound)));
        }
        Ok(Self { weights, biases, activation: cfg.activation })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].ncols()];
        d.extend(self.weights.iter().map(|w| w.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        Gradients { weights: self.weights.clone(), biases: self.biases.clone() }.flatten()
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::dims(self.n_params(), params.len()));
        }
        let mut it = params.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::dims(self.input_dim(), cols));
        }
        Ok(())
    }

    /// Forward pass on one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        Ok(self.forward_batch(&batch)?.into_raw_vec())
    }

    /// Forward pass on a batch of row vectors.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(&w.t());
            z += b;
            if l < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Mean over rows of `‖ŷ − y‖²`, and its exact gradient.
    pub fn loss_and_gradient(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Gradients)> {
        self.check_input(x.ncols())?;
        if x.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if y.dim() != (x.nrows(), self.output_dim()) {
            return Err(Error::dims(format!("{}x{}", x.nrows(), self.output_dim()), format!("{:?}", y.dim())));
        }
        let n = x.nrows() as f64;
        let last = self.weights.len() - 1;
        // pre-activations and activations per layer
        let mut acts = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            let a = if l < last { z.mapv(|v| self.activation.apply(v)) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        let diff = &acts[last + 1] - y;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = diff * (2.0 / n);
        for l in (0..=last).rev() {
            grads.weights[l] = delta.t().dot(&acts[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                back.zip_mut_with(&pre[l - 1], |d, z| *d *= self.activation.derivative(*z));
                delta = back;
            }
        }
        Ok((loss, grads))
    }

    /// Mean over rows of `‖ŷ − y‖²`.
    pub fn loss(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        let out = self.forward_batch(x)?;
        if out.dim() != y.dim() {
            return Err(Error::dims(format!("{:?}", out.dim()), format!("{:?}", y.dim())));
        }
        Ok((&out - y).iter().map(|d| d * d).sum::<f64>() / x.nrows().max(1) as f64)
    }

    /// `Σ‖ŷ − y‖² / Σ‖y‖²` over all rows.
    pub fn nmse(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        let out = self.forward_batch(x)?;
        let num: f64 = (&out - y).iter().map(|d| d * d).sum();
        let den: f64 = y.iter().map(|d| d * d).sum();
        if den == 0.0 {
            return Err(Error::Degenerate("all-zero labels".into()));
        }
        Ok(num / den)
    }
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn update(&mut self, net: &mut Network, g: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            ndarray::Zip::from(&mut net.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&g.weights[l])
                .for_each(|p, m, v, g| upd(p, m, v, *g));
            ndarray::Zip::from(&mut net.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&g.biases[l])
                .for_each(|p, m, v, g| upd(p, m, v, *g));
        }
    }
}

/// Real encoding of a complex matrix: all real parts, then all imaginary
/// parts, each antenna-major.
pub fn flatten_complex(h: &ChannelMatrix) -> Vec<f64> {
    let e = h.entries();
    let mut out = Vec::with_capacity(2 * e.len());
    out.extend(e.iter().map(|z| z.re));
    out.extend(e.iter().map(|z| z.im));
    out
}

pub fn unflatten_complex(v: &[f64], n_t: usize, n_sub: usize, band: BandTag) -> Result<ChannelMatrix> {
    let n = n_t * n_sub;
    if v.len() != 2 * n {
        return Err(Error::dims(2 * n, v.len()));
    }
    Ok(ChannelMatrix::from_fn(n_t, n_sub, band, |(p, k)| {
        let i = p * n_sub + k;
        C64::new(v[i], v[n + i])
    }))
}

fn stack_rows(ms: &[&ChannelMatrix]) -> Result<Array2<f64>> {
    let first = ms.first().ok_or(Error::Empty("matrix list"))?;
    let width = 2 * first.entries().len();
    let mut data = Vec::with_capacity(width * ms.len());
    for m in ms {
        first.check_same_shape(m)?;
        data.extend(flatten_complex(m));
    }
    Ok(Array2::from_shape_vec((ms.len(), width), data).expect("rows of equal width"))
}

/// Input/label pairs for supervised training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub inputs: Vec<ChannelMatrix>,
    pub labels: Vec<ChannelMatrix>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: ChannelMatrix, label: ChannelMatrix) {
        self.inputs.push(input);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: PairSet) {
        self.inputs.extend(other.inputs);
        self.labels.extend(other.labels);
    }

    /// Flattened rows `(X, Y)` for the pairs at `idx`.
    pub fn to_arrays(&self, idx: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let xi: Vec<_> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let yi: Vec<_> = idx.iter().map(|&i| &self.labels[i]).collect();
        Ok((stack_rows(&xi)?, stack_rows(&yi)?))
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest selection metric.
    pub net: Network,
    /// Mean per-row training loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Validation NMSE per epoch; empty without a validation split.
    pub val_trace: Vec<f64>,
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Pair indices held out for validation.
    pub val_indices: Vec<usize>,
}

/// Trains a network with Adam on the flattened pairs. The returned snapshot
/// minimizes validation NMSE, or training loss when there is no validation
/// split.
pub fn train(data: &PairSet, mlp: &MlpConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(Network::new(mlp)?, data, cfg)
}

pub fn train_from(mut net: Network, data: &PairSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.inputs.len() != data.labels.len() {
        return Err(Error::dims(data.inputs.len(), data.labels.len()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    order.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * data.len() as f64).floor() as usize;
    let n_val = n_val.min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (x_all, y_all) = data.to_arrays(train_idx)?;
    net.check_input(x_all.ncols())?;
    if y_all.ncols() != net.output_dim() {
        return Err(Error::dims(net.output_dim(), y_all.ncols()));
    }
    let val = if n_val > 0 { Some(data.to_arrays(val_idx)?) } else { None };

    let mut adam = Adam::new(&net, cfg);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut val_trace = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0);
    let mut rows: Vec<usize> = (0..x_all.nrows()).collect();
    for epoch in 0..cfg.epochs {
        rows.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in rows.chunks(cfg.batch_size) {
            let xb = x_all.select(Axis(0), chunk);
            let yb = y_all.select(Axis(0), chunk);
            let (loss, g) = net.loss_and_gradient(&xb, &yb)?;
            adam.update(&mut net, &g);
            total += loss * chunk.len() as f64;
        }
        let epoch_loss = total / rows.len() as f64;
        if !epoch_loss.is_finite() || !net.is_finite() {
            return Err(Error::Numerical(format!("training diverged at epoch {epoch}")));
        }
        loss_trace.push(epoch_loss);
        let metric = match &val {
            Some((xv, yv)) => {
                let v = net.nmse(xv, yv).unwrap_or(f64::INFINITY);
                val_trace.push(v);
                v
            }
            None => epoch_loss,
        };
        if metric < best.0 {
            best = (metric, net.clone(), epoch);
        }
    }
    Ok(TrainOutcome {
        net: best.1,
        loss_trace,
        val_trace,
        best_epoch: best.2,
        n_train: train_idx.len(),
        n_val,
        val_indices: val_idx.to_vec(),
    })
}

/// Anything that maps measured-band responses to target-band responses.
pub trait PathExtrapolator {
    fn extrapolate(&self, inputs: &[ChannelMatrix]) -> Result<Vec<ChannelMatrix>>;
}

/// A network bound to the system shapes it was trained for.
#[derive(Clone, Debug)]
pub struct MatrixNet {
    pub net: Network,
    pub n_t: usize,
    pub k_out: usize,
}

impl MatrixNet {
    pub fn new(net: Network, sys: &SystemConfig) -> Result<Self> {
        let (n_t, km) = sys.shape(BandTag::Measured);
        let k_out = sys.bands.target.n_subcarriers;
        if net.input_dim() != 2 * n_t * km || net.output_dim() != 2 * n_t * k_out {
            return Err(Error::dims(
                format!("{}->{}", 2 * n_t * km, 2 * n_t * k_out),
                format!("{}->{}", net.input_dim(), net.output_dim()),
            ));
        }
        Ok(Self { net, n_t, k_out })
    }
}

impl PathExtrapolator for MatrixNet {
    fn extrapolate(&self, inputs: &[ChannelMatrix]) -> Result<Vec<ChannelMatrix>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<_> = inputs.iter().collect();
        let out = self.net.forward_batch(&stack_rows(&rows)?)?;
        out.rows()
            .into_iter()
            .map(|r| unflatten_complex(r.as_slice().expect("contiguous row"), self.n_t, self.k_out, BandTag::Target))
            .collect()
    }
}

/// Rescales `h` to `‖h‖² = N_T K`, the per-band normalization of the
/// datasets. A zero matrix is returned unchanged.
pub fn renormalize(h: &ChannelMatrix) -> ChannelMatrix {
    let n = h.norm();
    if n == 0.0 || !n.is_finite() {
        return h.clone();
    }
    let target = (h.entries().len() as f64).sqrt();
    h.scaled(C64::new(target / n, 0.0))
}

/// Target-band channel synthesized from SAGE estimates on the measured band.
pub fn model_based_extrapolate(h_m: &ChannelMatrix, sys: &SystemConfig, sage: &SageConfig) -> Result<ChannelMatrix> {
    let subs = sage_estimate(h_m, &sys.array, &sys.bands.measured, sage)?;
    let (n_t, k_e) = sys.shape(BandTag::Target);
    let mut out = ChannelMatrix::zeros(n_t, k_e, BandTag::Target);
    for s in &subs {
        out.add_assign(&crate::channel::phase_path_response(
            &s.phase_path(),
            &sys.array,
            &sys.bands.target,
            BandTag::Target,
        ))?;
    }
    Ok(out)
}

/// Path-oriented extrapolation: extract, align, infer per path, co-compensate.
/// With [`crate::alignment::AlignmentMode::None`] this is plain path-oriented
/// extrapolation.
pub fn po_pa_extrapolate(
    h_m: &ChannelMatrix,
    model: &dyn PathExtrapolator,
    sys: &SystemConfig,
    extraction: &ExtractionConfig,
    aligner: &Aligner,
) -> Result<ChannelMatrix> {
    let paths = extract_measured(h_m, sys, extraction)?;
    let mut aligned = Vec::with_capacity(paths.len());
    let mut peaks = Vec::with_capacity(paths.len());
    for p in &paths {
        let (a, peak) = aligner.align(&p.response, sys)?;
        aligned.push(a);
        peaks.push(peak);
    }
    let outputs = model.extrapolate(&aligned)?;
    aligner.co_compensate(&outputs, &peaks, sys)
}

/// Channel-oriented extrapolation: the whole measured channel in, the whole
/// target channel out.
pub fn co_extrapolate(h_m: &ChannelMatrix, model: &dyn PathExtrapolator) -> Result<ChannelMatrix> {
    model
        .extrapolate(std::slice::from_ref(h_m))?
        .pop()
        .ok_or_else(|| Error::Numerical("extrapolator returned no output".into()))
}

/// Per-path training pairs from joint extractions, aligned per `aligner`.
pub fn path_pairs<'a>(
    extractions: impl IntoIterator<Item = &'a JointExtraction>,
    sys: &SystemConfig,
    aligner: &Aligner,
) -> Result<PairSet> {
    let mut out = PairSet::default();
    for ex in extractions {
        for (a, b) in ex.training_pairs() {
            let (at, peak) = aligner.align(a, sys)?;
            let bt = aligner.co_transform(b, &peak, sys)?;
            out.push(at, bt);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Random angular-delay circular shift with matched input/label masks.
    Ads,
    /// Reverse the antenna dimension of input and label.
    Flip,
    /// Common random phase rotation of input and label.
    Rps,
}

impl Augmentation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "ads" => Ok(Self::Ads),
            "flip" => Ok(Self::Flip),
            "rps" => Ok(Self::Rps),
            _ => Err(Error::InvalidConfig(format!("unknown augmentation {s:?}"))),
        }
    }
}

/// Appends one augmented copy of every pair.
pub fn augment<R: Rng>(
    data: &PairSet,
    scheme: Augmentation,
    sys: &SystemConfig,
    os: &OversamplingConfig,
    rng: &mut R,
) -> Result<PairSet> {
    let mut out = data.clone();
    if scheme == Augmentation::None {
        return Ok(out);
    }
    let (g1, g2, g3) = os.grid(&sys.array, &sys.bands.measured);
    for (x, y) in data.inputs.iter().zip(&data.labels) {
        let (xa, ya) = match scheme {
            Augmentation::Ads => {
                let peak = PeakPosition::new(rng.gen_range(0..g1), rng.gen_range(0..g2), rng.gen_range(0..g3));
                let u = build_measured_mask(&peak, &sys.array, &sys.bands.measured, os)?;
                let v = build_label_mask(&peak, sys, os)?;
                (u.apply(x)?, v.apply(y)?)
            }
            Augmentation::Flip => (x.flip_antennas(), y.flip_antennas()),
            Augmentation::Rps => {
                let c = C64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
                (x.scaled(c), y.scaled(c))
            }
            Augmentation::None => unreachable!(),
        };
        out.push(xa, ya);
    }
    Ok(out)
}

/// Side information stored next to the parameters in `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format_version: u32,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub loss_trace: Vec<f64>,
    pub val_trace: Vec<f64>,
    pub best_epoch: usize,
    pub n_params: usize,
    /// Free-form fields owned by the caller (mode, digest, dataset info).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Writes `model.bin` (little-endian f64 parameters, layer by layer, weights
/// row-major then biases) and `model.json`.
pub fn save_model(dir: &Path, net: &Network, meta: &ModelMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = net.flatten().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(dir.join("model.bin"), bytes)?;
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(Network, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    if meta.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::CorruptData(format!("unsupported model format {}", meta.format_version)));
    }
    let mut net = Network::new(&meta.mlp)?;
    let bytes = fs::read(dir.join("model.bin"))?;
    if bytes.len() != 8 * net.n_params() {
        return Err(Error::CorruptData(format!(
            "model.bin holds {} bytes, expected {}",
            bytes.len(),
            8 * net.n_params()
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    net.set_flat(&params)?;
    if !net.is_finite() {
        return Err(Error::CorruptData("non-finite parameters in model.bin".into()));
    }
    Ok((net, meta))
}
