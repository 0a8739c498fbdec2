//! Force estimation from a masked depth frame and actuator load.

mod loss;
mod network;

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::rng::{stream_rng, STREAM_INIT, STREAM_SHUFFLE};
use crate::sensing::{ActuatorLoad, MaskedFrame};

pub use loss::{default_lambda, weighted_mse, weighted_mse_grad, LossWeights};
use network::Network;
pub use network::{EncoderConfig, Input, Layout, LayoutEntry};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("loss weights must be finite and positive, got {0:?}")]
    InvalidLambda([f64; 3]),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("frame is {got_w}x{got_h}, network expects {want_w}x{want_h}")]
    Shape { want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("parameter vector has {got} values, layout needs {want}")]
    ParamCount { want: usize, got: usize },
    #[error("non-finite parameter or input")]
    NonFinite,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Force vector in newtons, end-effector frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceVector(pub [f64; 3]);

impl ForceVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Fused,
    DepthOnly,
    LoadOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fused, Variant::DepthOnly, Variant::LoadOnly];

    pub fn uses_depth(self) -> bool {
        self != Variant::LoadOnly
    }

    pub fn uses_load(self) -> bool {
        self != Variant::DepthOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fused => "fused",
            Variant::DepthOnly => "depth-only",
            Variant::LoadOnly => "load-only",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant '{s}' (expected fused, depth-only or load-only)"))
    }
}

/// Input scaling: depth in millimetres times `depth_scale`, each load
/// channel times `q_scale[k]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub depth_scale: f64,
    pub q_scale: [f64; 4],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { depth_scale: 1.0 / 500.0, q_scale: [1.0; 4] }
    }
}

impl Normalization {
    /// Loads scaled by their per-channel maximum magnitude in `samples`.
    pub fn fit(samples: &[Sample]) -> Self {
        let mut q_max = [0.0f64; 4];
        for s in samples {
            for (m, q) in q_max.iter_mut().zip(s.q.0) {
                *m = m.max(q.abs());
            }
        }
        Self { q_scale: q_max.map(|m| if m > 0.0 { 1.0 / m } else { 1.0 }), ..Self::default() }
    }

    pub fn input(&self, frame: &MaskedFrame, q: &ActuatorLoad) -> Input {
        let depth = frame
            .frame()
            .depth
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != 0)
            .map(|(i, d)| (i as u32, *d as f64 * self.depth_scale))
            .collect();
        Input { depth, q: std::array::from_fn(|k| q.0[k] * self.q_scale[k]) }
    }
}

const CONV_BIAS_INIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorParams {
    pub variant: Variant,
    pub config: EncoderConfig,
    pub normalization: Normalization,
    pub values: Vec<f64>,
}

impl EstimatorParams {
    pub fn zeros(config: EncoderConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let n = Layout::new(&config).total();
        Ok(Self { variant, config, normalization: Normalization::default(), values: vec![0.0; n] })
    }

    /// He-normal weights from `seed`; biases zero except in the convolutions.
    pub fn init(config: EncoderConfig, variant: Variant, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config, variant)?;
        let layout = p.layout();
        let mut rng = stream_rng(seed, STREAM_INIT);
        for e in &layout.entries {
            // A small positive bias keeps rectifiers alive on sparse frames.
            if e.name.starts_with("conv") && e.name.ends_with(".bias") {
                p.values[e.offset..e.offset + e.len()].fill(CONV_BIAS_INIT);
            }
            if !e.name.ends_with(".weight") {
                continue;
            }
            let fan_in: usize = e.shape[1..].iter().product();
            let gain = if e.name.starts_with("fusion2") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
            for v in &mut p.values[e.offset..e.offset + e.len()] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let want = self.layout().total();
        if self.values.len() != want {
            return Err(EstimatorError::ParamCount { want, got: self.values.len() });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFinite);
        }
        Ok(())
    }

    fn network(&self) -> Result<Network> {
        self.check()?;
        Network::new(self.config.clone())
    }

    fn check_frame(&self, frame: &MaskedFrame) -> Result<()> {
        let f = frame.frame();
        if f.width != self.config.image_width || f.height != self.config.image_height {
            return Err(EstimatorError::Shape {
                want_w: self.config.image_width,
                want_h: self.config.image_height,
                got_w: f.width,
                got_h: f.height,
            });
        }
        Ok(())
    }
}

/// `ŵ = f(I_D′, q)`.
pub fn predict(params: &EstimatorParams, frame: &MaskedFrame, q: &ActuatorLoad) -> Result<ForceVector> {
    params.check_frame(frame)?;
    if q.0.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::NonFinite);
    }
    let net = params.network()?;
    let input = params.normalization.input(frame, q);
    Ok(ForceVector(net.forward(&params.values, params.variant, &input).output))
}

/// Reusable predictor that skips per-call validation.
pub struct Estimator {
    params: EstimatorParams,
    net: Network,
}

impl Estimator {
    pub fn new(params: EstimatorParams) -> Result<Self> {
        let net = params.network()?;
        Ok(Self { params, net })
    }

    pub fn params(&self) -> &EstimatorParams {
        &self.params
    }

    pub fn predict(&self, frame: &MaskedFrame, q: &ActuatorLoad) -> Result<ForceVector> {
        self.params.check_frame(frame)?;
        let input = self.params.normalization.input(frame, q);
        let out = self.net.forward(&self.params.values, self.params.variant, &input).output;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFinite);
        }
        Ok(ForceVector(out))
    }
}

// Samples per deterministic reduction chunk.
const CHUNK: usize = 8;

fn batch_gradient(
    net: &Network,
    p: &[f64],
    variant: Variant,
    batch: &[(&Input, ForceVector)],
    lambda: &LossWeights,
) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; p.len()];
            let mut loss = 0.0;
            for (input, w) in chunk {
                let cache = net.forward(p, variant, input);
                let w_hat = ForceVector(cache.output);
                loss += weighted_mse(w, &w_hat, lambda);
                let g = weighted_mse_grad(w, &w_hat, lambda);
                net.backward(p, variant, input, &cache, &g, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean weighted loss over `batch` and its gradient with respect to
/// `params.values`.
pub fn loss_gradient(params: &EstimatorParams, batch: &[Sample], lambda: &LossWeights) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(EstimatorError::TooFewSamples { need: 1, got: 0 });
    }
    let net = params.network()?;
    for s in batch {
        params.check_frame(&s.frame)?;
    }
    let inputs: Vec<Input> = batch.iter().map(|s| params.normalization.input(&s.frame, &s.q)).collect();
    let pairs: Vec<(&Input, ForceVector)> = inputs.iter().zip(batch).map(|(i, s)| (i, s.w)).collect();
    Ok(batch_gradient(&net, &params.values, params.variant, &pairs, lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Multiplies the learning rate once per epoch.
    pub lr_decay: f64,
    /// Rescale minibatch gradients whose norm exceeds this.
    pub clip_norm: Option<f64>,
    /// `None` derives the weights from the training labels.
    pub lambda: Option<LossWeights>,
    /// `None` fits the scaling to the training set.
    pub normalization: Option<Normalization>,
    pub encoder: EncoderConfig,
    /// Fraction of episodes held out for validation and evaluation.
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 32,
            epochs: 60,
            seed: 0,
            optimizer: Optimizer::adam(),
            lr_decay: 0.95,
            clip_norm: Some(10.0),
            lambda: None,
            normalization: None,
            encoder: EncoderConfig::default(),
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EstimatorError::InvalidTrainConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return bad("momentum must lie in [0, 1)");
            }
            Optimizer::Adam { beta1, beta2, epsilon }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) =>
            {
                return bad("adam needs beta1, beta2 in [0, 1) and positive epsilon");
            }
            _ => {}
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        self.encoder.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd { momentum: default_momentum() }
    }

    pub fn adam() -> Self {
        Optimizer::Adam { beta1: default_beta1(), beta2: default_beta2(), epsilon: default_epsilon() }
    }
}

/// Optimizer state over the flat parameter vector.
struct Stepper {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Stepper {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self { kind, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd { momentum } => {
                for ((p, m), g) in p.iter_mut().zip(&mut self.m).zip(g) {
                    *m = momentum * *m - lr * g;
                    *p += *m;
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, m), v), g) in p.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(g) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory(pub Vec<EpochLoss>);

impl LossHistory {
    /// Running minimum of the validation loss.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.0
            .iter()
            .scan(f64::INFINITY, |best, e| {
                *best = best.min(e.val_loss);
                Some(*best)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.0 {
            wr.serialize(e)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<std::result::Result<Vec<EpochLoss>, _>>()?;
        Ok(Self(rows))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the lowest validation loss.
    pub params: EstimatorParams,
    pub best_epoch: usize,
    pub history: LossHistory,
}

fn mean_loss(net: &Network, p: &[f64], variant: Variant, data: &[(&Input, ForceVector)], lambda: &LossWeights) -> f64 {
    let sums: Vec<f64> = data
        .par_chunks(64)
        .map(|chunk| {
            chunk.iter().map(|(i, w)| weighted_mse(w, &ForceVector(net.forward(p, variant, i).output), lambda)).sum()
        })
        .collect();
    sums.iter().sum::<f64>() / data.len() as f64
}

/// Minibatch first-order training on the weighted loss. Deterministic for a given
/// `config.seed`.
pub fn train(train_set: &[Sample], val_set: &[Sample], config: &TrainConfig, variant: Variant) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(EstimatorError::TooFewSamples { need: 1, got: 0 });
    }
    let lambda = match config.lambda {
        Some(l) => l,
        None if train_set.len() >= 10 => default_lambda(&train_set.iter().map(|s| s.w).collect::<Vec<_>>())?,
        None => LossWeights::ones(),
    };
    let mut params = EstimatorParams::init(config.encoder.clone(), variant, config.seed)?;
    params.normalization = config.normalization.unwrap_or_else(|| Normalization::fit(train_set));
    for s in train_set.iter().chain(val_set) {
        params.check_frame(&s.frame)?;
    }
    // Start the output bias at the mean label.
    let bias = params.layout().get("fusion2.bias").unwrap().offset;
    for k in 0..3 {
        params.values[bias + k] = train_set.iter().map(|s| s.w.0[k]).sum::<f64>() / train_set.len() as f64;
    }
    let net = params.network()?;

    let prep =
        |set: &[Sample]| -> Vec<Input> { set.par_iter().map(|s| params.normalization.input(&s.frame, &s.q)).collect() };
    let train_inputs = prep(train_set);
    let val_inputs = prep(val_set);
    let train_pairs: Vec<(&Input, ForceVector)> = train_inputs.iter().zip(train_set).map(|(i, s)| (i, s.w)).collect();
    let val_pairs: Vec<(&Input, ForceVector)> = val_inputs.iter().zip(val_set).map(|(i, s)| (i, s.w)).collect();

    let mut rng = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut stepper = Stepper::new(config.optimizer, params.values.len());
    let mut best = (f64::INFINITY, params.values.clone(), 0);
    let mut history = LossHistory::default();
    let mut lr = config.learning_rate;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<(&Input, ForceVector)> = idx.iter().map(|&i| train_pairs[i]).collect();
            let (loss, mut grad) = batch_gradient(&net, &params.values, variant, &batch, &lambda);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(EstimatorError::Diverged { epoch });
            }
            if let Some(c) = config.clip_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    grad.iter_mut().for_each(|g| *g *= c / norm);
                }
            }
            stepper.step(&mut params.values, &grad, lr);
            epoch_loss += loss * idx.len() as f64;
        }
        let train_loss = epoch_loss / train_pairs.len() as f64;
        let val_loss = if val_pairs.is_empty() {
            train_loss
        } else {
            mean_loss(&net, &params.values, variant, &val_pairs, &lambda)
        };
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(EstimatorError::Diverged { epoch });
        }
        log::debug!("{variant} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.0.push(EpochLoss { epoch, train_loss, val_loss });
        if val_loss < best.0 {
            best = (val_loss, params.values.clone(), epoch);
        }
        lr *= config.lr_decay;
    }
    params.values = best.1;
    Ok(TrainOutcome { params, best_epoch: best.2, history })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub per_axis: [f64; 3],
    pub total: f64,
}

pub fn rmse_of(pairs: impl IntoIterator<Item = (ForceVector, ForceVector)>) -> Result<Rmse> {
    let mut sq = [0.0; 3];
    let mut n = 0usize;
    for (w, w_hat) in pairs {
        for (s, (a, b)) in sq.iter_mut().zip(w.0.into_iter().zip(w_hat.0)) {
            *s += (a - b).powi(2);
        }
        n += 1;
    }
    if n == 0 {
        return Err(EstimatorError::TooFewSamples { need: 1, got: 0 });
    }
    let n = n as f64;
    Ok(Rmse { per_axis: sq.map(|s| (s / n).sqrt()), total: (sq.iter().sum::<f64>() / (3.0 * n)).sqrt() })
}

pub fn evaluate_rmse(params: &EstimatorParams, samples: &[Sample]) -> Result<Rmse> {
    let est = Estimator::new(params.clone())?;
    let preds = samples.par_iter().map(|s| est.predict(&s.frame, &s.q)).collect::<Result<Vec<_>>>()?;
    rmse_of(samples.iter().map(|s| s.w).zip(preds))
}

const CHECKPOINT_FORMAT: &str = "moe-sim-estimator";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    variant: Variant,
    config: EncoderConfig,
    normalization: Normalization,
    layout: Layout,
    param_count: usize,
}

/// Checkpoint: u32 LE header length, JSON header, then the parameters as
/// little-endian f64.
pub fn write_checkpoint<W: Write>(params: &EstimatorParams, mut w: W) -> Result<()> {
    params.check()?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        variant: params.variant,
        config: params.config.clone(),
        normalization: params.normalization,
        layout: params.layout(),
        param_count: params.values.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| EstimatorError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(4 + json.len() + 8 * params.values.len());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EstimatorParams> {
    let bad = |m: String| EstimatorError::Checkpoint(m);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(bad("truncated header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let json = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    header.config.validate()?;
    if header.layout != Layout::new(&header.config) {
        return Err(bad("shape table does not match the encoder config".into()));
    }
    let body = &bytes[4 + hlen..];
    if body.len() != 8 * header.param_count || header.param_count != header.layout.total() {
        return Err(bad(format!("expected {} parameters, found {} bytes", header.layout.total(), body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let params =
        EstimatorParams { variant: header.variant, config: header.config, normalization: header.normalization, values };
    params.check()?;
    Ok(params)
}
