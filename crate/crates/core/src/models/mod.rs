//! FCN, GRU and causal Transformer force estimators.
//!
//! Every model maps one 100 x 3 window of wavelength shifts to a force in
//! grams. The FCN sees a single window; the GRU carries state from window to
//! window; the Transformer treats each window as one token and attends over
//! all earlier tokens.

mod forward;
mod train;

pub use forward::{loss_and_gradient, predict_instant, predict_sequence, predict_windows, StreamState};
pub use train::{
    evaluate_mae, prepare_episode, split_episodes, train, train_with, EpochRecord, History, Sequence, Split,
    TrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::serial::{self, SerialError};
use crate::nn::{GruParams, Linear, NnError, Tensor, DEFAULT_LEAKY_SLOPE};
use crate::preprocess::PreprocessError;
use crate::types::{SENSORS, WINDOW_LEN};

/// Flattened window length fed to every encoder.
pub const INPUT_DIM: usize = WINDOW_LEN * SENSORS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fcn,
    Rnn,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Fcn, ModelKind::Rnn, ModelKind::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fcn => "fcn",
            ModelKind::Rnn => "rnn",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn is_sequential(self) -> bool {
        self != ModelKind::Fcn
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fcn" => Ok(ModelKind::Fcn),
            "rnn" | "gru" => Ok(ModelKind::Rnn),
            "transformer" => Ok(ModelKind::Transformer),
            _ => Err(ModelError::InvalidSpec(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("operation needs a {expected} model, got {got}")]
    KindMismatch { expected: &'static str, got: ModelKind },
    #[error("expected {expected} input values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Serial(#[from] SerialError),
}

/// Head count used when none is given: 12 where it divides the width,
/// otherwise the largest of 8, 4, 2, 1 that does.
pub fn default_heads(hidden: usize) -> usize {
    [12, 8, 4, 2, 1].into_iter().find(|h| hidden.is_multiple_of(*h)).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    /// Attention heads; ignored by FCN and RNN.
    pub heads: usize,
    pub input: usize,
    pub output: usize,
    pub leaky_slope: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, layers: usize, hidden: usize) -> Self {
        Self {
            kind,
            layers,
            hidden,
            heads: if kind == ModelKind::Transformer { default_heads(hidden) } else { 1 },
            input: INPUT_DIM,
            output: 1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.layers < 1 {
            return bad("layers must be at least 1".into());
        }
        if self.hidden < 1 {
            return bad("hidden must be at least 1".into());
        }
        if self.input != INPUT_DIM || self.output != 1 {
            return bad(format!("input/output must be {INPUT_DIM}/1"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky slope must be in [0, 1)".into());
        }
        if self.kind == ModelKind::Transformer && (self.heads == 0 || !self.hidden.is_multiple_of(self.heads)) {
            return bad(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        Ok(())
    }

    /// Short label such as `rnn-4-64`; Transformers whose head count is not
    /// the default for their width get a `-h<heads>` suffix.
    pub fn label(&self) -> String {
        let base = format!("{}-{}-{}", self.kind, self.layers, self.hidden);
        if self.kind == ModelKind::Transformer && self.heads != default_heads(self.hidden) {
            format!("{base}-h{}", self.heads)
        } else {
            base
        }
    }

    pub fn param_count(&self) -> usize {
        let (i, h, l) = (self.input, self.hidden, self.layers);
        let enc = i * h + h;
        let dec = h + 1;
        let body = match self.kind {
            ModelKind::Fcn => l * (h * h + h),
            ModelKind::Rnn => l * (2 * 3 * h * h + 2 * 3 * h),
            ModelKind::Transformer => l * (4 * h * h + 3 * h + (h * 4 * h + 4 * h) + (4 * h * h + h)),
        };
        enc + body + dec
    }
}

/// Parses `kind-layers-hidden` with an optional `-h<heads>` suffix, e.g.
/// `rnn-4-64` or `transformer-2-32-h2`.
impl std::str::FromStr for ModelSpec {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidSpec(format!("cannot parse {s:?}; expected kind-layers-hidden[-hHEADS]"));
        let parts: Vec<&str> = s.split('-').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let kind: ModelKind = parts[0].parse()?;
        let layers = parts[1].parse().map_err(|_| bad())?;
        let hidden = parts[2].parse().map_err(|_| bad())?;
        let mut spec = ModelSpec::new(kind, layers, hidden);
        if let Some(h) = parts.get(3) {
            spec.heads = h.strip_prefix('h').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        }
        Ok(spec)
    }
}

/// Input and output scaling fitted on the training set and stored with the
/// weights: the network sees `x / x_scale[channel]` and reports
/// `y_scale * output` grams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_scale: [f64; SENSORS],
    pub y_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { x_scale: [1.0; SENSORS], y_scale: 1.0 }
    }
}

/// One self-attention block: projections, output map and feed-forward pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub q: Linear,
    /// Key weight only: softmax ignores a constant added to every logit of a
    /// row, so a key bias would never receive gradient.
    pub k: Tensor,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Fcn(Vec<Linear>),
    Rnn(Vec<GruParams>),
    Transformer(Vec<Block>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub norm: Normalization,
    pub encoder: Linear,
    pub body: Body,
    pub decoder: Linear,
}

fn zero_block(h: usize) -> Block {
    Block {
        q: Linear::zeros(h, h),
        k: Tensor::zeros(&[h, h]),
        v: Linear::zeros(h, h),
        o: Linear::zeros(h, h),
        ff1: Linear::zeros(h, 4 * h),
        ff2: Linear::zeros(4 * h, h),
    }
}

impl ModelParams {
    /// All-zero parameters; also the shape template for gradients.
    pub fn zeros(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let (h, l) = (spec.hidden, spec.layers);
        let body = match spec.kind {
            ModelKind::Fcn => Body::Fcn((0..l).map(|_| Linear::zeros(h, h)).collect()),
            ModelKind::Rnn => Body::Rnn((0..l).map(|_| GruParams::zeros(h, h)).collect()),
            ModelKind::Transformer => Body::Transformer((0..l).map(|_| zero_block(h)).collect()),
        };
        Ok(Self {
            spec,
            norm: Normalization::default(),
            encoder: Linear::zeros(spec.input, h),
            body,
            decoder: Linear::zeros(h, spec.output),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.spec).expect("spec already validated");
        z.norm = self.norm;
        z
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        fn push<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &str, l: &'a Linear) {
            out.push((format!("{p}.w"), &l.w));
            out.push((format!("{p}.b"), &l.b));
        }
        let mut out = Vec::new();
        push(&mut out, "encoder", &self.encoder);
        match &self.body {
            Body::Fcn(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    push(&mut out, &format!("layers.{i}"), l);
                }
            }
            Body::Rnn(gs) => {
                for (i, g) in gs.iter().enumerate() {
                    out.push((format!("gru.{i}.w_ih"), &g.w_ih));
                    out.push((format!("gru.{i}.w_hh"), &g.w_hh));
                    out.push((format!("gru.{i}.b_ih"), &g.b_ih));
                    out.push((format!("gru.{i}.b_hh"), &g.b_hh));
                }
            }
            Body::Transformer(bs) => {
                for (i, b) in bs.iter().enumerate() {
                    push(&mut out, &format!("blocks.{i}.q"), &b.q);
                    out.push((format!("blocks.{i}.k.w"), &b.k));
                    for (n, l) in [("v", &b.v), ("o", &b.o), ("ff1", &b.ff1), ("ff2", &b.ff2)] {
                        push(&mut out, &format!("blocks.{i}.{n}"), l);
                    }
                }
            }
        }
        push(&mut out, "decoder", &self.decoder);
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend([&mut self.encoder.w, &mut self.encoder.b]);
        match &mut self.body {
            Body::Fcn(ls) => {
                for l in ls {
                    out.extend([&mut l.w, &mut l.b]);
                }
            }
            Body::Rnn(gs) => {
                for g in gs {
                    out.extend([&mut g.w_ih, &mut g.w_hh, &mut g.b_ih, &mut g.b_hh]);
                }
            }
            Body::Transformer(bs) => {
                for b in bs {
                    out.extend([&mut b.q.w, &mut b.q.b, &mut b.k]);
                    for l in [&mut b.v, &mut b.o, &mut b.ff1, &mut b.ff2] {
                        out.extend([&mut l.w, &mut l.b]);
                    }
                }
            }
        }
        out.extend([&mut self.decoder.w, &mut self.decoder.b]);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenation of every parameter, in [`ModelParams::named`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    /// Serialized checkpoint: JSON header with spec, normalization and any
    /// caller metadata, followed by the named tensors.
    pub fn to_bytes(&self, extra: &serde_json::Value) -> Vec<u8> {
        let header = serde_json::json!({ "spec": self.spec, "norm": self.norm, "extra": extra });
        let mut buf = Vec::new();
        let named = self.named();
        serial::write_tensors(&mut buf, &header.to_string(), named.iter().map(|(n, t)| (n.as_str(), *t)))
            .expect("writing to memory cannot fail");
        buf
    }

    /// Parses a checkpoint, checking every tensor against the declared spec.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value), ModelError> {
        let (header, tensors) = serial::read_tensors(bytes)?;
        let mut h: serde_json::Value =
            serde_json::from_str(&header).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        let spec: ModelSpec =
            serde_json::from_value(h["spec"].take()).map_err(|e| ModelError::Checkpoint(format!("spec: {e}")))?;
        let norm: Normalization = serde_json::from_value(h["norm"].take())
            .map_err(|e| ModelError::Checkpoint(format!("normalization: {e}")))?;
        let mut model = Self::zeros(spec)?;
        model.norm = norm;
        let expected: Vec<(String, Vec<usize>)> =
            model.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors for a {} model, expected {}",
                tensors.len(),
                spec.label(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        for (dst, (_, src)) in model.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok((model, h["extra"].take()))
    }
}

/// Fresh model with weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<ModelParams, ModelError> {
    let mut model = ModelParams::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Vectors are biases; they share the fan-in of the matrix before them.
    let mut fan_in = spec.input;
    for t in model.tensors_mut() {
        if t.shape().len() == 2 {
            fan_in = t.shape()[1];
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(model)
}
