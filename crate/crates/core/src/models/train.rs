//! Episode preparation, splitting, training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{fcn_backward, fcn_forward, rnn_backward, rnn_step, tfm_backward, tfm_forward};
use super::{predict_windows, ModelError, ModelKind, ModelParams, ModelSpec, Normalization, INPUT_DIM};
use crate::nn::huber_slices;
use crate::nn::{AdamConfig, AdamState, DEFAULT_HUBER_DELTA};
use crate::preprocess::{align, estimate_reference, window, REFERENCE_SPAN};
use crate::types::{Episode, SENSORS};

/// One episode as consecutive windows: `x` is `T x 300`, `y` and `times`
/// have `T` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub times: Vec<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn window(&self, t: usize) -> &[f64] {
        &self.x[t * INPUT_DIM..(t + 1) * INPUT_DIM]
    }
}

/// Reference estimation, alignment and windowing for one raw episode.
pub fn prepare_episode(id: &str, ep: &Episode) -> Result<Sequence, ModelError> {
    let reference = estimate_reference(&ep.interrogator, REFERENCE_SPAN)?;
    let pair = align(&ep.interrogator, &ep.scale, &reference)?;
    let windows = window(&pair);
    Ok(Sequence {
        id: id.to_string(),
        x: windows.iter().flat_map(|w| w.x.iter().copied()).collect(),
        y: windows.iter().map(|w| w.y).collect(),
        times: pair.forces.timestamps().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded episode-level split. With three or more episodes, validation and
/// test each get at least one.
pub fn split_episodes(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (n as f64 * val_frac).round() as usize;
    let mut n_test = (n as f64 * (1.0 - train_frac - val_frac)).round() as usize;
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    n_val = n_val.min(n.saturating_sub(1));
    n_test = n_test.min(n.saturating_sub(1 + n_val));
    let n_train = n - n_val - n_test;
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Split {
        train: sorted(&idx[..n_train]),
        val: sorted(&idx[n_train..n_train + n_val]),
        test: sorted(&idx[n_train + n_val..]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate; `None` picks the per-architecture default.
    pub lr: Option<f64>,
    pub huber_delta: f64,
    /// Windows per gradient step.
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub split_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Truncated BPTT length for the GRU, in windows.
    pub tbptt: usize,
    /// Seed for shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: None,
            huber_delta: DEFAULT_HUBER_DELTA,
            batch: 256,
            max_epochs: 200,
            patience: 20,
            split_seed: 0,
            train_frac: 0.7,
            val_frac: 0.15,
            tbptt: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 1e-3 in general; 1e-5 for GRUs of 8+ layers and Transformers of 4+.
    pub fn lr_for(&self, spec: &ModelSpec) -> f64 {
        self.lr.unwrap_or(match spec.kind {
            ModelKind::Rnn if spec.layers >= 8 => 1e-5,
            ModelKind::Transformer if spec.layers >= 4 => 1e-5,
            _ => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("lr must be positive");
            }
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber delta must be positive");
        }
        if self.batch == 0 || self.tbptt == 0 {
            return bad("batch and tbptt must be positive");
        }
        let fr = |f: f64| f > 0.0 && f < 1.0;
        if !fr(self.train_frac)
            || !(self.val_frac >= 0.0 && self.val_frac < 1.0)
            || self.train_frac + self.val_frac > 1.0
        {
            return bad("split fractions must lie in (0, 1) and sum to at most 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub lr: f64,
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    let r = if n > 0 { (s / n as f64).sqrt() } else { 0.0 };
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// Per-channel input RMS and target RMS over the training windows.
pub(crate) fn fit_normalization(train: &[Sequence]) -> Normalization {
    let mut x_scale = [1.0; SENSORS];
    for (c, s) in x_scale.iter_mut().enumerate() {
        *s = rms(train.iter().flat_map(|q| q.x.iter().skip(c).step_by(SENSORS).copied()));
    }
    Normalization { x_scale, y_scale: rms(train.iter().flat_map(|q| q.y.iter().copied())) }
}

/// Mean absolute error in grams over every window; sequence models run each
/// episode causally from its start.
pub fn evaluate_mae(model: &ModelParams, data: &[Sequence]) -> Result<f64, ModelError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in data.iter().filter(|s| !s.is_empty()) {
        let p = predict_windows(model, &s.x)?;
        sum += p.iter().zip(&s.y).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += s.len();
    }
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    Ok(sum / n as f64)
}

struct Trainer<'a> {
    model: ModelParams,
    adam: AdamState,
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn apply(&mut self, grad: &ModelParams) -> Result<(), ModelError> {
        let grads = grad.tensors();
        self.adam.step(&mut self.model.tensors_mut(), &grads)?;
        Ok(())
    }

    /// Huber loss on targets divided by the fitted force scale, with the
    /// gradient mapped back to gram-valued predictions.
    fn huber(&self, pred: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        let s = self.model.norm.y_scale;
        let p: Vec<f64> = pred.iter().map(|v| v / s).collect();
        let t: Vec<f64> = y.iter().map(|v| v / s).collect();
        let (loss, mut d) = huber_slices(&p, &t, self.cfg.huber_delta);
        for v in &mut d {
            *v /= s;
        }
        (loss, d)
    }

    /// Returns the window-weighted mean training loss of the epoch.
    fn fcn_epoch(&mut self, data: &[Sequence]) -> Result<f64, ModelError> {
        let mut idx: Vec<(usize, usize)> =
            data.iter().enumerate().flat_map(|(i, s)| (0..s.len()).map(move |t| (i, t))).collect();
        idx.shuffle(&mut self.rng);
        let (mut total, mut n) = (0.0, 0);
        let mut x = Vec::with_capacity(self.cfg.batch * INPUT_DIM);
        for chunk in idx.chunks(self.cfg.batch) {
            x.clear();
            for &(i, t) in chunk {
                x.extend_from_slice(data[i].window(t));
            }
            let y: Vec<f64> = chunk.iter().map(|&(i, t)| data[i].y[t]).collect();
            let (pred, cache) = fcn_forward(&self.model, &x);
            let (loss, d) = self.huber(&pred, &y);
            let mut grad = self.model.zeros_like();
            fcn_backward(&self.model, &cache, &d, &mut grad);
            self.apply(&grad)?;
            total += loss * chunk.len() as f64;
            n += chunk.len();
        }
        Ok(total / n as f64)
    }

    fn rnn_epoch(&mut self, data: &[Sequence]) -> Result<f64, ModelError> {
        let (h, layers, tb) = (self.model.spec.hidden, self.model.spec.layers, self.cfg.tbptt);
        let per_group = (self.cfg.batch / tb).max(1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut n) = (0.0, 0);
        for group in order.chunks(per_group) {
            // Longest first so the live sequences at any step form a prefix.
            let mut g: Vec<&Sequence> = group.iter().map(|&i| &data[i]).collect();
            g.sort_by_key(|s| std::cmp::Reverse(s.len()));
            let longest = g[0].len();
            let mut state = vec![vec![0.0; g.len() * h]; layers];
            for start in (0..longest).step_by(tb) {
                let end = (start + tb).min(longest);
                let mut caches = Vec::with_capacity(end - start);
                let mut preds = Vec::new();
                let mut targets = Vec::new();
                let mut x = Vec::new();
                for t in start..end {
                    let rows = g.iter().take_while(|s| s.len() > t).count();
                    x.clear();
                    for s in &g[..rows] {
                        x.extend_from_slice(s.window(t));
                        targets.push(s.y[t]);
                    }
                    let (p, c) = rnn_step(&self.model, &x, &mut state, rows);
                    preds.extend(p);
                    caches.push(c);
                }
                let (loss, d) = self.huber(&preds, &targets);
                let mut off = 0;
                let dpreds: Vec<Vec<f64>> = caches
                    .iter()
                    .map(|c| {
                        off += c.rows;
                        d[off - c.rows..off].to_vec()
                    })
                    .collect();
                let mut grad = self.model.zeros_like();
                let mut carry = vec![vec![0.0; g.len() * h]; layers];
                rnn_backward(&self.model, &caches, &dpreds, &mut carry, &mut grad);
                self.apply(&grad)?;
                total += loss * preds.len() as f64;
                n += preds.len();
            }
        }
        Ok(total / n as f64)
    }

    fn tfm_epoch(&mut self, data: &[Sequence]) -> Result<f64, ModelError> {
        let longest = data.iter().map(Sequence::len).max().unwrap_or(1);
        let per_group = (self.cfg.batch / longest).max(1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut n) = (0.0, 0);
        for group in order.chunks(per_group) {
            let windows: usize = group.iter().map(|&i| data[i].len()).sum();
            let mut grad = self.model.zeros_like();
            for &i in group {
                let s = &data[i];
                let (pred, cache) = tfm_forward(&self.model, &s.x);
                let (loss, mut d) = self.huber(&pred, &s.y);
                // Re-weight the per-sequence mean into a mean over the group.
                let w = s.len() as f64 / windows as f64;
                for v in &mut d {
                    *v *= w;
                }
                tfm_backward(&self.model, &cache, &d, &mut grad);
                total += loss * s.len() as f64;
            }
            self.apply(&grad)?;
            n += windows;
        }
        Ok(total / n as f64)
    }
}

/// Trains with Huber loss and Adam, keeping the parameters with the lowest
/// validation MAE (training MAE when `val` is empty). Normalization constants
/// are fitted on `train` and stored in the returned model.
pub fn train(
    model: ModelParams,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &TrainConfig,
) -> Result<(ModelParams, History), ModelError> {
    train_with(model, train, val, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: ModelParams,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, History), ModelError> {
    cfg.validate()?;
    let train: Vec<Sequence> = train.iter().filter(|s| !s.is_empty()).cloned().collect();
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let val = if val.iter().any(|s| !s.is_empty()) { val } else { &train[..] };
    model.norm = fit_normalization(&train);
    let lr = cfg.lr_for(&model.spec);
    let adam = AdamState::new(model.tensors(), AdamConfig { lr, ..Default::default() });
    let mut tr = Trainer { model, adam, cfg, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let mut best = (tr.model.clone(), 0, evaluate_mae(&tr.model, val)?);
    let mut epochs = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = match tr.model.spec.kind {
            ModelKind::Fcn => tr.fcn_epoch(&train)?,
            ModelKind::Rnn => tr.rnn_epoch(&train)?,
            ModelKind::Transformer => tr.tfm_epoch(&train)?,
        };
        let val_mae = evaluate_mae(&tr.model, val)?;
        let rec = EpochRecord { epoch, train_loss, val_mae };
        on_epoch(&rec);
        epochs.push(rec);
        if val_mae < best.2 {
            best = (tr.model.clone(), epoch, val_mae);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_epoch, best_val_mae) = best;
    Ok((model, History { epochs, best_epoch, best_val_mae, lr }))
}
