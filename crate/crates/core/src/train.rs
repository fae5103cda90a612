//! Maximum-likelihood training.
//!
//! The loss of a batch is the mean over its windows of `Φ(τ|h) - log φ(τ|h)`.
//! Parameters are updated with Adam, clipped to a global gradient norm, and
//! projected back onto the positive orthant wherever a constraint applies.
//! The truncation depth is chosen from a grid by validation likelihood.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Shape, Tape};
use crate::events::{windows_for_targets, EventSequence, TrainingWindow};
use crate::hazards::HazardConfig;
use crate::model::{Model, ModelError};
use crate::params::{Constraint, Param, ParamSet};
use crate::rng;

/// Windows per parallel work unit. Fixed so that the reduction order, and
/// hence every bit of the result, does not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at window {index}: {source}")]
    NonFinite { index: usize, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no depth in {0:?} produced both training and validation windows")]
    NoWindows(Vec<usize>),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub depth_grid: Vec<usize>,
    pub validation_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient norm above which gradients are rescaled.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 256,
            depth_grid: vec![5, 10, 20, 40],
            validation_fraction: 0.2,
            max_epochs: 100,
            patience: 5,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.adam_epsilon > 0.0 && self.clip_norm > 0.0) {
            return bad("learning_rate, adam_epsilon and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.depth_grid.is_empty() || self.depth_grid.contains(&0) {
            return bad("depth_grid must be non-empty and positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serialises");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean loss of a batch and its gradient for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

struct Partial {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn chunk_loss(model: &Model, windows: &[TrainingWindow], offset: usize) -> Result<Partial> {
    let mut out = Partial {
        loss: 0.0,
        grads: model.params.zeros_like(),
    };
    for (i, w) in windows.iter().enumerate() {
        let index = offset + i;
        let non_finite = |source: ModelError| TrainError::NonFinite { index, source };
        let mut tape = Tape::new();
        let graph = model.window_loss(&mut tape, w)?;
        tape.forward().map_err(|e| non_finite(e.into()))?;
        let loss = tape.scalar_value(graph.loss).map_err(ModelError::from)?;
        let grads = tape.backward(graph.loss).map_err(|e| non_finite(e.into()))?;
        out.loss += loss;
        for (acc, v) in out.grads.iter_mut().zip(&graph.params) {
            if let Some(g) = grads.get(*v) {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
        }
    }
    Ok(out)
}

/// Mean window loss and its gradient, computed in fixed-size chunks that may
/// run in parallel and are summed in order.
pub fn batch_loss(model: &Model, batch: &[TrainingWindow]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let partials: Vec<Partial> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, ws)| chunk_loss(model, ws, c * CHUNK))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = model.params.zeros_like();
    for p in partials {
        loss += p.loss;
        for (acc, g) in grads.iter_mut().zip(&p.grads) {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
    }
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok(BatchLoss {
        loss: loss * scale,
        grads,
    })
}

/// Mean window loss without gradients.
pub fn mean_nll(model: &Model, windows: &[TrainingWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let sums: Vec<f64> = windows
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, ws)| {
            ws.iter().enumerate().try_fold(0.0, |acc, (i, w)| {
                let v = model.window_nll(w)?;
                if !v.is_finite() {
                    return Err(TrainError::NonFinite {
                        index: c * CHUNK + i,
                        source: ModelError::Layout(format!("loss {v}")),
                    });
                }
                Ok(acc + v)
            })
        })
        .collect::<Result<_>>()?;
    Ok(sums.iter().sum::<f64>() / windows.len() as f64)
}

/// Rescales `grads` in place when their global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update followed by projection of every constrained entry.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], cfg: &TrainConfig) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.data.len(), g.len(), "shape mismatch for {}", p.name);
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            }
        }
        params.project();
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub depth: usize,
    pub epoch: usize,
    pub train_nll: f64,
    pub validation_nll: f64,
    /// Batches whose gradient was clipped.
    pub clipped: usize,
}

/// Outcome of training at one depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    pub depth: usize,
    pub best_validation_nll: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Training metadata stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub validation_nll: f64,
    pub depth: usize,
    pub config_hash: String,
    pub seed: u64,
    pub depth_results: Vec<DepthResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Largest interval between consecutive events in any of the sequences,
/// including the gap from each observation start to its first event.
pub fn max_interval(seqs: &[EventSequence]) -> f64 {
    seqs.iter()
        .flat_map(|s| {
            let first = s.timestamps().first().map(|t| t - s.t_start());
            first.into_iter().chain(s.intervals())
        })
        .fold(0.0, f64::max)
}

/// Training and validation windows at depth `d`. The last
/// `validation_fraction` of each sequence's targets are held out.
pub fn split_windows(
    seqs: &[EventSequence],
    depth: usize,
    validation_fraction: f64,
) -> (Vec<TrainingWindow>, Vec<TrainingWindow>) {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for s in seqs {
        let n = s.len();
        let cut = (n as f64 * (1.0 - validation_fraction)).floor() as usize;
        train.extend(windows_for_targets(s, depth, 0..cut));
        valid.extend(windows_for_targets(s, depth, cut..n));
    }
    (train, valid)
}

/// Trains `model` on `train` with early stopping on `valid`. Returns the
/// parameters of the best validation epoch together with the run summary.
pub fn train_depth(
    mut model: Model,
    train: &[TrainingWindow],
    valid: &[TrainingWindow],
    cfg: &TrainConfig,
    log: &mut Vec<EpochRecord>,
) -> Result<(Model, DepthResult)> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let depth = model.depth;
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (mean_nll(&model, valid)?, 0usize, model.params.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = rng::from_seed(rng::split_seed(rng::split_seed(cfg.seed, depth as u64), epoch as u64));
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut clipped = 0;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train[i].clone()));
            let mut bl = batch_loss(&model, &batch)?;
            total += bl.loss * batch.len() as f64;
            let norm = clip_global_norm(&mut bl.grads, cfg.clip_norm);
            if norm > cfg.clip_norm {
                clipped += 1;
                log::debug!(
                    "d={depth} epoch {epoch}: gradient norm {norm:.3} clipped to {}",
                    cfg.clip_norm
                );
            }
            adam.step(&mut model.params, &bl.grads, cfg);
        }
        let train_nll = total / train.len() as f64;
        let validation_nll = mean_nll(&model, valid)?;
        epochs_run = epoch;
        if clipped > 0 {
            log::info!(
                "d={depth} epoch {epoch}: {clipped} batches clipped at norm {}",
                cfg.clip_norm
            );
        }
        log::info!("d={depth} epoch {epoch}: train {train_nll:.5} validation {validation_nll:.5}");
        log.push(EpochRecord {
            depth,
            epoch,
            train_nll,
            validation_nll,
            clipped,
        });
        if validation_nll < best.0 {
            best = (validation_nll, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_validation_nll, best_epoch, params) = best;
    model.params = params;
    Ok((
        model,
        DepthResult {
            depth,
            best_validation_nll,
            best_epoch,
            epochs_run,
        },
    ))
}

/// Fits one hazard family to training sequences, choosing the truncation
/// depth from `cfg.depth_grid` by validation likelihood.
///
/// `hazard.tau_max` is overwritten with the largest training interval. The
/// returned model is the best one held during training at the chosen depth;
/// it is not retrained on the full data.
pub fn fit(seqs: &[EventSequence], hazard: &HazardConfig, cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let tau_max = max_interval(seqs);
    if tau_max.is_nan() || tau_max <= 0.0 {
        return Err(TrainError::NoWindows(cfg.depth_grid.clone()));
    }
    let hazard = hazard.clone().with_tau_max(tau_max);
    let hash = config_hash(&(&hazard, cfg));
    let mut log = Vec::new();
    let mut results = Vec::new();
    let mut best: Option<Model> = None;
    for &depth in &cfg.depth_grid {
        let (train, valid) = split_windows(seqs, depth, cfg.validation_fraction);
        if train.is_empty() || valid.is_empty() {
            log::warn!(
                "depth {depth}: {} training and {} validation windows; skipped",
                train.len(),
                valid.len()
            );
            continue;
        }
        let init = Model::init(hazard.clone(), depth, rng::split_seed(cfg.seed, depth as u64 ^ 0x5EED));
        let (model, result) = train_depth(init, &train, &valid, cfg, &mut log)?;
        log::info!(
            "depth {depth}: best validation NLL {:.5} at epoch {}",
            result.best_validation_nll,
            result.best_epoch
        );
        let better = results
            .iter()
            .all(|r: &DepthResult| result.best_validation_nll < r.best_validation_nll);
        if better {
            best = Some(model);
        }
        results.push(result);
    }
    let model = best.ok_or_else(|| TrainError::NoWindows(cfg.depth_grid.clone()))?;
    let chosen = results
        .iter()
        .find(|r| r.depth == model.depth)
        .cloned()
        .expect("chosen depth has a result");
    let meta = TrainingMeta {
        epochs_run: chosen.epochs_run,
        best_epoch: chosen.best_epoch,
        validation_nll: chosen.best_validation_nll,
        depth: chosen.depth,
        config_hash: hash,
        seed: cfg.seed,
        depth_results: results,
    };
    Ok(FitOutput {
        checkpoint: Checkpoint { model, meta },
        log,
    })
}

/// Checkpoint file layout (all integers little-endian):
///
/// | bytes          | content                                          |
/// |----------------|--------------------------------------------------|
/// | 8              | magic `TPPCKPT\0`                                |
/// | 4              | format version (`u32`, currently 1)              |
/// | 4              | header length `H` (`u32`)                        |
/// | H              | UTF-8 JSON header, see [`CheckpointHeader`]      |
/// | 8 per entry    | every tensor's `f64` values, row-major, in header order |
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TPPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub hazard: HazardConfig,
    pub depth: usize,
    pub tensors: Vec<TensorHeader>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            hazard: self.model.config.clone(),
            depth: self.model.depth,
            tensors: self
                .model
                .params
                .iter()
                .map(|p| TensorHeader {
                    name: p.name.clone(),
                    rows: p.shape.rows,
                    cols: p.shape.cols,
                    constraint: p.constraint,
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.model.params.total_len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params.iter() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| TrainError::Checkpoint(m);
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version".into()))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word)
            .map_err(|_| bad("truncated header length".into()))?;
        let header_len = u32::from_le_bytes(word) as usize;
        if r.len() < header_len {
            return Err(bad("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        r = &r[header_len..];
        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if r.len() != expected * 8 {
            return Err(bad(format!("expected {} data bytes, found {}", expected * 8, r.len())));
        }
        let mut values = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params = header
            .tensors
            .iter()
            .map(|t| Param {
                name: t.name.clone(),
                shape: Shape::matrix(t.rows, t.cols),
                data: values.by_ref().take(t.rows * t.cols).collect(),
                constraint: t.constraint,
            })
            .collect();
        let model = Model::from_params(header.hazard, header.depth, ParamSet::new(params))?;
        Ok(Checkpoint {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
