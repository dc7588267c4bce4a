//! Optimizers, the finite-difference gradient oracle and the epoch loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Fault;
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, loss_value, ModelState, TrainingBatch, EMBEDDING};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_REL_TOL: f64 = 1e-4;
pub const GRADCHECK_ABS_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Constant-rate gradient descent.
    Sgd,
    /// Gradient descent with rate `lr / t`.
    SgdInvT,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdInvT => "sgdinvt",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgdinvt" | "sgd-1/t" | "sgd_inv_t" => Ok(OptimizerKind::SgdInvT),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer '{other}' (expected sgd, sgdinvt or adam)"
            ))),
        }
    }
}

/// Optimizer state: step count, rate and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and nonnegative, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Rate applied by the next step.
    pub fn effective_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::SgdInvT => self.lr / (self.t + 1) as f64,
            _ => self.lr,
        }
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// moves, so a rejected step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [(String, Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::DimensionMismatch {
                    expected: p.len(),
                    got: g.len(),
                });
            }
            if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                    index,
                    value,
                });
            }
        }
        let rate = self.effective_lr();
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd | OptimizerKind::SgdInvT => {
                for ((_, p), g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= rate * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let (w, d) = (p.data_mut(), g.data());
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * d[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * d[i] * d[i];
                        w[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Central differences `(f(θ + h e) - f(θ - h e)) / 2h` for every coordinate.
pub fn finite_difference_grad<F>(mut f: F, theta: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for p in 0..theta.len() {
        let mut g = Tensor::zeros(theta[p].shape());
        for i in 0..theta[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = f(&work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Agreement of analytic and numerical gradients for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    /// Largest `|a - n| / max(|a|, |n|)` over coordinates whose absolute
    /// error exceeds the near-zero floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    /// Groups sorted by decreasing relative error.
    pub fn worst(&self) -> Vec<&GroupCheck> {
        let mut v: Vec<&GroupCheck> = self.groups.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v
    }
}

/// Compares backward against central differences on one batch, per
/// parameter group. The padding row of the embedding is excluded because
/// its gradient is zeroed by design.
pub fn gradcheck(model: &ModelState, batch: &TrainingBatch, h: f64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let analytic = loss_and_grads(model, batch, None, fault)?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    let theta: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let config = model.config().clone();
    let numeric = finite_difference_grad(
        |ps| {
            let parts = names.iter().cloned().zip(ps.iter().cloned()).collect();
            loss_value(&ModelState::from_parts(config.clone(), parts)?, batch)
        },
        &theta,
        h,
    )?;
    let d = config.d;
    let mut groups: Vec<GroupCheck> = Vec::new();
    for (p, name) in names.iter().enumerate() {
        let group = ModelState::group_of(name);
        let skip = if name == EMBEDDING { d } else { 0 };
        let idx = match groups.iter().position(|g| g.group == group) {
            Some(i) => i,
            None => {
                groups.push(GroupCheck {
                    group: group.to_string(),
                    max_rel_error: 0.0,
                    max_abs_error: 0.0,
                    coordinates: 0,
                    passed: true,
                });
                groups.len() - 1
            }
        };
        let entry = &mut groups[idx];
        for (a, n) in analytic.grads[p].data().iter().zip(numeric[p].data()).skip(skip) {
            let abs = (a - n).abs();
            entry.coordinates += 1;
            entry.max_abs_error = entry.max_abs_error.max(abs);
            if abs > GRADCHECK_ABS_TOL {
                let rel = abs / a.abs().max(n.abs());
                entry.max_rel_error = entry.max_rel_error.max(rel);
                if rel > GRADCHECK_REL_TOL {
                    entry.passed = false;
                }
            }
            if !abs.is_finite() {
                entry.passed = false;
                entry.max_rel_error = f64::INFINITY;
            }
        }
    }
    Ok(GradcheckReport {
        loss: analytic.loss,
        groups,
    })
}

/// Settings of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be nonnegative".into()));
        }
        Optimizer::new(self.optimizer, self.lr).map(|_| ())
    }
}

/// Summary of one pass over the training sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub grad_norm_mean: f64,
    pub wall_seconds: f64,
    pub seed: u64,
}

/// Extra diagnostics gathered during an epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub grad_norm_max: f64,
    pub max_residual: f64,
    pub steps: usize,
}

/// Seed of the per-epoch stream used for shuffling, negatives and dropout.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One pass over `sequences` (full item histories; consecutive pairs are the
/// supervision). Sequences shorter than two items carry no target and are
/// skipped.
pub fn train_epoch(
    model: &mut ModelState,
    sequences: &[Vec<usize>],
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(EpochReport, EpochStats)> {
    let start = Instant::now();
    let seed = epoch_seed(cfg.seed, epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sequences.len()).filter(|&i| sequences[i].len() >= 2).collect();
    if order.is_empty() {
        return Err(Error::EmptyDataset("no sequence has a next-item target".into()));
    }
    order.shuffle(&mut rng);
    let len = model.config().max_seq_len;
    let n_items = model.config().n_items();
    let mut loss_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut stats = EpochStats::default();
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&i| sequences[i].as_slice()).collect();
        let batch = TrainingBatch::from_sequences(&seqs, len, n_items, &mut rng);
        let mut out = loss_and_grads(model, &batch, Some(&mut rng), None)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: bi });
        }
        let norm = if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut out.grads, cfg.clip_norm)
        } else {
            global_norm(&out.grads)
        };
        opt.step(model.params_mut(), &out.grads)?;
        loss_sum += out.loss;
        norm_sum += norm;
        stats.grad_norm_max = stats.grad_norm_max.max(norm);
        stats.max_residual = stats.max_residual.max(out.max_residual);
        stats.steps += 1;
    }
    let n = stats.steps as f64;
    Ok((
        EpochReport {
            epoch,
            mean_loss: loss_sum / n,
            grad_norm_mean: norm_sum / n,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed,
        },
        stats,
    ))
}
