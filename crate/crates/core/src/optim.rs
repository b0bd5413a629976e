//! SGD with momentum, layer-wise trust-ratio (LARC) scaling over sharded
//! parameters, and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{WorldHandle, NO_LAYER};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LarcConfig {
    /// Trust coefficient.
    pub eta: f64,
    /// Weight-decay term inside the trust ratio's denominator.
    pub beta: f64,
    /// Coefficient used when the norms are degenerate.
    pub clip_fallback: f64,
}

impl Default for LarcConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            beta: 1e-5,
            clip_fallback: 1.0,
        }
    }
}

impl LarcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.beta >= 0.0) || !self.clip_fallback.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "larc needs eta > 0, beta >= 0 and a finite fallback, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `λ = η‖w‖ / (‖∇w‖ + β‖w‖)`, or the fallback when `‖w‖` or the
/// denominator is zero.
pub fn larc_coeff(w_norm: f64, g_norm: f64, cfg: &LarcConfig) -> Result<f64> {
    if !(w_norm >= 0.0) || !(g_norm >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "norms must be non-negative, got ‖w‖={w_norm} ‖g‖={g_norm}"
        )));
    }
    let denom = g_norm + w_norm * cfg.beta;
    if w_norm == 0.0 || denom == 0.0 {
        return Ok(cfg.clip_fallback);
    }
    Ok(cfg.eta * w_norm / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
}

impl LrSchedule {
    /// The 10B pretraining schedule: 0.15 → 9.3 over 5,500 iterations, then
    /// cosine to 0.0093 at 126k iterations.
    pub const PRETRAIN_10B: LrSchedule = LrSchedule {
        base_lr: 0.15,
        peak_lr: 9.3,
        final_lr: 0.0093,
        warmup_iters: 5500,
        total_iters: 126_000,
    };

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters >= self.total_iters {
            return Err(Error::InvalidConfig(format!(
                "warmup_iters {} must be below total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if !(self.peak_lr >= self.base_lr) || !self.final_lr.is_finite() {
            return Err(Error::InvalidConfig("peak_lr must be >= base_lr".into()));
        }
        Ok(())
    }
}

pub fn schedule_lr(iter: u64, sched: &LrSchedule) -> Result<f64> {
    if iter > sched.total_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond total {}",
            sched.total_iters
        )));
    }
    if iter < sched.warmup_iters {
        let frac = iter as f64 / sched.warmup_iters as f64;
        return Ok(sched.base_lr + (sched.peak_lr - sched.base_lr) * frac);
    }
    let progress = (iter - sched.warmup_iters) as f64 / (sched.total_iters - sched.warmup_iters) as f64;
    Ok(sched.final_lr
        + 0.5 * (sched.peak_lr - sched.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `g ← g + wd·w; v ← μ·v + g; w ← w − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    momentum: &mut [f64],
    lr_eff: f64,
    weight_decay: f64,
    momentum_coef: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != momentum.len() {
        return Err(Error::Shape(format!(
            "sgd_step with params {}, grads {}, momentum {}",
            params.len(),
            grads.len(),
            momentum.len()
        )));
    }
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(momentum.iter_mut()) {
        let g = g + weight_decay * *w;
        *v = momentum_coef * *v + g;
        *w -= lr_eff * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `None` disables trust-ratio scaling.
    pub larc: Option<LarcConfig>,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if let Some(l) = &self.larc {
            l.validate()?;
        }
        Ok(())
    }

    /// Per-unit effective learning rates for `iter` given layer norms.
    pub fn effective_lrs(&self, iter: u64, norms: &[(f64, f64)]) -> Result<Vec<f64>> {
        let lr = schedule_lr(iter, &self.schedule)?;
        norms
            .iter()
            .map(|&(w, g)| match &self.larc {
                Some(l) => Ok(lr * larc_coeff(w, g, l)?),
                None => Ok(lr),
            })
            .collect()
    }
}

pub fn local_sum_of_squares(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc
}

/// Length of each rank's block when `len` values are split over `world` ranks.
pub fn shard_len(len: usize, world: usize) -> usize {
    len.div_ceil(world)
}

/// Sum of squares of a dense vector computed the way a `world`-rank sharded
/// layout computes it: per-block partial sums folded in rank order.
pub fn blocked_sum_of_squares(v: &[f64], world: usize) -> f64 {
    let block = shard_len(v.len(), world).max(1);
    let mut acc = 0.0;
    for r in 0..world {
        let lo = (r * block).min(v.len());
        let hi = ((r + 1) * block).min(v.len());
        let part = local_sum_of_squares(&v[lo..hi]);
        acc = if r == 0 { part } else { acc + part };
    }
    acc
}

/// Dense-route layer norms with the sharded fold order.
pub fn blocked_norms(weights: &[Vec<f64>], grads: &[Vec<f64>], world: usize) -> Vec<(f64, f64)> {
    weights
        .iter()
        .zip(grads)
        .map(|(w, g)| {
            (
                blocked_sum_of_squares(w, world).sqrt(),
                blocked_sum_of_squares(g, world).sqrt(),
            )
        })
        .collect()
}

/// Layer norms over sharded weights and gradients with one batched
/// all-reduce of `2L` partial sums of squares.
pub async fn distributed_norms(
    handle: &mut WorldHandle,
    weight_shards: &[&[f64]],
    grad_shards: &[&[f64]],
) -> Result<Vec<(f64, f64)>> {
    if weight_shards.len() != grad_shards.len() {
        return Err(Error::Shape("weight and gradient shard counts differ".into()));
    }
    let n_layers = weight_shards.len();
    let mut payload = Vec::with_capacity(2 * n_layers);
    payload.extend(weight_shards.iter().map(|w| local_sum_of_squares(w)));
    payload.extend(grad_shards.iter().map(|g| local_sum_of_squares(g)));
    let summed = handle.all_reduce(NO_LAYER, &payload).await?;
    if summed.len() != 2 * n_layers {
        return Err(Error::Fabric(crate::fabric::FabricError::Protocol {
            rank: handle.rank(),
            msg: format!("norm payload of {} for {n_layers} layers", summed.len()),
        }));
    }
    Ok((0..n_layers)
        .map(|l| (summed[l].sqrt(), summed[n_layers + l].sqrt()))
        .collect())
}
