//! AdamW with cosine decay, global-norm clipping and the row-skipping
//! update for separated embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{lit, Scalar};
use crate::model::{ModelParams, TensorKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub lr_decay_iters: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    /// Bias correction of separated rows counts the row's own updates (default)
    /// or the global step.
    pub row_step: RowStep,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            min_lr: 1e-4,
            lr_decay_iters: 8000,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            grad_clip: 1.0,
            row_step: RowStep::PerRow,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStep {
    #[default]
    PerRow,
    Global,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_lr > 0.0
            && self.min_lr <= self.lr
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Cosine decay from `lr` to `min_lr` over `lr_decay_iters`, then flat.
pub fn cosine_lr(iter: u64, cfg: &OptimConfig) -> f64 {
    if iter >= cfg.lr_decay_iters {
        return cfg.min_lr;
    }
    let ratio = iter as f64 / cfg.lr_decay_iters as f64;
    let coeff = 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos());
    cfg.min_lr + coeff * (cfg.lr - cfg.min_lr)
}

/// L2 norm over every gradient tensor.
pub fn global_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so that their global norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm == 0` disables clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let total = global_norm(grads);
    if max_norm > 0.0 && total > max_norm {
        let s: T = lit(max_norm / (total + 1e-6));
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }
    total
}

/// First and second moments of one tensor plus its update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    /// One slot per tensor, in [`ModelParams::tensors`] order.
    pub slots: Vec<Moments<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let slots = params
            .tensors()
            .iter()
            .map(|(_, t)| Moments { m: vec![T::zero(); t.len()], v: vec![T::zero(); t.len()], step: 0 })
            .collect();
        OptimState { slots, step: 0 }
    }
}

/// One decoupled-decay AdamW update of a single tensor at bias-correction step `step` (≥ 1).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64, wd: f64, cfg: &OptimConfig) {
    let b1: T = lit(cfg.beta1);
    let b2: T = lit(cfg.beta2);
    let one = T::one();
    let decay: T = lit(1.0 - lr * wd);
    let step_size: T = lit(lr / (1.0 - cfg.beta1.powi(step as i32)));
    let bc2_sqrt: T = lit((1.0 - cfg.beta2.powi(step as i32)).sqrt());
    let eps: T = lit(cfg.eps);
    for i in 0..p.len() {
        p[i] *= decay;
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let denom = v[i].sqrt() / bc2_sqrt + eps;
        p[i] -= step_size * m[i] / denom;
    }
}

fn check_layout<T: Scalar>(params: &ModelParams<T>, grads: &ModelParams<T>, state: &OptimState<T>) -> Result<()> {
    let pt = params.tensors();
    let gt = grads.tensors();
    if pt.len() != gt.len() || pt.len() != state.slots.len() {
        return Err(Error::Shape("parameter, gradient and optimizer layouts differ".into()));
    }
    for ((p, g), s) in pt.iter().zip(&gt).zip(&state.slots) {
        if p.1.len() != g.1.len() || p.1.len() != s.m.len() {
            return Err(Error::Shape(format!("tensor {} has mismatched lengths", p.0.name)));
        }
    }
    Ok(())
}

/// Standard AdamW over every tensor; embedding tables count as ordinary
/// weight matrices (or rows that all step together).
pub fn adamw_step<T: Scalar>(params: &mut ModelParams<T>, grads: &ModelParams<T>, state: &mut OptimState<T>, cfg: &OptimConfig, lr: f64) -> Result<()> {
    check_layout(params, grads, state)?;
    state.step += 1;
    let step = state.step;
    for (((info, p), (_, g)), slot) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(state.slots.iter_mut()) {
        let wd = if info.decays() { cfg.weight_decay } else { 0.0 };
        slot.step = step;
        adamw_update(p, g, &mut slot.m, &mut slot.v, step, lr, wd, cfg);
    }
    params.mark_updated();
    Ok(())
}

/// AdamW in which every embedding row with an exactly-zero gradient is left
/// untouched: no moment update, no weight decay, no step advance.
pub fn adamw_step_separated<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimState<T>,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if !params.wte.is_separated() {
        return Err(Error::JointStorage);
    }
    check_layout(params, grads, state)?;
    state.step += 1;
    let global = state.step;
    for (((info, p), (_, g)), slot) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(state.slots.iter_mut()) {
        let wd = if info.decays() { cfg.weight_decay } else { 0.0 };
        if info.kind == TensorKind::EmbeddingRow {
            if g.iter().all(|x| *x == T::zero()) {
                continue;
            }
            slot.step += 1;
            let step = match cfg.row_step {
                RowStep::PerRow => slot.step,
                RowStep::Global => global,
            };
            adamw_update(p, g, &mut slot.m, &mut slot.v, step, lr, wd, cfg);
        } else {
            slot.step = global;
            adamw_update(p, g, &mut slot.m, &mut slot.v, global, lr, wd, cfg);
        }
    }
    params.mark_updated();
    Ok(())
}
