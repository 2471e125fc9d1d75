//! Training objectives over `(positions)×vocab` logits.
//!
//! Every variant scales the logits by `train_logit_scale` first and applies
//! its margin in the scaled space. Losses are means over all positions and
//! `dlogits` is the gradient of that mean with respect to the unscaled logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{lit, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    Standard,
    Threshold,
    AlphaThreshold,
    Softminus,
    Dut,
}

/// What softminus subtracts from every probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtrahend {
    /// `C·e^{−margin}`.
    #[default]
    Absolute,
    /// `C·P(x_t)·e^{−margin}`.
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub variant: LossVariant,
    pub margin: f64,
    pub alpha: f64,
    /// Softminus multiplier on the subtracted quantity.
    pub c: f64,
    pub detach_threshold: bool,
    pub subtrahend: Subtrahend,
    pub train_logit_scale: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            variant: LossVariant::Standard,
            margin: 0.0,
            alpha: 1.0,
            c: 1.0,
            detach_threshold: false,
            subtrahend: Subtrahend::Absolute,
            train_logit_scale: 1.0,
        }
    }
}

impl LossSpec {
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn threshold(margin: f64) -> Self {
        LossSpec { variant: LossVariant::Threshold, margin, ..Self::default() }
    }

    pub fn alpha_threshold(alpha: f64) -> Self {
        LossSpec { variant: LossVariant::AlphaThreshold, alpha, ..Self::default() }
    }

    pub fn softminus(margin: f64, c: f64, detach_threshold: bool) -> Self {
        LossSpec { variant: LossVariant::Softminus, margin, c, detach_threshold, ..Self::default() }
    }

    pub fn dut(margin: f64) -> Self {
        LossSpec { variant: LossVariant::Dut, margin, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.train_logit_scale.is_finite() && self.train_logit_scale > 0.0) {
            return bad("train_logit_scale must be finite and positive");
        }
        match self.variant {
            LossVariant::Threshold | LossVariant::Dut if !(self.margin.is_finite() && self.margin >= 0.0) => {
                bad("margin must be finite and non-negative")
            }
            LossVariant::AlphaThreshold if !(self.alpha > 0.0 && self.alpha <= 1.0) => bad("alpha must lie in (0, 1]"),
            LossVariant::Softminus if self.margin.is_nan() || !(self.c >= 0.0 && self.c.is_finite()) => {
                bad("softminus needs a non-NaN margin and finite C ≥ 0")
            }
            _ => Ok(()),
        }
    }
}

/// Norm factors for α-thresholding, one per position.
#[derive(Clone, Debug)]
pub struct AlphaNorms<T> {
    /// `‖h_t‖`.
    pub hidden: Vec<T>,
    /// `‖w_{x_t}‖` of the target row.
    pub target_row: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean loss over all positions; `+∞` if any position is infinite.
    pub loss: f64,
    /// Gradient of `loss` with respect to the unscaled logits.
    pub dlogits: Vec<T>,
    /// Per-position negative log-likelihood under the variant's forward.
    pub nll: Vec<f64>,
    /// `true` where an entry takes part in the gradient (survivor, not detached, not clamped).
    pub survivors: Vec<bool>,
    /// Positions whose loss is infinite (softminus with a clamped target).
    pub infinite_positions: Vec<usize>,
}

impl<T> LossOutput<T> {
    /// Mean over the finite positions only.
    pub fn finite_mean(&self) -> f64 {
        let finite: Vec<f64> = self.nll.iter().copied().filter(|x| x.is_finite()).collect();
        if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    }
}

fn check_shapes<T>(logits: &[T], targets: &[u16], vocab: usize) -> Result<usize> {
    if vocab == 0 || logits.len() != targets.len() * vocab {
        return Err(Error::Shape(format!("{} logits for {} targets × vocab {vocab}", logits.len(), targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: t as usize, limit: vocab });
    }
    Ok(targets.len())
}

/// Sets entries below `logit[target] − margin` to `−∞`. Ties survive.
pub fn threshold_logits<T: Scalar>(logits: &[T], targets: &[u16], margin: T) -> Result<Vec<T>> {
    let vocab = logits.len() / targets.len().max(1);
    check_shapes(logits, targets, vocab)?;
    let mut out = logits.to_vec();
    for (row, &tgt) in out.chunks_exact_mut(vocab).zip(targets) {
        let th = row[tgt as usize] - margin;
        for z in row.iter_mut() {
            if *z < th {
                *z = T::neg_infinity();
            }
        }
    }
    Ok(out)
}

/// Per-position margins `alpha·‖h_t‖·‖w_{x_t}‖`.
pub fn alpha_margins<T: Scalar>(alpha: T, norms: &AlphaNorms<T>) -> Vec<T> {
    norms.hidden.iter().zip(&norms.target_row).map(|(&h, &w)| alpha * h * w).collect()
}

/// [`threshold_logits`] with the per-position margin `alpha·‖h_t‖·‖w_{x_t}‖`.
pub fn alpha_threshold_logits<T: Scalar>(logits: &[T], targets: &[u16], alpha: T, norms: &AlphaNorms<T>) -> Result<Vec<T>> {
    let vocab = logits.len() / targets.len().max(1);
    check_shapes(logits, targets, vocab)?;
    if norms.hidden.len() != targets.len() || norms.target_row.len() != targets.len() {
        return Err(Error::Shape("one hidden and one target-row norm per position".into()));
    }
    let margins = alpha_margins(alpha, norms);
    let mut out = logits.to_vec();
    for ((row, &tgt), &m) in out.chunks_exact_mut(vocab).zip(targets).zip(&margins) {
        let th = row[tgt as usize] - m;
        for z in row.iter_mut() {
            if *z < th {
                *z = T::neg_infinity();
            }
        }
    }
    Ok(out)
}

/// Computes the loss and its gradient for any variant.
///
/// `alpha` must be supplied for [`LossVariant::AlphaThreshold`]; callers with
/// an untied head should get [`Error::AlphaRequiresTiedHead`] from
/// [`crate::model::alpha_norms`] before reaching this point.
pub fn ce_loss<T: Scalar>(
    logits: &[T],
    targets: &[u16],
    vocab: usize,
    spec: &LossSpec,
    alpha: Option<&AlphaNorms<T>>,
) -> Result<LossOutput<T>> {
    spec.validate()?;
    let n = check_shapes(logits, targets, vocab)?;
    let scale: T = lit(spec.train_logit_scale);
    let inv_n: T = lit(1.0 / n as f64);
    let margins: Vec<T> = match spec.variant {
        LossVariant::AlphaThreshold => {
            let norms = alpha.ok_or(Error::AlphaRequiresTiedHead)?;
            if norms.hidden.len() != n || norms.target_row.len() != n {
                return Err(Error::Shape("one hidden and one target-row norm per position".into()));
            }
            alpha_margins(lit(spec.alpha), norms)
        }
        _ => vec![lit(spec.margin); n],
    };

    let mut dlogits = vec![T::zero(); n * vocab];
    let mut survivors = vec![true; n * vocab];
    let mut nll = vec![0.0; n];
    let mut infinite = Vec::new();
    let mut z = vec![T::zero(); vocab];
    let mut p = vec![T::zero(); vocab];

    for t in 0..n {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let tgt = targets[t] as usize;
        for (zi, &l) in z.iter_mut().zip(row) {
            *zi = l * scale;
        }
        let keep = &mut survivors[t * vocab..(t + 1) * vocab];
        let th = z[tgt] - margins[t];
        let masks_forward = matches!(spec.variant, LossVariant::Threshold | LossVariant::AlphaThreshold);
        if masks_forward {
            for (k, &zi) in keep.iter_mut().zip(&z) {
                *k = zi >= th;
            }
        }
        assert!(keep[tgt], "target masked");

        // Softmax over the surviving entries.
        let max = z.iter().zip(keep.iter()).filter(|(_, &k)| k).map(|(&v, _)| v).fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for ((pi, &zi), &k) in p.iter_mut().zip(&z).zip(keep.iter()) {
            *pi = if k { (zi - max).exp() } else { T::zero() };
            sum += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= sum;
        }
        let log_pt = z[tgt] - max - sum.ln();

        let g = &mut dlogits[t * vocab..(t + 1) * vocab];
        match spec.variant {
            LossVariant::Standard | LossVariant::Threshold | LossVariant::AlphaThreshold => {
                nll[t] = -log_pt.as_f64();
                for i in 0..vocab {
                    if keep[i] {
                        g[i] = p[i];
                    }
                }
                g[tgt] -= T::one();
            }
            LossVariant::Dut => {
                nll[t] = -log_pt.as_f64();
                for i in 0..vocab {
                    keep[i] = z[i] >= th;
                    if keep[i] {
                        g[i] = p[i];
                    }
                }
                g[tgt] -= T::one();
            }
            LossVariant::Softminus => {
                let e: T = lit(spec.c * (-spec.margin).exp());
                let s = match spec.subtrahend {
                    Subtrahend::Absolute => e,
                    Subtrahend::Relative => e * p[tgt],
                };
                for i in 0..vocab {
                    keep[i] = p[i] - s > T::zero();
                }
                let pt_prime = p[tgt] - s;
                if !keep[tgt] {
                    nll[t] = f64::INFINITY;
                    infinite.push(t);
                    keep.iter_mut().for_each(|k| *k = false);
                } else {
                    nll[t] = -pt_prime.ln().as_f64();
                    // d(−ln(P_x − s))/dz_j = −(dP_x/dz_j − ds/dz_j)/(P_x − s)
                    let through_s = matches!(spec.subtrahend, Subtrahend::Relative) && !spec.detach_threshold;
                    let factor = if through_s { T::one() } else { p[tgt] / pt_prime };
                    for i in 0..vocab {
                        if keep[i] {
                            g[i] = factor * p[i];
                        }
                    }
                    g[tgt] -= factor;
                }
            }
        }
        for gi in g.iter_mut() {
            *gi *= scale * inv_n;
        }
    }

    let loss = if infinite.is_empty() { nll.iter().sum::<f64>() / n as f64 } else { f64::INFINITY };
    Ok(LossOutput { loss, dlogits, nll, survivors, infinite_positions: infinite })
}

/// State captured at a reference point so that the loss becomes a smooth
/// function whose exact gradient equals the analytic gradient of the variant.
///
/// Thresholded variants keep their survivor set fixed; detached or clamped
/// entries are pinned to their reference logits; a detached subtrahend is
/// held at its reference value.
#[derive(Clone, Debug)]
pub struct FrozenLoss {
    spec: LossSpec,
    vocab: usize,
    survivors: Vec<bool>,
    reference_logits: Vec<f64>,
    reference_subtrahend: Vec<f64>,
}

impl FrozenLoss {
    pub fn capture<T: Scalar>(logits: &[T], targets: &[u16], vocab: usize, spec: &LossSpec, out: &LossOutput<T>) -> Self {
        let scale = spec.train_logit_scale;
        let reference_logits: Vec<f64> = logits.iter().map(|v| v.as_f64() * scale).collect();
        let reference_subtrahend = reference_logits
            .chunks_exact(vocab)
            .zip(targets)
            .map(|(z, &tgt)| {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                let pt = (z[tgt as usize] - max).exp() / sum;
                let e = spec.c * (-spec.margin).exp();
                match spec.subtrahend {
                    Subtrahend::Absolute => e,
                    Subtrahend::Relative => e * pt,
                }
            })
            .collect();
        FrozenLoss { spec: spec.clone(), vocab, survivors: out.survivors.clone(), reference_logits, reference_subtrahend }
    }

    /// Mean loss at `logits` (unscaled) with the captured state held fixed.
    pub fn eval(&self, logits: &[f64], targets: &[u16]) -> f64 {
        let v = self.vocab;
        let scale = self.spec.train_logit_scale;
        let mut total = 0.0;
        for (t, &tgt) in targets.iter().enumerate() {
            let tgt = tgt as usize;
            let keep = &self.survivors[t * v..(t + 1) * v];
            let z: Vec<f64> = match self.spec.variant {
                LossVariant::Standard => logits[t * v..(t + 1) * v].iter().map(|x| x * scale).collect(),
                LossVariant::Threshold | LossVariant::AlphaThreshold => (0..v)
                    .map(|i| if keep[i] { logits[t * v + i] * scale } else { f64::NEG_INFINITY })
                    .collect(),
                LossVariant::Dut | LossVariant::Softminus => (0..v)
                    .map(|i| if keep[i] { logits[t * v + i] * scale } else { self.reference_logits[t * v + i] })
                    .collect(),
            };
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|x| (x - max).exp()).sum();
            let log_pt = z[tgt] - max - sum.ln();
            total += match self.spec.variant {
                LossVariant::Softminus => {
                    if !keep[tgt] {
                        // clamped target: infinite and gradient-free; contributes a constant 0
                        0.0
                    } else {
                        let pt = log_pt.exp();
                        let e = self.spec.c * (-self.spec.margin).exp();
                        let s = match self.spec.subtrahend {
                            Subtrahend::Absolute => e,
                            Subtrahend::Relative if self.spec.detach_threshold => self.reference_subtrahend[t],
                            Subtrahend::Relative => e * pt,
                        };
                        -(pt - s).ln()
                    }
                }
                _ => -log_pt,
            };
        }
        total / targets.len() as f64
    }
}
