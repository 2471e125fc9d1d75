//! Finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{FrozenLoss, LossSpec};
use crate::model::{self, ModelConfig, ModelParams};

/// Denominator floor: gradients smaller than this are compared on an absolute
/// scale, since central differences of an O(1) loss cannot resolve them.
const ABS_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central differences in 64-bit over
/// every parameter of a freshly initialised model.
///
/// The finite differences are taken of the variant's loss with its survivor
/// set, detached entries and detached subtrahend held at their values at the
/// initial point, which is the function the analytic gradient differentiates.
pub fn grad_check(config: &ModelConfig, spec: &LossSpec, seed: u64) -> Result<GradCheckReport> {
    let params = ModelParams::<f64>::init(config, seed)?;
    let (batch, seq) = (2, config.block_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let v = config.vocab_size;
    let inputs: Vec<u16> = (0..batch * seq).map(|_| rng.random_range(0..v) as u16).collect();
    let targets: Vec<u16> = (0..batch * seq).map(|_| rng.random_range(0..v) as u16).collect();
    grad_check_at(&params, &inputs, &targets, batch, seq, spec)
}

/// [`grad_check`] at given parameters and data.
pub fn grad_check_at(
    params: &ModelParams<f64>,
    inputs: &[u16],
    targets: &[u16],
    batch: usize,
    seq: usize,
    spec: &LossSpec,
) -> Result<GradCheckReport> {
    let v = params.config.vocab_size;
    let (logits, cache) = model::forward::<f64, ChaCha8Rng>(params, inputs, batch, seq, None)?;
    let out = model::model_loss(params, &cache, &logits, targets, spec)?;
    let frozen = FrozenLoss::capture(&logits, targets, v, spec, &out);
    let grads = model::backward(params, cache, &out.dlogits)?;

    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let (l, _) = model::forward::<f64, ChaCha8Rng>(p, inputs, batch, seq, None)?;
        Ok(frozen.eval(&l, targets))
    };

    let mut probe = params.clone();
    let analytic: Vec<Vec<f64>> = grads.params.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let names: Vec<String> = params.tensors().into_iter().map(|(info, _)| info.name).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_tensor: String::new(), worst_index: 0, worst_analytic: 0.0, worst_numeric: 0.0, checked: 0 };
    for (k, name) in names.iter().enumerate() {
        for j in 0..analytic[k].len() {
            let orig = probe.tensors()[k].1[j];
            set(&mut probe, k, j, orig + STEP);
            let up = eval(&probe)?;
            set(&mut probe, k, j, orig - STEP);
            let down = eval(&probe)?;
            set(&mut probe, k, j, orig);
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[k][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = j;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn set(p: &mut ModelParams<f64>, tensor: usize, index: usize, value: f64) {
    p.tensors_mut()[tensor].1[index] = value;
}
