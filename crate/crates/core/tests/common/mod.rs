//! Randomized oracles for the nucleus-sampling bounds, shared by the
//! calibration tests and the acceptance target.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rarelm_core::calibration::{margin_for_nucleus, nucleus_set};

#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle {
    pub trials: usize,
    /// Tokens the premise applied to.
    pub checked: usize,
    pub violations: usize,
}

/// Random logits with a random spread, so both flat and peaked rows occur.
fn logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sigma: f64 = rng.random_range(0.3..8.0);
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            sigma * x
        })
        .collect()
}

pub fn softmax_t(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn log_softmax_t(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|x| ((x - m) / t).exp()).sum::<f64>().ln();
    z.iter().map(|x| (x - m) / t - lse).collect()
}

/// A token less likely than some other token and below `(1 − top_p)/(N − 1)`
/// is never in the nucleus.
pub fn low_mass_tail(trials: usize, seed: u64) -> Oracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut o = Oracle { trials, ..Default::default() };
    for _ in 0..trials {
        let n = rng.random_range(2..=1000);
        let top_p: f64 = rng.random_range(0.01..0.999);
        let p = softmax_t(&logits(&mut rng, n), 1.0);
        let max = p.iter().copied().fold(0.0, f64::max);
        let bound = (1.0 - top_p) / (n - 1) as f64;
        let inside = nucleus_set(&p, top_p);
        for i in 0..n {
            if p[i] < bound && p[i] < max {
                o.checked += 1;
                o.violations += inside[i] as usize;
            }
        }
    }
    o
}

/// A token thresholded at `margin` (raw logits) satisfies
/// `P_T(v_i) < P_T(x_t)·e^{−margin/T}`.
pub fn threshold_ratio(trials: usize, seed: u64) -> Oracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut o = Oracle { trials, ..Default::default() };
    for _ in 0..trials {
        let n = rng.random_range(2..=1000);
        let z = logits(&mut rng, n);
        let x = rng.random_range(0..n);
        let margin: f64 = rng.random_range(0.0..10.0);
        let t: f64 = rng.random_range(0.05..2.0);
        // log space: at small T both sides underflow to 0 in linear probabilities
        let lp = log_softmax_t(&z, t);
        let bound = lp[x] - margin / t;
        for i in 0..n {
            if z[i] < z[x] - margin {
                o.checked += 1;
                o.violations += (lp[i] >= bound) as usize;
            }
        }
    }
    o
}

/// With `margin = margin_for_nucleus(N, top_p, T)`, every thresholded token is
/// outside the nucleus of `P_T`. `top_p ≥ 1/N` keeps the margin non-negative.
pub fn nucleus_margin(trials: usize, seed: u64) -> Oracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut o = Oracle { trials, ..Default::default() };
    for _ in 0..trials {
        let n = rng.random_range(2..=1000);
        let top_p: f64 = rng.random_range((1.0 / n as f64).max(0.05)..0.99);
        let t: f64 = rng.random_range(0.05..2.0);
        let margin = margin_for_nucleus(n, top_p, t).unwrap();
        let z = logits(&mut rng, n);
        let x = rng.random_range(0..n);
        let inside = nucleus_set(&softmax_t(&z, t), top_p);
        for i in 0..n {
            if z[i] < z[x] - margin {
                o.checked += 1;
                o.violations += inside[i] as usize;
            }
        }
    }
    o
}
