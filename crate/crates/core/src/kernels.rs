//! Dense kernels with hand-written backward passes.
//!
//! All matrices are row-major. Backward functions accumulate into the
//! parameter-gradient buffers they are given and overwrite input gradients
//! unless documented otherwise.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::float::{lit, mat, Scalar};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// `y = x·W (+ b)` for `x: n×d_in`, `W: d_in×d_out`.
pub fn linear_fwd<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, y: &mut [T], n: usize, d_in: usize, d_out: usize) {
    debug_assert_eq!(x.len(), n * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    match b {
        Some(b) => {
            for row in y.chunks_exact_mut(d_out) {
                row.copy_from_slice(b);
            }
            mat::matmul(x, w, y, n, d_in, d_out, true);
        }
        None => mat::matmul(x, w, y, n, d_in, d_out, false),
    }
}

/// Backward of [`linear_fwd`]: writes `dx`, accumulates `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
    n: usize,
    d_in: usize,
    d_out: usize,
) {
    if let Some(dx) = dx {
        mat::matmul_nt(dy, w, dx, n, d_out, d_in, false);
    }
    mat::matmul_tn(x, dy, dw, d_in, n, d_out, true);
    if let Some(db) = db {
        for row in dy.chunks_exact(d_out) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerNormCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise `y = γ ∘ (x − μ)/√(σ² + eps) + β` over rows of width `d`.
pub fn layernorm_fwd<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T, y: &mut [T], d: usize) -> LayerNormCache<T> {
    let rows = x.len() / d;
    let mut cache = LayerNormCache { mean: Vec::with_capacity(rows), rstd: Vec::with_capacity(rows) };
    let inv_d = T::one() / lit::<T>(d as f64);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        cache.mean.push(mean);
        cache.rstd.push(rstd);
    }
    cache
}

/// Backward of [`layernorm_fwd`]: writes `dx`, accumulates `dgamma`/`dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    cache: &LayerNormCache<T>,
    dy: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    d: usize,
) {
    let inv_d = T::one() / lit::<T>(d as f64);
    for (r, ((xr, dyr), dxr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let (mean, rstd) = (cache.mean[r], cache.rstd[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..d {
            let xhat = (xr[i] - mean) * rstd;
            let g = dyr[i] * gamma[i];
            sum_g += g;
            sum_gx += g * xhat;
            dgamma[i] += dyr[i] * xhat;
            dbeta[i] += dyr[i];
        }
        let mean_g = sum_g * inv_d;
        let mean_gx = sum_gx * inv_d;
        for i in 0..d {
            let xhat = (xr[i] - mean) * rstd;
            dxr[i] = rstd * (dyr[i] * gamma[i] - mean_g - xhat * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.044715;

fn gelu_inner<T: Scalar>(x: T) -> T {
    let k: T = lit((2.0 / std::f64::consts::PI).sqrt());
    k * (x + lit::<T>(GELU_C) * x * x * x)
}

/// Tanh-approximation GELU.
pub fn gelu_fwd<T: Scalar>(x: &[T], y: &mut [T]) {
    let half: T = lit(0.5);
    for (yo, &xi) in y.iter_mut().zip(x) {
        *yo = half * xi * (T::one() + gelu_inner(xi).tanh());
    }
}

/// `dx = dy ∘ gelu'(x)`.
pub fn gelu_bwd<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    let half: T = lit(0.5);
    let k: T = lit((2.0 / std::f64::consts::PI).sqrt());
    let c3: T = lit(3.0 * GELU_C);
    for ((g, &xi), &d) in dx.iter_mut().zip(x).zip(dy) {
        let t = gelu_inner(xi).tanh();
        let dinner = k * (T::one() + c3 * xi * xi);
        *g = d * (half * (T::one() + t) + half * xi * (T::one() - t * t) * dinner);
    }
}

/// `softmax(v / temperature)`; `-inf` entries get probability exactly 0.
pub fn softmax<T: Scalar>(v: &[T], temperature: T) -> Result<Vec<T>> {
    if temperature <= T::zero() {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out, temperature)?;
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T], temperature: T) -> Result<()> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(Error::EmptySupport);
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Inverted dropout; returns the scaled keep-mask (empty when `p == 0`).
pub fn dropout_fwd<T: Scalar, R: Rng + ?Sized>(x: &mut [T], p: f64, rng: Option<&mut R>) -> Vec<T> {
    match rng {
        Some(rng) if p > 0.0 => {
            let scale: T = lit(1.0 / (1.0 - p));
            let mask: Vec<T> =
                (0..x.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { scale }).collect();
            for (v, &m) in x.iter_mut().zip(&mask) {
                *v *= m;
            }
            mask
        }
        _ => Vec::new(),
    }
}

pub fn dropout_bwd<T: Scalar>(dy: &mut [T], mask: &[T]) {
    for (g, &m) in dy.iter_mut().zip(mask) {
        *g *= m;
    }
}

/// Shape of a causal multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub n_head: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn check(&self) -> Result<()> {
        if self.n_head == 0 || self.d_model % self.n_head != 0 {
            return Err(Error::Shape(format!("d_model {} not divisible by n_head {}", self.d_model, self.n_head)));
        }
        Ok(())
    }
}

/// Scaled dot-product attention with a causal mask.
///
/// `qkv` is `(batch·seq)×3d` laid out as `[q | k | v]`, heads contiguous
/// within each part. Writes the merged head outputs into `y` (`(batch·seq)×d`)
/// and returns the attention probabilities (`batch×head×seq×seq`, zero above
/// the diagonal).
pub fn attention_core_fwd<T: Scalar>(qkv: &[T], y: &mut [T], s: AttnShape) -> Vec<T> {
    let (t, d, hd) = (s.seq, s.d_model, s.head_dim());
    let scale: T = lit(1.0 / (hd as f64).sqrt());
    let mut att = vec![T::zero(); s.batch * s.n_head * t * t];
    att.par_chunks_mut(s.n_head * t * t)
        .zip(y.par_chunks_mut(t * d))
        .zip(qkv.par_chunks(t * 3 * d))
        .for_each(|((att_b, y_b), qkv_b)| {
            for h in 0..s.n_head {
                let p = &mut att_b[h * t * t..(h + 1) * t * t];
                let q = &qkv_b[h * hd..];
                let k = &qkv_b[d + h * hd..];
                let v = &qkv_b[2 * d + h * hd..];
                T::gemm(t, hd, t, scale, q, (3 * d, 1), k, (1, 3 * d), T::zero(), p, (t, 1));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in row[..=i].iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row[..=i].iter_mut() {
                        *x /= sum;
                    }
                    for x in row[i + 1..].iter_mut() {
                        *x = T::zero();
                    }
                }
                T::gemm(t, t, hd, T::one(), p, (t, 1), v, (3 * d, 1), T::zero(), &mut y_b[h * hd..], (d, 1));
            }
        });
    att
}

/// Backward of [`attention_core_fwd`]; overwrites `dqkv`.
pub fn attention_core_bwd<T: Scalar>(qkv: &[T], att: &[T], dy: &[T], dqkv: &mut [T], s: AttnShape) {
    let (t, d, hd) = (s.seq, s.d_model, s.head_dim());
    let scale: T = lit(1.0 / (hd as f64).sqrt());
    dqkv.par_chunks_mut(t * 3 * d)
        .zip(att.par_chunks(s.n_head * t * t))
        .zip(dy.par_chunks(t * d))
        .zip(qkv.par_chunks(t * 3 * d))
        .for_each(|(((dqkv_b, att_b), dy_b), qkv_b)| {
            let mut ds = vec![T::zero(); t * t];
            for h in 0..s.n_head {
                let p = &att_b[h * t * t..(h + 1) * t * t];
                let dyh = &dy_b[h * hd..];
                let q = &qkv_b[h * hd..];
                let k = &qkv_b[d + h * hd..];
                let v = &qkv_b[2 * d + h * hd..];
                // dP = dY·Vᵀ
                T::gemm(t, hd, t, T::one(), dyh, (d, 1), v, (1, 3 * d), T::zero(), &mut ds, (t, 1));
                // dV = Pᵀ·dY
                T::gemm(t, t, hd, T::one(), p, (1, t), dyh, (d, 1), T::zero(), &mut dqkv_b[2 * d + h * hd..], (3 * d, 1));
                for i in 0..t {
                    let prow = &p[i * t..(i + 1) * t];
                    let drow = &mut ds[i * t..(i + 1) * t];
                    let dot = prow[..=i].iter().zip(&drow[..=i]).fold(T::zero(), |a, (&x, &g)| a + x * g);
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                    for x in drow[i + 1..].iter_mut() {
                        *x = T::zero();
                    }
                }
                // dQ = dS·K·scale, dK = dSᵀ·Q·scale
                T::gemm(t, t, hd, scale, &ds, (t, 1), k, (3 * d, 1), T::zero(), &mut dqkv_b[h * hd..], (3 * d, 1));
                T::gemm(t, t, hd, scale, &ds, (1, t), q, (3 * d, 1), T::zero(), &mut dqkv_b[d + h * hd..], (3 * d, 1));
            }
        });
}

/// Cached activations of one causal self-attention sublayer.
#[derive(Clone, Debug, Default)]
pub struct AttentionCache<T> {
    pub x: Vec<T>,
    pub qkv: Vec<T>,
    pub att: Vec<T>,
    pub merged: Vec<T>,
}

/// Attention weights of one sublayer.
pub struct AttentionWeights<'a, T> {
    pub w_qkv: &'a [T],
    pub b_qkv: Option<&'a [T]>,
    pub w_proj: &'a [T],
    pub b_proj: Option<&'a [T]>,
}

/// Gradient buffers for [`AttentionWeights`], accumulated into.
pub struct AttentionGrads<'a, T> {
    pub w_qkv: &'a mut [T],
    pub b_qkv: Option<&'a mut [T]>,
    pub w_proj: &'a mut [T],
    pub b_proj: Option<&'a mut [T]>,
}

/// `x (B·T×d) → proj(attn(x·Wqkv))`.
pub fn causal_attention_fwd<T: Scalar>(
    x: &[T],
    w: &AttentionWeights<'_, T>,
    s: AttnShape,
) -> Result<(Vec<T>, AttentionCache<T>)> {
    s.check()?;
    let n = s.batch * s.seq;
    let d = s.d_model;
    if x.len() != n * d || w.w_qkv.len() != d * 3 * d || w.w_proj.len() != d * d {
        return Err(Error::Shape("attention operands".into()));
    }
    let mut qkv = vec![T::zero(); n * 3 * d];
    linear_fwd(x, w.w_qkv, w.b_qkv, &mut qkv, n, d, 3 * d);
    let mut merged = vec![T::zero(); n * d];
    let att = attention_core_fwd(&qkv, &mut merged, s);
    let mut y = vec![T::zero(); n * d];
    linear_fwd(&merged, w.w_proj, w.b_proj, &mut y, n, d, d);
    Ok((y, AttentionCache { x: x.to_vec(), qkv, att, merged }))
}

/// Backward of [`causal_attention_fwd`]; returns `dx`.
pub fn causal_attention_bwd<T: Scalar>(
    cache: &AttentionCache<T>,
    w: &AttentionWeights<'_, T>,
    dy: &[T],
    g: AttentionGrads<'_, T>,
    s: AttnShape,
) -> Vec<T> {
    let n = s.batch * s.seq;
    let d = s.d_model;
    let mut dmerged = vec![T::zero(); n * d];
    linear_bwd(&cache.merged, w.w_proj, dy, Some(&mut dmerged), g.w_proj, g.b_proj, n, d, d);
    let mut dqkv = vec![T::zero(); n * 3 * d];
    attention_core_bwd(&cache.qkv, &cache.att, &dmerged, &mut dqkv, s);
    let mut dx = vec![T::zero(); n * d];
    linear_bwd(&cache.x, w.w_qkv, &dqkv, Some(&mut dx), g.w_qkv, g.b_qkv, n, d, 3 * d);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central differences of `f` at `x`, step `h`.
    fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = f(&xp);
                xp[i] = orig - h;
                let down = f(&xp);
                xp[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(rel_err(a, n) < tol || (a - n).abs() < 1e-9, "index {i}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn layernorm_known_values() {
        let mut y = [0.0f64; 3];
        layernorm_fwd(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-12, &mut y, 3);
        let expect = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut z = [1.0; 4];
        layernorm_fwd(&[5.0; 4], &[2.0; 4], &[0.0; 4], LN_EPS, &mut z, 4);
        assert_eq!(z, [0.0; 4]);
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let d = 8;
        let x = randn(2 * d, 1);
        let gamma = randn(d, 2);
        let beta = randn(d, 3);
        let up = randn(2 * d, 4);
        let loss = |x: &[f64], gamma: &[f64], beta: &[f64]| {
            let mut y = vec![0.0; x.len()];
            layernorm_fwd(x, gamma, beta, LN_EPS, &mut y, d);
            y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = vec![0.0; 2 * d];
        let cache = layernorm_fwd(&x, &gamma, &beta, LN_EPS, &mut y, d);
        let (mut dx, mut dg, mut db) = (vec![0.0; 2 * d], vec![0.0; d], vec![0.0; d]);
        layernorm_bwd(&x, &gamma, &cache, &up, &mut dx, &mut dg, &mut db, d);
        assert_close(&dx, &numeric_grad(&x, 1e-5, |v| loss(v, &gamma, &beta)), 1e-6);
        assert_close(&dg, &numeric_grad(&gamma, 1e-5, |v| loss(&x, v, &beta)), 1e-6);
        assert_close(&db, &numeric_grad(&beta, 1e-5, |v| loss(&x, &gamma, v)), 1e-6);
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let x = randn(32, 5);
        let up = randn(32, 6);
        let mut dx = vec![0.0; 32];
        gelu_bwd(&x, &up, &mut dx);
        let num = numeric_grad(&x, 1e-5, |v| {
            let mut y = vec![0.0; v.len()];
            gelu_fwd(v, &mut y);
            y.iter().zip(&up).map(|(a, b)| a * b).sum()
        });
        assert_close(&dx, &num, 1e-6);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let (n, di, d_out) = (3, 4, 5);
        let x = randn(n * di, 7);
        let w = randn(di * d_out, 8);
        let b = randn(d_out, 9);
        let up = randn(n * d_out, 10);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut y = vec![0.0; n * d_out];
            linear_fwd(x, w, Some(b), &mut y, n, di, d_out);
            y.iter().zip(&up).map(|(a, c)| a * c).sum::<f64>()
        };
        let (mut dx, mut dw, mut db) = (vec![0.0; n * di], vec![0.0; di * d_out], vec![0.0; d_out]);
        linear_bwd(&x, &w, &up, Some(&mut dx), &mut dw, Some(&mut db), n, di, d_out);
        assert_close(&dx, &numeric_grad(&x, 1e-5, |v| loss(v, &w, &b)), 1e-6);
        assert_close(&dw, &numeric_grad(&w, 1e-5, |v| loss(&x, v, &b)), 1e-6);
        assert_close(&db, &numeric_grad(&b, 1e-5, |v| loss(&x, &w, v)), 1e-6);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0f64, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        for t in [0.1, 1.0, 7.0] {
            assert_eq!(softmax(&[3.0f64, f64::NEG_INFINITY], t).unwrap(), vec![1.0, 0.0]);
        }
        assert!(matches!(softmax(&[f64::NEG_INFINITY; 3], 1.0), Err(Error::EmptySupport)));
        assert!(softmax(&[1.0f64], 0.0).is_err());
    }

    fn attn_setup(s: AttnShape, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = s.d_model;
        let x = randn(s.batch * s.seq * d, seed);
        let wq: Vec<f64> = randn(d * 3 * d, seed + 1).iter().map(|v| v * 0.3).collect();
        let bq = randn(3 * d, seed + 2);
        let wp: Vec<f64> = randn(d * d, seed + 3).iter().map(|v| v * 0.3).collect();
        let bp = randn(d, seed + 4);
        (x, wq, bq, wp, bp)
    }

    #[test]
    fn single_position_attention_is_projected_value() {
        let s = AttnShape { batch: 1, seq: 1, d_model: 4, n_head: 2 };
        let (x, wq, bq, wp, bp) = attn_setup(s, 20);
        let w = AttentionWeights { w_qkv: &wq, b_qkv: Some(&bq), w_proj: &wp, b_proj: Some(&bp) };
        let (y, cache) = causal_attention_fwd(&x, &w, s).unwrap();
        let v = &cache.qkv[8..12];
        let mut expect = vec![0.0; 4];
        linear_fwd(v, &wp, Some(&bp), &mut expect, 1, 4, 4);
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let s = AttnShape { batch: 1, seq: 5, d_model: 4, n_head: 1 };
        let qkv: Vec<f64> = (0..5).flat_map(|i| {
            let mut row = vec![0.3, -0.2, 0.9, 0.1];
            row.extend([1.0, 2.0, -1.0, 0.5]);
            row.extend([i as f64; 4]);
            row
        }).collect();
        let mut y = vec![0.0; 20];
        let att = attention_core_fwd(&qkv, &mut y, s);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((att[i * 5 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let s = AttnShape { batch: 2, seq: 4, d_model: 8, n_head: 2 };
        let (x, wq, bq, wp, bp) = attn_setup(s, 30);
        let up = randn(s.batch * s.seq * 8, 40);
        let loss = |x: &[f64], wq: &[f64], bq: &[f64], wp: &[f64], bp: &[f64]| {
            let w = AttentionWeights { w_qkv: wq, b_qkv: Some(bq), w_proj: wp, b_proj: Some(bp) };
            let (y, _) = causal_attention_fwd(x, &w, s).unwrap();
            y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let w = AttentionWeights { w_qkv: &wq, b_qkv: Some(&bq), w_proj: &wp, b_proj: Some(&bp) };
        let (_, cache) = causal_attention_fwd(&x, &w, s).unwrap();
        let (mut gwq, mut gbq, mut gwp, mut gbp) = (vec![0.0; wq.len()], vec![0.0; 24], vec![0.0; 64], vec![0.0; 8]);
        let g = AttentionGrads { w_qkv: &mut gwq, b_qkv: Some(&mut gbq), w_proj: &mut gwp, b_proj: Some(&mut gbp) };
        let dx = causal_attention_bwd(&cache, &w, &up, g, s);
        let h = 1e-5;
        assert_close(&dx, &numeric_grad(&x, h, |v| loss(v, &wq, &bq, &wp, &bp)), 1e-4);
        assert_close(&gwq, &numeric_grad(&wq, h, |v| loss(&x, v, &bq, &wp, &bp)), 1e-4);
        assert_close(&gbq, &numeric_grad(&bq, h, |v| loss(&x, &wq, v, &wp, &bp)), 1e-4);
        assert_close(&gwp, &numeric_grad(&wp, h, |v| loss(&x, &wq, &bq, v, &bp)), 1e-4);
        assert_close(&gbp, &numeric_grad(&bp, h, |v| loss(&x, &wq, &bq, &wp, v)), 1e-4);
    }

    #[test]
    fn attention_is_causal() {
        let s = AttnShape { batch: 1, seq: 6, d_model: 8, n_head: 2 };
        let (x, wq, bq, wp, bp) = attn_setup(s, 50);
        let w = AttentionWeights { w_qkv: &wq, b_qkv: Some(&bq), w_proj: &wp, b_proj: Some(&bp) };
        let (y0, _) = causal_attention_fwd(&x, &w, s).unwrap();
        for t in 1..6 {
            let mut x2 = x.clone();
            for v in &mut x2[t * 8..(t + 1) * 8] {
                *v += 3.7;
            }
            let (y1, _) = causal_attention_fwd(&x2, &w, s).unwrap();
            assert_eq!(&y0[..t * 8], &y1[..t * 8], "position {t} leaked backwards");
        }
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let s = AttnShape { batch: 1, seq: 2, d_model: 6, n_head: 4 };
        let z = vec![0.0f64; 200];
        let w = AttentionWeights { w_qkv: &z[..108], b_qkv: None, w_proj: &z[..36], b_proj: None };
        assert!(causal_attention_fwd(&z[..12], &w, s).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 1..40), c in -50.0f64..50.0, t in 0.05f64..5.0) {
            let a = softmax(&v, t).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted, t).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
