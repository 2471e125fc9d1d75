//! Margin bounds for nucleus and min-p sampling, and empirical estimates of
//! the margin an embedding matrix already provides.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::float::mat;
use crate::kernels::{layernorm_fwd, LN_EPS};

/// `T · ln((N − 1) · top_p / (1 − top_p))`: tokens this far below the target
/// logit fall outside the `top_p` nucleus at temperature `T`.
pub fn margin_for_nucleus(n: usize, top_p: f64, temperature: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument("vocabulary size must be at least 2".into()));
    }
    if !(top_p > 0.0 && top_p < 1.0) {
        return Err(Error::InvalidArgument(format!("top_p {top_p} outside (0, 1)")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    Ok(temperature * ((n - 1) as f64 * top_p / (1.0 - top_p)).ln())
}

/// `T · |ln p_base|`.
pub fn margin_for_min_p(temperature: f64, p_base: f64) -> Result<f64> {
    if !(p_base > 0.0 && p_base <= 1.0) {
        return Err(Error::InvalidArgument(format!("p_base {p_base} outside (0, 1]")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    Ok(temperature * p_base.ln().abs())
}

/// Membership mask of the top-`top_p` nucleus: the most probable tokens,
/// taken in descending order (ties by smaller id) until their cumulative
/// probability exceeds `top_p`.
pub fn nucleus_set(probs: &[f64], top_p: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut inside = vec![false; probs.len()];
    let mut cum = 0.0;
    for i in order {
        inside[i] = true;
        cum += probs[i];
        if cum > top_p {
            break;
        }
    }
    inside
}

/// Inclusive linear-interpolation percentile of an ascending slice, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    pub margins: Vec<f64>,
    pub mean_margin: f64,
    pub alphas: Vec<f64>,
    pub mean_alpha: f64,
    pub percentile: f64,
    pub d_model: usize,
    pub n: usize,
}

#[derive(Serialize)]
struct CalibrationRow {
    token_id: usize,
    margin: f64,
    alpha: f64,
}

impl CalibrationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (token_id, (&margin, &alpha)) in self.margins.iter().zip(&self.alphas).enumerate() {
            w.serialize(CalibrationRow { token_id, margin, alpha })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "N = {}, d_model = {}, percentile = {}\nmean margin = {:.4} (margin/d = {:.5})\nmean alpha  = {:.4}\n",
            self.n,
            self.d_model,
            self.percentile,
            self.mean_margin,
            self.mean_margin / self.d_model as f64,
            self.mean_alpha
        )
    }
}

/// For each token `i`, the `percentile` of `⟨h_t, w_t − w_i⟩` over all other
/// tokens `t`, where `h_t` is the layer norm of `w_t` with gain `gamma` and
/// zero bias. `α_i` is the same statistic after dividing each score by
/// `‖h_t‖·‖w_t‖`.
pub fn estimate_effective_margin(w: &[f64], n: usize, d: usize, gamma: &[f64], q: f64) -> Result<CalibrationReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 embedding rows".into()));
    }
    if w.len() != n * d || gamma.len() != d {
        return Err(Error::Shape(format!("{} values for {n}×{d}, gain of length {}", w.len(), gamma.len())));
    }
    let mut h = vec![0.0; n * d];
    layernorm_fwd(w, gamma, &vec![0.0; d], LN_EPS, &mut h, d);
    // s[t][i] = ⟨h_t, w_i⟩
    let mut s = vec![0.0; n * n];
    mat::matmul_nt(&h, w, &mut s, n, d, n, false);
    let scale: Vec<f64> = (0..n).map(|t| mat::norm(&h[t * d..(t + 1) * d]) * mat::norm(&w[t * d..(t + 1) * d])).collect();

    let per_token: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut raw = Vec::with_capacity(n - 1);
            let mut norm = Vec::with_capacity(n - 1);
            for t in (0..n).filter(|&t| t != i) {
                let score = s[t * n + t] - s[t * n + i];
                raw.push(score);
                norm.push(if scale[t] > 0.0 { score / scale[t] } else { 0.0 });
            }
            raw.sort_by(f64::total_cmp);
            norm.sort_by(f64::total_cmp);
            (percentile(&raw, q), percentile(&norm, q))
        })
        .collect();
    let margins: Vec<f64> = per_token.iter().map(|p| p.0).collect();
    let alphas: Vec<f64> = per_token.iter().map(|p| p.1).collect();
    Ok(CalibrationReport {
        mean_margin: margins.iter().sum::<f64>() / n as f64,
        mean_alpha: alphas.iter().sum::<f64>() / n as f64,
        margins,
        alphas,
        percentile: q,
        d_model: d,
        n,
    })
}

/// Writes `"N d\n"` followed by `N·d` little-endian `f32` values.
pub fn write_matrix(path: &Path, w: &[f32], n: usize, d: usize) -> Result<()> {
    if w.len() != n * d {
        return Err(Error::Shape("matrix size".into()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{n} {d}")?;
    for &x in w {
        out.write_f32::<LittleEndian>(x)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the format of [`write_matrix`]; returns `(values, N, d)`.
pub fn read_matrix(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| Error::Format(format!("bad matrix header {header:?}"))))
        .collect::<Result<_>>()?;
    let [n, d] = dims[..] else {
        return Err(Error::Format(format!("bad matrix header {header:?}")));
    };
    let mut w = vec![0f32; n * d];
    r.read_f32_into::<LittleEndian>(&mut w)
        .map_err(|_| Error::Format(format!("matrix body shorter than {n}×{d}")))?;
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Format("trailing bytes after matrix body".into()));
    }
    Ok((w, n, d))
}
