//! Embedding-geometry analyses: isotropy, cosine structure by character
//! category, nearest neighbours and PCA.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::corpus::{Language, Vocab};
use crate::error::{Error, Result};
use crate::float::mat;
use crate::linalg::{gram, symmetric_eigen};

/// `I(W) = min_c Z(c) / max_c Z(c)` with `Z(c) = Σ_i exp(⟨c, w_i⟩)` and `c`
/// ranging over ± each unit eigenvector of `WᵀW`.
pub fn isotropy(w: &[f64], rows: usize, dim: usize) -> Result<f64> {
    if rows < 2 || w.len() != rows * dim {
        return Err(Error::InvalidArgument(format!("isotropy needs at least 2 rows of width {dim}")));
    }
    let eig = symmetric_eigen(&gram(w, rows, dim), dim)?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for c in &eig.vectors {
        for sign in [1.0, -1.0] {
            let z: f64 = w.chunks_exact(dim).map(|row| (sign * mat::dot(c, row)).exp()).sum();
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    Ok(lo / hi)
}

/// Row-major `rows×rows` cosine similarities. Zero rows have cosine 0 with everything.
pub fn cosine_matrix(w: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let norms: Vec<f64> = w.chunks_exact(dim).map(mat::norm).collect();
    let mut g = vec![0.0; rows * rows];
    mat::matmul_nt(w, w, &mut g, rows, dim, rows, false);
    for i in 0..rows {
        for j in 0..rows {
            let d = norms[i] * norms[j];
            g[i * rows + j] = if d > 0.0 { g[i * rows + j] / d } else { 0.0 };
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Category {
    #[serde(rename = "NA")]
    NonAlpha,
    #[serde(rename = "UC")]
    Upper,
    #[serde(rename = "LC")]
    Lower,
    #[serde(rename = "ID")]
    Identity,
    #[serde(rename = "T")]
    Translation,
    #[serde(rename = "C")]
    Case,
    #[serde(rename = "T+C")]
    TranslationCase,
    #[serde(rename = "none")]
    Unrelated,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::NonAlpha,
        Category::Upper,
        Category::Lower,
        Category::Identity,
        Category::Translation,
        Category::Case,
        Category::TranslationCase,
        Category::Unrelated,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::NonAlpha => "NA",
            Category::Upper => "UC",
            Category::Lower => "LC",
            Category::Identity => "ID",
            Category::Translation => "T",
            Category::Case => "C",
            Category::TranslationCase => "T+C",
            Category::Unrelated => "none",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// ASCII letter class of a character.
pub fn char_class(c: char) -> Category {
    if c.is_ascii_uppercase() {
        Category::Upper
    } else if c.is_ascii_lowercase() {
        Category::Lower
    } else {
        Category::NonAlpha
    }
}

/// Category of the token pair `(i, j)`.
pub fn pair_category(vocab: &Vocab, i: usize, j: usize) -> Result<Category> {
    let (ci, cj) = (vocab.char_of(i)?, vocab.char_of(j)?);
    let same_lang = vocab.language(i)? == vocab.language(j)?;
    let case_pair = ci != cj && ci.is_ascii_alphabetic() && ci.eq_ignore_ascii_case(&cj);
    Ok(if i == j {
        Category::Identity
    } else if ci == cj {
        Category::Translation
    } else if case_pair {
        if same_lang {
            Category::Case
        } else {
            Category::TranslationCase
        }
    } else if same_lang && char_class(ci) == char_class(cj) {
        char_class(ci)
    } else {
        Category::Unrelated
    })
}

/// Row-major `V×V` category matrix.
pub fn cluster_mask(vocab: &Vocab) -> Vec<Category> {
    let v = vocab.total_size();
    let mut out = Vec::with_capacity(v * v);
    for i in 0..v {
        for j in 0..v {
            out.push(pair_category(vocab, i, j).expect("ids below total_size"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryScore {
    pub category: Category,
    pub pairs: usize,
    pub mean_cosine: f64,
}

/// Mean cosine similarity over the ordered pairs of every category present.
pub fn cluster_mask_scores(w: &[f64], vocab: &Vocab, dim: usize) -> Result<Vec<CategoryScore>> {
    let v = vocab.total_size();
    if w.len() != v * dim {
        return Err(Error::Shape(format!("embedding has {} values, expected {v}×{dim}", w.len())));
    }
    let cos = cosine_matrix(w, v, dim);
    let mask = cluster_mask(vocab);
    let mut sums = [(0usize, 0.0f64); 8];
    for (k, &c) in mask.iter().enumerate() {
        let slot = Category::ALL.iter().position(|&x| x == c).expect("listed");
        sums[slot].0 += 1;
        sums[slot].1 += cos[k];
    }
    Ok(Category::ALL
        .iter()
        .zip(sums)
        .filter(|(_, (n, _))| *n > 0)
        .map(|(&category, (pairs, s))| CategoryScore { category, pairs, mean_cosine: s / pairs as f64 })
        .collect())
}

/// The `k` most cosine-similar other rows, descending, ties by smaller id.
pub fn top_k_neighbors(w: &[f64], rows: usize, dim: usize, token: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if token >= rows {
        return Err(Error::TokenOutOfRange { id: token, limit: rows });
    }
    if k >= rows {
        return Err(Error::InvalidArgument(format!("k = {k} must be below the vocabulary size {rows}")));
    }
    let q = &w[token * dim..(token + 1) * dim];
    let qn = mat::norm(q);
    let mut scored: Vec<(usize, f64)> = (0..rows)
        .filter(|&i| i != token)
        .map(|i| {
            let r = &w[i * dim..(i + 1) * dim];
            let d = qn * mat::norm(r);
            (i, if d > 0.0 { mat::dot(q, r) / d } else { 0.0 })
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Clone, Debug)]
pub struct Pca {
    /// `rows×dims` coordinates.
    pub coords: Vec<f64>,
    pub dims: usize,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
}

/// Projects mean-centred rows onto the top `dims` principal axes. Each axis
/// is signed so that its largest-magnitude entry is positive.
pub fn pca_project(w: &[f64], rows: usize, dim: usize, dims: usize) -> Result<Pca> {
    if dims == 0 || dims > dim || rows == 0 || w.len() != rows * dim {
        return Err(Error::InvalidArgument(format!("cannot project {rows}×{dim} onto {dims} components")));
    }
    let mut mean = vec![0.0; dim];
    for row in w.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x / rows as f64;
        }
    }
    let centred: Vec<f64> = w.chunks_exact(dim).flat_map(|r| r.iter().zip(&mean).map(|(x, m)| x - m)).collect();
    let mut cov = gram(&centred, rows, dim);
    let denom = (rows.max(2) - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    let eig = symmetric_eigen(&cov, dim)?;
    let axes: Vec<Vec<f64>> = eig.vectors[..dims]
        .iter()
        .map(|v| {
            let big = v.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            if big < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v.clone()
            }
        })
        .collect();
    let coords = centred.chunks_exact(dim).flat_map(|r| axes.iter().map(move |a| mat::dot(r, a))).collect();
    Ok(Pca { coords, dims, variances: eig.values[..dims].iter().map(|v| v.max(0.0)).collect() })
}

/// Rows of `w` belonging to `lang`.
pub fn language_rows(w: &[f64], vocab: &Vocab, dim: usize, lang: Language) -> Result<Vec<f64>> {
    let n = vocab.base_size();
    match lang {
        Language::High => Ok(w[..n * dim].to_vec()),
        Language::Low if vocab.is_bilingual() => Ok(w[n * dim..2 * n * dim].to_vec()),
        Language::Low => Err(Error::NoPositions(Language::Low)),
    }
}

#[derive(Serialize)]
struct PcaRow<'a> {
    token_id: usize,
    label: &'a str,
    language: Language,
    pc1: f64,
    pc2: f64,
}

pub fn write_pca_csv(path: &Path, pca: &Pca, vocab: &Vocab) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    for (i, c) in pca.coords.chunks_exact(pca.dims).enumerate() {
        let label = vocab.label(i);
        out.serialize(PcaRow {
            token_id: i,
            label: &label,
            language: vocab.language(i)?,
            pc1: c[0],
            pc2: c.get(1).copied().unwrap_or(0.0),
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Square matrix CSV with token labels as the header row and first column.
pub fn write_cosine_csv(path: &Path, cos: &[f64], vocab: &Vocab) -> Result<()> {
    let v = vocab.total_size();
    let mut out = csv::Writer::from_path(path)?;
    let labels: Vec<String> = (0..v).map(|i| vocab.label(i)).collect();
    out.write_record(std::iter::once("token".to_string()).chain(labels.iter().cloned()))?;
    for i in 0..v {
        out.write_record(std::iter::once(labels[i].clone()).chain((0..v).map(|j| format!("{:.6}", cos[i * v + j]))))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_mask_csv(path: &Path, mask: &[Category], vocab: &Vocab) -> Result<()> {
    let v = vocab.total_size();
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["i", "j", "category"])?;
    for i in 0..v {
        for j in 0..v {
            out.write_record([i.to_string(), j.to_string(), mask[i * v + j].label().to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn isotropy_hand_computed() {
        let i = isotropy(&[1.0, 0.0, 1.0, 0.0], 2, 2).unwrap();
        assert!((i - E.powi(-2)).abs() < 1e-12);
    }

    #[test]
    fn isotropy_of_identity_rows() {
        for d in [2usize, 5, 16] {
            let mut w = vec![0.0; d * d];
            for k in 0..d {
                w[k * d + k] = 1.0;
            }
            let expect = (1.0 / E + (d - 1) as f64) / (E + (d - 1) as f64);
            assert!((isotropy(&w, d, d).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropy_row_permutation_invariant() {
        let w: Vec<f64> = (0..5 * 3).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.3).collect();
        let mut p = w.clone();
        p.swap(0, 6);
        p.swap(1, 7);
        p.swap(2, 8);
        let (a, b) = (isotropy(&w, 5, 3).unwrap(), isotropy(&p, 5, 3).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0 && a <= 1.0);
    }

    fn abc_vocab() -> Vocab {
        Vocab::from_chars(vec!['A', 'a', 'B', 'b', '!', ' '], true).unwrap()
    }

    #[test]
    fn categories() {
        let v = abc_vocab();
        let n = v.base_size();
        let (a_up, a_lo, b_up) = (v.id('A').unwrap(), v.id('a').unwrap(), v.id('B').unwrap());
        let bang = v.id('!').unwrap();
        let space = v.id(' ').unwrap();
        assert_eq!(pair_category(&v, a_up, a_up + n).unwrap(), Category::Translation);
        assert_eq!(pair_category(&v, a_up, a_lo).unwrap(), Category::Case);
        assert_eq!(pair_category(&v, a_up, a_lo + n).unwrap(), Category::TranslationCase);
        assert_eq!(pair_category(&v, a_up, b_up).unwrap(), Category::Upper);
        assert_eq!(pair_category(&v, bang, space).unwrap(), Category::NonAlpha);
        assert_eq!(pair_category(&v, bang, space + n).unwrap(), Category::Unrelated);
        assert_eq!(pair_category(&v, a_up, b_up + n).unwrap(), Category::Unrelated);
        let mask = cluster_mask(&v);
        let t = v.total_size();
        for i in 0..t {
            for j in 0..t {
                assert_eq!(mask[i * t + j] == Category::Identity, i == j);
                assert_eq!(mask[i * t + j] == Category::Translation, i.abs_diff(j) == n);
            }
        }
    }

    #[test]
    fn category_scores() {
        let v = abc_vocab();
        let w: Vec<f64> = (0..12 * 4).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1 + 0.01).collect();
        let scores = cluster_mask_scores(&w, &v, 4).unwrap();
        let id = scores.iter().find(|s| s.category == Category::Identity).unwrap();
        assert!((id.mean_cosine - 1.0).abs() < 1e-12);
        assert_eq!(id.pairs, 12);
        let mono = Vocab::from_chars(vec!['A', 'a', 'B', 'b', '!', ' '], false).unwrap();
        let scores = cluster_mask_scores(&w[..6 * 4], &mono, 4).unwrap();
        assert!(scores.iter().all(|s| !matches!(s.category, Category::Translation | Category::TranslationCase)));
    }

    #[test]
    fn neighbours() {
        let w = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(top_k_neighbors(&w, 3, 2, 0, 1).unwrap(), vec![(1, 1.0)]);
        assert_eq!(top_k_neighbors(&w, 3, 2, 2, 2).unwrap(), vec![(0, 0.0), (1, 0.0)]);
        assert!(top_k_neighbors(&w, 3, 2, 0, 3).is_err());
    }

    #[test]
    fn pca_rotation_and_rank_one() {
        let w = [1.0, 2.0, -1.0, -2.0, 3.0, -0.5, -3.0, 0.5];
        let p = pca_project(&w, 4, 2, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((w[2 * i] - w[2 * j]).powi(2) + (w[2 * i + 1] - w[2 * j + 1]).powi(2)).sqrt();
                let c = &p.coords;
                let d1 = ((c[2 * i] - c[2 * j]).powi(2) + (c[2 * i + 1] - c[2 * j + 1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
        assert!(p.variances[0] >= p.variances[1]);
        let r1: Vec<f64> = (0..5).flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project(&r1, 5, 3, 2).unwrap();
        assert!(p.variances[1].abs() < 1e-10);
    }
}
