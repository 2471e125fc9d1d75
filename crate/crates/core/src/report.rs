//! Tables derived from a trained model and its gradient log, and the CSV
//! bundle written by `analyze`.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::analysis::{self, Category};
use crate::corpus::{Language, Vocab};
use crate::error::Result;
use crate::float::Scalar;
use crate::gradlog::GradLog;
use crate::model::ModelParams;

/// Query characters of the neighbor table.
pub const NEIGHBOR_QUERIES: [char; 2] = ['A', 'a'];
pub const NEIGHBOR_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenRatio {
    pub token_id: usize,
    pub label: String,
    pub language: Language,
    /// Occurrences in the training stream.
    pub count: u64,
    pub ratio_of_average: f64,
    pub average_of_ratio: f64,
}

/// Both gradient ratios for every token that received any gradient.
pub fn token_ratios(log: &GradLog, vocab: &Vocab, counts: &[u64]) -> Result<Vec<TokenRatio>> {
    let mut out = Vec::new();
    for token_id in 0..log.vocab.min(vocab.total_size()) {
        let (Ok(roa), Ok(aor)) = (log.ratio_of_average(token_id), log.average_of_ratio(token_id)) else {
            continue;
        };
        out.push(TokenRatio {
            token_id,
            label: vocab.label(token_id),
            language: vocab.language(token_id)?,
            count: counts.get(token_id).copied().unwrap_or(0),
            ratio_of_average: roa,
            average_of_ratio: aor,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct RatioRow<'a> {
    token_id: usize,
    label: &'a str,
    language: Language,
    count: u64,
    metric: &'static str,
    value: f64,
}

/// Long format: one row per (token, metric).
pub fn write_ratio_csv(path: &Path, ratios: &[TokenRatio]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in ratios {
        for (metric, value) in [("ratio_of_average", r.ratio_of_average), ("average_of_ratio", r.average_of_ratio)] {
            w.serialize(RatioRow { token_id: r.token_id, label: &r.label, language: r.language, count: r.count, metric, value })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Translation or capitalization relative of another token.
pub fn is_relative(c: Category) -> bool {
    matches!(c, Category::Translation | Category::Case | Category::TranslationCase)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighborRow {
    pub query: String,
    pub rank: usize,
    pub neighbor_id: usize,
    pub neighbor: String,
    pub cosine: f64,
    pub category: Category,
}

/// Top-[`NEIGHBOR_K`] cosine neighbors of `A` and `a` in each language.
/// Queries whose character is missing from the vocabulary are skipped.
pub fn neighbor_table(w: &[f64], vocab: &Vocab, dim: usize) -> Result<Vec<NeighborRow>> {
    let rows = vocab.total_size();
    let langs: &[Language] = if vocab.is_bilingual() { &Language::BOTH } else { &[Language::High] };
    let mut out = Vec::new();
    for &c in &NEIGHBOR_QUERIES {
        let Ok(base) = vocab.id(c) else { continue };
        for &lang in langs {
            let q = if lang == Language::Low { base + vocab.base_size() } else { base };
            for (rank, (j, cosine)) in analysis::top_k_neighbors(w, rows, dim, q, NEIGHBOR_K)?.into_iter().enumerate() {
                out.push(NeighborRow {
                    query: vocab.label(q),
                    rank: rank + 1,
                    neighbor_id: j,
                    neighbor: vocab.label(j),
                    cosine,
                    category: analysis::pair_category(vocab, q, j)?,
                });
            }
        }
    }
    Ok(out)
}

fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by [`write_bundle`].
#[derive(Clone, Debug, Default)]
pub struct BundleSummary {
    pub files: Vec<String>,
    pub relatives_in_neighbors: usize,
    pub neighbor_slots: usize,
    pub skipped_ratios: bool,
}

/// Writes the embedding analyses of `params`, plus gradient-ratio tables when
/// `grad_log` is given, into `dir`.
pub fn write_bundle<T: Scalar>(
    dir: &Path,
    params: &ModelParams<T>,
    vocab: &Vocab,
    grad_log: Option<&GradLog>,
    counts: &[u64],
    export_grad_log: bool,
) -> Result<BundleSummary> {
    fs::create_dir_all(dir)?;
    let d = params.config.n_embd;
    let v = vocab.total_size();
    let w: Vec<f64> = params.wte.matrix().iter().map(|x| x.as_f64()).collect();
    let mut s = BundleSummary::default();
    let mut done = |name: &str| s.files.push(name.to_string());

    analysis::write_cosine_csv(&dir.join("cosine.csv"), &analysis::cosine_matrix(&w, v, d), vocab)?;
    done("cosine.csv");
    analysis::write_mask_csv(&dir.join("mask.csv"), &analysis::cluster_mask(vocab), vocab)?;
    done("mask.csv");
    write_rows(&dir.join("mask_scores.csv"), &analysis::cluster_mask_scores(&w, vocab, d)?)?;
    done("mask_scores.csv");
    analysis::write_pca_csv(&dir.join("pca.csv"), &analysis::pca_project(&w, v, d, 2)?, vocab)?;
    done("pca.csv");
    let neighbors = neighbor_table(&w, vocab, d)?;
    write_rows(&dir.join("neighbors.csv"), &neighbors)?;
    done("neighbors.csv");

    match grad_log {
        Some(log) => {
            write_ratio_csv(&dir.join("ratios.csv"), &token_ratios(log, vocab, counts)?)?;
            done("ratios.csv");
            if export_grad_log {
                log.write_csv(&dir.join("grad_log.csv"))?;
                done("grad_log.csv");
            }
        }
        None => s.skipped_ratios = true,
    }
    s.neighbor_slots = neighbors.len();
    s.relatives_in_neighbors = neighbors.iter().filter(|r| is_relative(r.category)).count();
    Ok(s)
}
