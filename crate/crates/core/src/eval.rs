//! Held-out metrics: per-language perplexity, temperature sweep, ranking
//! metrics and isotropy, gathered into a [`MetricsReport`].

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis;
use crate::corpus::{sequential_blocks, token_language, Language, TokenStream, Vocab};
use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::model::{self, ModelParams};

/// Blocks per forward call during evaluation.
const EVAL_BATCH: usize = 16;

/// `T ∈ {0.02, 0.03, …, 2.00}`.
pub fn default_grid() -> Vec<f64> {
    (2..=200).map(|k| k as f64 / 100.0).collect()
}

/// Logits for every target position of a stream, computed once.
#[derive(Clone, Debug)]
pub struct ValLogits {
    pub vocab: usize,
    pub base_size: usize,
    pub targets: Vec<u16>,
    pub logits: Vec<f32>,
}

impl ValLogits {
    /// One deterministic pass over non-overlapping blocks of `stream`.
    pub fn collect<T: Scalar>(params: &ModelParams<T>, stream: &TokenStream) -> Result<Self> {
        let cfg = &params.config;
        let v = cfg.vocab_size;
        let blocks = sequential_blocks(stream, cfg.block_size);
        let mut targets = Vec::with_capacity(stream.len());
        let mut logits = Vec::with_capacity(stream.len() * v);
        let mut i = 0;
        while i < blocks.len() {
            let len = blocks[i].1;
            let mut j = i;
            while j < blocks.len() && j - i < EVAL_BATCH && blocks[j].1 == len {
                j += 1;
            }
            let mut inputs = Vec::with_capacity((j - i) * len);
            for &(start, _) in &blocks[i..j] {
                inputs.extend_from_slice(&stream.ids[start..start + len]);
                targets.extend_from_slice(&stream.ids[start + 1..start + 1 + len]);
            }
            let (out, _) = model::forward::<T, rand_chacha::ChaCha8Rng>(params, &inputs, j - i, len, None)?;
            logits.extend(out.iter().map(|x| x.as_f64() as f32));
            i = j;
        }
        Ok(ValLogits { vocab: v, base_size: stream.base_size, targets, logits })
    }

    fn row(&self, t: usize) -> &[f32] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }

    /// Positions whose target belongs to `lang`.
    pub fn positions(&self, lang: Language) -> Vec<usize> {
        (0..self.targets.len())
            .filter(|&t| token_language(self.targets[t] as usize, self.base_size).ok() == Some(lang))
            .collect()
    }

    fn language_positions(&self, lang: Language) -> Result<Vec<usize>> {
        let pos = self.positions(lang);
        if pos.is_empty() {
            Err(Error::NoPositions(lang))
        } else {
            Ok(pos)
        }
    }

    /// Mean NLL and perplexity of `P_T` over the positions of `lang`.
    pub fn nll(&self, lang: Language, temperature: f64) -> Result<(f64, f64)> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let pos = self.language_positions(lang)?;
        let nll = self.mean_nll(&pos, temperature);
        Ok((nll, nll.exp()))
    }

    fn mean_nll(&self, pos: &[usize], temperature: f64) -> f64 {
        let inv = 1.0 / temperature;
        let per: Vec<f64> = pos
            .par_iter()
            .map(|&t| {
                let row = self.row(t);
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let sum: f64 = row.iter().map(|&z| ((z as f64 - max) * inv).exp()).sum();
                sum.ln() - (row[self.targets[t] as usize] as f64 - max) * inv
            })
            .collect();
        per.iter().sum::<f64>() / pos.len() as f64
    }

    /// Lowest perplexity over `grid` and the temperature attaining it;
    /// ties go to the smaller temperature.
    pub fn temperature_sweep(&self, lang: Language, grid: &[f64]) -> Result<(f64, f64)> {
        if grid.is_empty() || grid.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidArgument("temperature grid must be nonempty and positive".into()));
        }
        let pos = self.language_positions(lang)?;
        let mut best = (f64::INFINITY, f64::INFINITY);
        for &t in grid {
            let ppl = self.mean_nll(&pos, t).exp();
            if ppl < best.0 || (ppl == best.0 && t < best.1) {
                best = (ppl, t);
            }
        }
        Ok(best)
    }

    /// Accuracy, recall@5 and mean reciprocal rank over the positions of `lang`.
    pub fn ranking(&self, lang: Language) -> Result<Ranking> {
        let pos = self.language_positions(lang)?;
        let ranks: Vec<usize> = pos.iter().map(|&t| target_rank(self.row(t), self.targets[t] as usize)).collect();
        Ok(Ranking::from_ranks(&ranks))
    }
}

/// `1 + #{j : z_j > z_x} + #{j < x : z_j = z_x}`.
pub fn target_rank<T: PartialOrd>(logits: &[T], target: usize) -> usize {
    let zt = &logits[target];
    1 + logits.iter().enumerate().filter(|&(j, z)| z > zt || (j < target && z == zt)).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ranking {
    pub accuracy: f64,
    pub recall_at_5: f64,
    pub mrr: f64,
}

impl Ranking {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len() as f64;
        Ranking {
            accuracy: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
            recall_at_5: ranks.iter().filter(|&&r| r <= 5).count() as f64 / n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        }
    }
}

/// Mean NLL and perplexity at `temperature` over `lang` positions.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, stream: &TokenStream, lang: Language, temperature: f64) -> Result<(f64, f64)> {
    ValLogits::collect(params, stream)?.nll(lang, temperature)
}

pub fn temperature_sweep<T: Scalar>(params: &ModelParams<T>, stream: &TokenStream, lang: Language, grid: &[f64]) -> Result<(f64, f64)> {
    ValLogits::collect(params, stream)?.temperature_sweep(lang, grid)
}

pub fn ranking_metrics<T: Scalar>(params: &ModelParams<T>, stream: &TokenStream, lang: Language) -> Result<Ranking> {
    ValLogits::collect(params, stream)?.ranking(lang)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LanguageMetrics {
    pub language: Language,
    pub ppl: f64,
    pub ppl_best: f64,
    pub t_best: f64,
    pub accuracy: f64,
    pub recall_at_5: f64,
    pub mrr: f64,
    pub isotropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<LanguageMetrics>,
}

impl MetricsReport {
    /// Full metrics for every language with validation positions.
    pub fn compute<T: Scalar>(params: &ModelParams<T>, val: &TokenStream, vocab: &Vocab, grid: &[f64]) -> Result<Self> {
        let logits = ValLogits::collect(params, val)?;
        let d = params.config.n_embd;
        let w: Vec<f64> = params.wte.matrix().iter().map(|x| x.as_f64()).collect();
        let mut rows = Vec::new();
        for lang in Language::BOTH {
            if logits.positions(lang).is_empty() {
                continue;
            }
            let (_, ppl) = logits.nll(lang, 1.0)?;
            let (ppl_best, t_best) = logits.temperature_sweep(lang, grid)?;
            let r = logits.ranking(lang)?;
            let rows_w = analysis::language_rows(&w, vocab, d, lang)?;
            let isotropy = analysis::isotropy(&rows_w, vocab.base_size(), d)?;
            rows.push(LanguageMetrics {
                language: lang,
                ppl,
                ppl_best,
                t_best,
                accuracy: r.accuracy,
                recall_at_5: r.recall_at_5,
                mrr: r.mrr,
                isotropy,
            });
        }
        if rows.is_empty() {
            return Err(Error::NoPositions(Language::High));
        }
        Ok(MetricsReport { rows })
    }

    pub fn get(&self, lang: Language) -> Option<&LanguageMetrics> {
        self.rows.iter().find(|r| r.language == lang)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<4} {:>9} {:>16} {:>9} {:>9} {:>9} {:>8}", "lang", "PPL", "PPL_best (T)", "Acc", "R@5", "MRR", "I(W)");
        for r in &self.rows {
            let best = format!("{:.2} ({:.2})", r.ppl_best, r.t_best);
            let _ = writeln!(
                s,
                "{:<4} {:>9.2} {:>16} {:>9.4} {:>9.4} {:>9.4} {:>8.4}",
                r.language.tag(),
                r.ppl,
                best,
                r.accuracy,
                r.recall_at_5,
                r.mrr,
                r.isotropy
            );
        }
        s
    }
}
