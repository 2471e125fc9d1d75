//! GPT-2 style decoder with explicit backward.
//!
//! Pre-norm residual blocks, learned positional embeddings, 4× MLP, final
//! layer norm, and an output head that is either the token embedding matrix
//! itself (weight tying) or an independent matrix.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{lit, mat, Scalar};
use crate::loss::{self, AlphaNorms, LossOutput, LossSpec, LossVariant};
use crate::kernels::{self, AttentionCache, AttentionGrads, AttentionWeights, AttnShape, LayerNormCache, LN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub block_size: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub weight_tying: bool,
    pub separated_embeddings: bool,
    pub bias: bool,
}

impl Default for ModelConfig {
    /// [`ModelConfig::small`] with the vocabulary size left to the data.
    fn default() -> Self {
        Self::small(0)
    }
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128, context 64, tied, no dropout.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            block_size: 64,
            n_layer: 4,
            n_head: 4,
            n_embd: 128,
            vocab_size,
            dropout: 0.0,
            weight_tying: true,
            separated_embeddings: false,
            bias: true,
        }
    }

    /// 2 layers, width 16, context 8: the gradient-check configuration.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig { block_size: 8, n_layer: 2, n_head: 2, n_embd: 16, ..Self::small(vocab_size) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.n_embd % self.n_head != 0 {
            return Err(Error::Config(format!("n_embd {} not divisible by n_head {}", self.n_embd, self.n_head)));
        }
        if self.vocab_size == 0 || self.block_size == 0 || self.n_layer == 0 {
            return Err(Error::Config("vocab_size, block_size and n_layer must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config("vocab_size exceeds the 16-bit id range".into()));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, v) = (self.n_embd, self.vocab_size);
        let b = usize::from(self.bias);
        let per_layer = 2 * (d + b * d) // two layer norms
            + d * 3 * d + b * 3 * d
            + d * d + b * d
            + d * 4 * d + b * 4 * d
            + 4 * d * d + b * d;
        let head = if self.weight_tying { 0 } else { v * d };
        v * d + self.block_size * d + self.n_layer * per_layer + (d + b * d) + head
    }
}

/// Token embedding table, stored as one matrix or as independent rows.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingStorage<T> {
    Joint(Vec<T>),
    Separated(Vec<Vec<T>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub rows: usize,
    pub dim: usize,
    pub storage: EmbeddingStorage<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn from_matrix(data: Vec<T>, rows: usize, dim: usize, separated: bool) -> Self {
        assert_eq!(data.len(), rows * dim);
        let storage = if separated {
            EmbeddingStorage::Separated(data.chunks_exact(dim).map(<[T]>::to_vec).collect())
        } else {
            EmbeddingStorage::Joint(data)
        };
        Embedding { rows, dim, storage }
    }

    pub fn zeros(rows: usize, dim: usize, separated: bool) -> Self {
        Self::from_matrix(vec![T::zero(); rows * dim], rows, dim, separated)
    }

    pub fn is_separated(&self) -> bool {
        matches!(self.storage, EmbeddingStorage::Separated(_))
    }

    pub fn row(&self, i: usize) -> &[T] {
        match &self.storage {
            EmbeddingStorage::Joint(m) => &m[i * self.dim..(i + 1) * self.dim],
            EmbeddingStorage::Separated(rows) => &rows[i],
        }
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        match &mut self.storage {
            EmbeddingStorage::Joint(m) => &mut m[i * self.dim..(i + 1) * self.dim],
            EmbeddingStorage::Separated(rows) => &mut rows[i],
        }
    }

    /// Row-major `rows×dim` view; separated storage is stacked into a copy.
    pub fn matrix(&self) -> Cow<'_, [T]> {
        match &self.storage {
            EmbeddingStorage::Joint(m) => Cow::Borrowed(m),
            EmbeddingStorage::Separated(rows) => Cow::Owned(rows.concat()),
        }
    }

    pub fn add_matrix(&mut self, m: &[T]) {
        let d = self.dim;
        for i in 0..self.rows {
            for (a, &b) in self.row_mut(i).iter_mut().zip(&m[i * d..(i + 1) * d]) {
                *a += b;
            }
        }
    }
}

/// One transformer block. Bias vectors are empty when the config has `bias = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub w_qkv: Vec<T>,
    pub b_qkv: Vec<T>,
    pub w_attn_proj: Vec<T>,
    pub b_attn_proj: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w_fc: Vec<T>,
    pub b_fc: Vec<T>,
    pub w_mlp_proj: Vec<T>,
    pub b_mlp_proj: Vec<T>,
}

/// All trainable arrays. Gradients use the same type and layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub wte: Embedding<T>,
    pub wpe: Vec<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
    /// Output head when weight tying is off.
    pub lm_head: Option<Embedding<T>>,
    version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    /// 2-D weight matrix; receives weight decay.
    Matrix,
    /// Gain, bias or other 1-D vector; no weight decay.
    Vector,
    /// A single row of a separated embedding table (2-D weight, decayed).
    EmbeddingRow,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn decays(&self) -> bool {
        matches!(self.kind, TensorKind::Matrix | TensorKind::EmbeddingRow)
    }
}

fn embedding_tensors<'a, T: Scalar>(name: &str, e: &'a Embedding<T>, out: &mut Vec<(TensorInfo, &'a [T])>) {
    match &e.storage {
        EmbeddingStorage::Joint(m) => out.push((TensorInfo { name: name.into(), kind: TensorKind::Matrix }, m)),
        EmbeddingStorage::Separated(rows) => {
            for (i, r) in rows.iter().enumerate() {
                out.push((TensorInfo { name: format!("{name}.{i}"), kind: TensorKind::EmbeddingRow }, r));
            }
        }
    }
}

fn embedding_tensors_mut<'a, T: Scalar>(name: &str, e: &'a mut Embedding<T>, out: &mut Vec<(TensorInfo, &'a mut [T])>) {
    match &mut e.storage {
        EmbeddingStorage::Joint(m) => out.push((TensorInfo { name: name.into(), kind: TensorKind::Matrix }, m)),
        EmbeddingStorage::Separated(rows) => {
            for (i, r) in rows.iter_mut().enumerate() {
                out.push((TensorInfo { name: format!("{name}.{i}"), kind: TensorKind::EmbeddingRow }, r));
            }
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// GPT-2 initialisation: N(0, 0.02) matrices, residual projections scaled
    /// by `1/√(2·n_layer)`, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layer as f64).sqrt();
        let (d, v) = (config.n_embd, config.vocab_size);
        let bias = |n: usize| if config.bias { vec![T::zero(); n] } else { Vec::new() };
        let mut normal = |n: usize, s: f64| -> Vec<T> {
            let dist = Normal::new(0.0, s).expect("finite std");
            (0..n).map(|_| lit(dist.sample(&mut rng))).collect()
        };
        let wte = Embedding::from_matrix(normal(v * d, std), v, d, config.separated_embeddings);
        let wpe = normal(config.block_size * d, std);
        let mut blocks = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            blocks.push(Block {
                ln1_g: vec![T::one(); d],
                ln1_b: bias(d),
                w_qkv: normal(d * 3 * d, std),
                b_qkv: bias(3 * d),
                w_attn_proj: normal(d * d, proj_std),
                b_attn_proj: bias(d),
                ln2_g: vec![T::one(); d],
                ln2_b: bias(d),
                w_fc: normal(d * 4 * d, std),
                b_fc: bias(4 * d),
                w_mlp_proj: normal(4 * d * d, proj_std),
                b_mlp_proj: bias(d),
            });
        }
        let lm_head = (!config.weight_tying)
            .then(|| Embedding::from_matrix(normal(v * d, std), v, d, config.separated_embeddings));
        Ok(ModelParams {
            config: config.clone(),
            wte,
            wpe,
            blocks,
            lnf_g: vec![T::one(); d],
            lnf_b: bias(d),
            lm_head,
            version: 0,
        })
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z.version = 0;
        z
    }

    /// Every tensor in declaration order.
    pub fn tensors(&self) -> Vec<(TensorInfo, &[T])> {
        let mut out = Vec::new();
        embedding_tensors("wte", &self.wte, &mut out);
        out.push((TensorInfo { name: "wpe".into(), kind: TensorKind::Matrix }, &self.wpe[..]));
        for (l, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, TensorKind, &Vec<T>); 12] = [
                ("ln1_g", TensorKind::Vector, &b.ln1_g),
                ("ln1_b", TensorKind::Vector, &b.ln1_b),
                ("w_qkv", TensorKind::Matrix, &b.w_qkv),
                ("b_qkv", TensorKind::Vector, &b.b_qkv),
                ("w_attn_proj", TensorKind::Matrix, &b.w_attn_proj),
                ("b_attn_proj", TensorKind::Vector, &b.b_attn_proj),
                ("ln2_g", TensorKind::Vector, &b.ln2_g),
                ("ln2_b", TensorKind::Vector, &b.ln2_b),
                ("w_fc", TensorKind::Matrix, &b.w_fc),
                ("b_fc", TensorKind::Vector, &b.b_fc),
                ("w_mlp_proj", TensorKind::Matrix, &b.w_mlp_proj),
                ("b_mlp_proj", TensorKind::Vector, &b.b_mlp_proj),
            ];
            for (name, kind, data) in fields {
                if !data.is_empty() {
                    out.push((TensorInfo { name: format!("h.{l}.{name}"), kind }, &data[..]));
                }
            }
        }
        out.push((TensorInfo { name: "ln_f.g".into(), kind: TensorKind::Vector }, &self.lnf_g[..]));
        if !self.lnf_b.is_empty() {
            out.push((TensorInfo { name: "ln_f.b".into(), kind: TensorKind::Vector }, &self.lnf_b[..]));
        }
        if let Some(head) = &self.lm_head {
            embedding_tensors("lm_head", head, &mut out);
        }
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(TensorInfo, &mut [T])> {
        let mut out = Vec::new();
        embedding_tensors_mut("wte", &mut self.wte, &mut out);
        out.push((TensorInfo { name: "wpe".into(), kind: TensorKind::Matrix }, &mut self.wpe[..]));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let fields: [(&str, TensorKind, &mut Vec<T>); 12] = [
                ("ln1_g", TensorKind::Vector, &mut b.ln1_g),
                ("ln1_b", TensorKind::Vector, &mut b.ln1_b),
                ("w_qkv", TensorKind::Matrix, &mut b.w_qkv),
                ("b_qkv", TensorKind::Vector, &mut b.b_qkv),
                ("w_attn_proj", TensorKind::Matrix, &mut b.w_attn_proj),
                ("b_attn_proj", TensorKind::Vector, &mut b.b_attn_proj),
                ("ln2_g", TensorKind::Vector, &mut b.ln2_g),
                ("ln2_b", TensorKind::Vector, &mut b.ln2_b),
                ("w_fc", TensorKind::Matrix, &mut b.w_fc),
                ("b_fc", TensorKind::Vector, &mut b.b_fc),
                ("w_mlp_proj", TensorKind::Matrix, &mut b.w_mlp_proj),
                ("b_mlp_proj", TensorKind::Vector, &mut b.b_mlp_proj),
            ];
            for (name, kind, data) in fields {
                if !data.is_empty() {
                    out.push((TensorInfo { name: format!("h.{l}.{name}"), kind }, &mut data[..]));
                }
            }
        }
        out.push((TensorInfo { name: "ln_f.g".into(), kind: TensorKind::Vector }, &mut self.lnf_g[..]));
        if !self.lnf_b.is_empty() {
            out.push((TensorInfo { name: "ln_f.b".into(), kind: TensorKind::Vector }, &mut self.lnf_b[..]));
        }
        if let Some(head) = &mut self.lm_head {
            embedding_tensors_mut("lm_head", head, &mut out);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// The matrix whose rows score each vocabulary entry.
    pub fn head(&self) -> &Embedding<T> {
        self.lm_head.as_ref().unwrap_or(&self.wte)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Records that the values changed; outstanding forward caches become stale.
    pub fn mark_updated(&mut self) {
        self.version = self.version.wrapping_add(1);
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        let conv_emb = |e: &Embedding<T>| Embedding {
            rows: e.rows,
            dim: e.dim,
            storage: match &e.storage {
                EmbeddingStorage::Joint(m) => EmbeddingStorage::Joint(conv(m)),
                EmbeddingStorage::Separated(rows) => EmbeddingStorage::Separated(rows.iter().map(conv).collect()),
            },
        };
        ModelParams {
            config: self.config.clone(),
            wte: conv_emb(&self.wte),
            wpe: conv(&self.wpe),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: conv(&b.ln1_g),
                    ln1_b: conv(&b.ln1_b),
                    w_qkv: conv(&b.w_qkv),
                    b_qkv: conv(&b.b_qkv),
                    w_attn_proj: conv(&b.w_attn_proj),
                    b_attn_proj: conv(&b.b_attn_proj),
                    ln2_g: conv(&b.ln2_g),
                    ln2_b: conv(&b.ln2_b),
                    w_fc: conv(&b.w_fc),
                    b_fc: conv(&b.b_fc),
                    w_mlp_proj: conv(&b.w_mlp_proj),
                    b_mlp_proj: conv(&b.b_mlp_proj),
                })
                .collect(),
            lnf_g: conv(&self.lnf_g),
            lnf_b: conv(&self.lnf_b),
            lm_head: self.lm_head.as_ref().map(conv_emb),
            version: 0,
        }
    }

    /// Same values with the embedding tables re-stored joint or separated.
    pub fn with_storage(&self, separated: bool) -> Self {
        let mut out = self.clone();
        out.config.separated_embeddings = separated;
        out.wte = Embedding::from_matrix(self.wte.matrix().into_owned(), self.wte.rows, self.wte.dim, separated);
        out.lm_head = self
            .lm_head
            .as_ref()
            .map(|h| Embedding::from_matrix(h.matrix().into_owned(), h.rows, h.dim, separated));
        out
    }
}

#[derive(Clone, Debug, Default)]
struct BlockCache<T> {
    x_in: Vec<T>,
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    attn_drop: Vec<T>,
    x_mid: Vec<T>,
    ln2_out: Vec<T>,
    ln2: LayerNormCache<T>,
    fc_out: Vec<T>,
    gelu_out: Vec<T>,
    mlp_drop: Vec<T>,
}

/// Activations retained for [`backward`]. Consumed by it.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<u16>,
    /// Final hidden states `h_t` after the last layer norm, `(batch·seq)×n_embd`.
    pub h: Vec<T>,
    emb_drop: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    x_final: Vec<T>,
    lnf: LayerNormCache<T>,
    params_version: u64,
}

fn opt<T>(v: &[T]) -> Option<&[T]> {
    (!v.is_empty()).then_some(v)
}

fn opt_mut<T>(v: &mut [T]) -> Option<&mut [T]> {
    (!v.is_empty()).then_some(v)
}

fn zeros_if_empty<T: Scalar>(v: &[T], d: usize) -> Cow<'_, [T]> {
    if v.is_empty() {
        Cow::Owned(vec![T::zero(); d])
    } else {
        Cow::Borrowed(v)
    }
}

/// Runs the decoder over `inputs` (`batch×seq` ids) and returns the
/// `(batch·seq)×vocab_size` logits, `logits[t][i] = ⟨h_t, head_i⟩`.
///
/// `dropout_rng` enables dropout when the config asks for it.
pub fn forward<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    inputs: &[u16],
    batch: usize,
    seq: usize,
    mut dropout_rng: Option<&mut R>,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    let cfg = &params.config;
    let (d, v) = (cfg.n_embd, cfg.vocab_size);
    if seq == 0 || seq > cfg.block_size {
        return Err(Error::Shape(format!("sequence length {seq} outside 1..={}", cfg.block_size)));
    }
    if inputs.len() != batch * seq {
        return Err(Error::Shape(format!("{} ids for a {batch}×{seq} batch", inputs.len())));
    }
    if let Some(&bad) = inputs.iter().find(|&&id| id as usize >= v) {
        return Err(Error::TokenOutOfRange { id: bad as usize, limit: v });
    }
    let n = batch * seq;
    let p = cfg.dropout;
    let eps: T = lit(LN_EPS);
    let shape = AttnShape { batch, seq, d_model: d, n_head: cfg.n_head };

    let mut x = vec![T::zero(); n * d];
    for (pos, row) in x.chunks_exact_mut(d).enumerate() {
        let tok = params.wte.row(inputs[pos] as usize);
        let pe = &params.wpe[(pos % seq) * d..(pos % seq + 1) * d];
        for ((o, &a), &b) in row.iter_mut().zip(tok).zip(pe) {
            *o = a + b;
        }
    }
    let emb_drop = kernels::dropout_fwd(&mut x, p, dropout_rng.as_deref_mut());

    let mut caches = Vec::with_capacity(cfg.n_layer);
    for blk in &params.blocks {
        let mut c = BlockCache { x_in: x.clone(), ..Default::default() };
        let mut ln1_out = vec![T::zero(); n * d];
        c.ln1 = kernels::layernorm_fwd(&x, &blk.ln1_g, &zeros_if_empty(&blk.ln1_b, d), eps, &mut ln1_out, d);
        let w = AttentionWeights {
            w_qkv: &blk.w_qkv,
            b_qkv: opt(&blk.b_qkv),
            w_proj: &blk.w_attn_proj,
            b_proj: opt(&blk.b_attn_proj),
        };
        let (mut a, ac) = kernels::causal_attention_fwd(&ln1_out, &w, shape)?;
        c.attn = ac;
        c.attn_drop = kernels::dropout_fwd(&mut a, p, dropout_rng.as_deref_mut());
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += *ai;
        }
        c.x_mid = x.clone();
        c.ln2_out = vec![T::zero(); n * d];
        c.ln2 = kernels::layernorm_fwd(&x, &blk.ln2_g, &zeros_if_empty(&blk.ln2_b, d), eps, &mut c.ln2_out, d);
        c.fc_out = vec![T::zero(); n * 4 * d];
        kernels::linear_fwd(&c.ln2_out, &blk.w_fc, opt(&blk.b_fc), &mut c.fc_out, n, d, 4 * d);
        c.gelu_out = vec![T::zero(); n * 4 * d];
        kernels::gelu_fwd(&c.fc_out, &mut c.gelu_out);
        let mut m = vec![T::zero(); n * d];
        kernels::linear_fwd(&c.gelu_out, &blk.w_mlp_proj, opt(&blk.b_mlp_proj), &mut m, n, 4 * d, d);
        c.mlp_drop = kernels::dropout_fwd(&mut m, p, dropout_rng.as_deref_mut());
        for (xi, mi) in x.iter_mut().zip(&m) {
            *xi += *mi;
        }
        caches.push(c);
    }

    let mut h = vec![T::zero(); n * d];
    let lnf = kernels::layernorm_fwd(&x, &params.lnf_g, &zeros_if_empty(&params.lnf_b, d), eps, &mut h, d);
    let head = params.head().matrix();
    let mut logits = vec![T::zero(); n * v];
    mat::matmul_nt(&h, &head, &mut logits, n, d, v, false);

    #[cfg(debug_assertions)]
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at flat index {i}")));
    }

    let cache = ForwardCache {
        batch,
        seq,
        inputs: inputs.to_vec(),
        h,
        emb_drop,
        blocks: caches,
        x_final: x,
        lnf,
        params_version: params.version,
    };
    Ok((logits, cache))
}

/// Gradients of every parameter plus the two embedding-gradient paths.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ModelParams<T>,
    /// Gradient reaching the token embeddings through the input lookup (`vocab×n_embd`).
    pub input_embedding: Vec<T>,
    /// Gradient reaching the output head through the logits (`vocab×n_embd`).
    pub head: Vec<T>,
}

/// Backpropagates `dlogits` (`(batch·seq)×vocab_size`) through the cached forward.
///
/// With weight tying the token-embedding gradient is the sum of the input and
/// head paths; without it they land in `wte` and `lm_head` respectively.
pub fn backward<T: Scalar>(params: &ModelParams<T>, cache: ForwardCache<T>, dlogits: &[T]) -> Result<Gradients<T>> {
    if cache.params_version != params.version {
        return Err(Error::StaleCache);
    }
    let cfg = &params.config;
    let (d, v) = (cfg.n_embd, cfg.vocab_size);
    let (batch, seq) = (cache.batch, cache.seq);
    let n = batch * seq;
    if dlogits.len() != n * v || cache.h.len() != n * d {
        return Err(Error::StaleCache);
    }
    let shape = AttnShape { batch, seq, d_model: d, n_head: cfg.n_head };
    let mut g = params.zeros_like();

    let head = params.head().matrix();
    let mut head_grad = vec![T::zero(); v * d];
    mat::matmul_tn(dlogits, &cache.h, &mut head_grad, v, n, d, false);
    let mut dh = vec![T::zero(); n * d];
    mat::matmul(dlogits, &head, &mut dh, n, v, d, false);

    let mut dx = vec![T::zero(); n * d];
    let mut dlnf_b = vec![T::zero(); d];
    kernels::layernorm_bwd(&cache.x_final, &params.lnf_g, &cache.lnf, &dh, &mut dx, &mut g.lnf_g, &mut dlnf_b, d);
    if !g.lnf_b.is_empty() {
        g.lnf_b.copy_from_slice(&dlnf_b);
    }

    for ((blk, gb), c) in params.blocks.iter().zip(g.blocks.iter_mut()).zip(cache.blocks.iter()).rev() {
        // x_out = x_mid + drop(mlp(ln2(x_mid)))
        let mut dm = dx.clone();
        kernels::dropout_bwd(&mut dm, &c.mlp_drop);
        let mut dgelu = vec![T::zero(); n * 4 * d];
        kernels::linear_bwd(&c.gelu_out, &blk.w_mlp_proj, &dm, Some(&mut dgelu), &mut gb.w_mlp_proj, opt_mut(&mut gb.b_mlp_proj), n, 4 * d, d);
        let mut dfc = vec![T::zero(); n * 4 * d];
        kernels::gelu_bwd(&c.fc_out, &dgelu, &mut dfc);
        let mut dln2 = vec![T::zero(); n * d];
        kernels::linear_bwd(&c.ln2_out, &blk.w_fc, &dfc, Some(&mut dln2), &mut gb.w_fc, opt_mut(&mut gb.b_fc), n, d, 4 * d);
        let mut dxm = vec![T::zero(); n * d];
        let mut db2 = vec![T::zero(); d];
        kernels::layernorm_bwd(&c.x_mid, &blk.ln2_g, &c.ln2, &dln2, &mut dxm, &mut gb.ln2_g, &mut db2, d);
        if !gb.ln2_b.is_empty() {
            gb.ln2_b.copy_from_slice(&db2);
        }
        for (a, &b) in dx.iter_mut().zip(&dxm) {
            *a += b;
        }

        // x_mid = x_in + drop(attn(ln1(x_in)))
        let mut da = dx.clone();
        kernels::dropout_bwd(&mut da, &c.attn_drop);
        let w = AttentionWeights {
            w_qkv: &blk.w_qkv,
            b_qkv: opt(&blk.b_qkv),
            w_proj: &blk.w_attn_proj,
            b_proj: opt(&blk.b_attn_proj),
        };
        let ag = AttentionGrads {
            w_qkv: &mut gb.w_qkv,
            b_qkv: opt_mut(&mut gb.b_qkv),
            w_proj: &mut gb.w_attn_proj,
            b_proj: opt_mut(&mut gb.b_attn_proj),
        };
        let dln1 = kernels::causal_attention_bwd(&c.attn, &w, &da, ag, shape);
        let mut dxi = vec![T::zero(); n * d];
        let mut db1 = vec![T::zero(); d];
        kernels::layernorm_bwd(&c.x_in, &blk.ln1_g, &c.ln1, &dln1, &mut dxi, &mut gb.ln1_g, &mut db1, d);
        if !gb.ln1_b.is_empty() {
            gb.ln1_b.copy_from_slice(&db1);
        }
        for (a, &b) in dx.iter_mut().zip(&dxi) {
            *a += b;
        }
    }

    kernels::dropout_bwd(&mut dx, &cache.emb_drop);
    let mut input_grad = vec![T::zero(); v * d];
    for (pos, row) in dx.chunks_exact(d).enumerate() {
        let tok = cache.inputs[pos] as usize;
        let t = pos % seq;
        for i in 0..d {
            input_grad[tok * d + i] += row[i];
            g.wpe[t * d + i] += row[i];
        }
    }

    g.wte.add_matrix(&input_grad);
    match &mut g.lm_head {
        Some(h) => h.add_matrix(&head_grad),
        None => g.wte.add_matrix(&head_grad),
    }
    Ok(Gradients { params: g, input_embedding: input_grad, head: head_grad })
}

/// Norm factors `‖h_t‖` and `‖w_{x_t}‖` for α-thresholding.
pub fn alpha_norms<T: Scalar>(params: &ModelParams<T>, cache: &ForwardCache<T>, targets: &[u16]) -> Result<AlphaNorms<T>> {
    if !params.config.weight_tying {
        return Err(Error::AlphaRequiresTiedHead);
    }
    let d = params.config.n_embd;
    Ok(AlphaNorms {
        hidden: cache.h.chunks_exact(d).map(mat::norm).collect(),
        target_row: targets.iter().map(|&t| mat::norm(params.wte.row(t as usize))).collect(),
    })
}

/// Applies `spec` to the logits of a forward pass, supplying α norms when needed.
pub fn model_loss<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    logits: &[T],
    targets: &[u16],
    spec: &LossSpec,
) -> Result<LossOutput<T>> {
    let norms = match spec.variant {
        LossVariant::AlphaThreshold => Some(alpha_norms(params, cache, targets)?),
        _ => None,
    };
    loss::ce_loss(logits, targets, params.config.vocab_size, spec, norms.as_ref())
}
