//! Run configuration and the training loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::corpus::{sample_batch, Language, PreparedData, TokenStream};
use crate::error::{Error, Result};
use crate::gradlog::{decompose_embedding_grads, GradLogWriter};
use crate::loss::{LossSpec, LossVariant};
use crate::model::{self, ModelConfig, ModelParams};
use crate::optim::{adamw_step, adamw_step_separated, clip_global_norm, cosine_lr, OptimConfig, OptimState};

/// Default number of steps for the low-resource-only model: 2% of 8000.
pub const MONOLINGUAL_ITERS: u64 = 160;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Bilingual,
    /// Train only on the low-resource lines of the training split.
    MonolingualLr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw text the prepared data is built from when `dir` does not exist yet.
    pub corpus: PathBuf,
    pub dir: PathBuf,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { corpus: "data/shakespeare.txt".into(), dir: "data/prepared".into(), ratio: 0.02, seed: 1337 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub batch_size: usize,
    /// `None` means 8000, or 160 in monolingual mode.
    pub max_iters: Option<u64>,
    pub eval_interval: u64,
    pub eval_iters: usize,
    pub log_grads: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 1337,
            out_dir: "runs/run".into(),
            mode: Mode::Bilingual,
            batch_size: 12,
            max_iters: None,
            eval_interval: 250,
            eval_iters: 20,
            log_grads: true,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn effective_max_iters(&self) -> u64 {
        self.max_iters.unwrap_or(match self.mode {
            Mode::Bilingual => 8000,
            Mode::MonolingualLr => MONOLINGUAL_ITERS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_iters == 0 {
            return Err(Error::Config("batch_size, eval_interval and eval_iters must be positive".into()));
        }
        if self.loss.variant == LossVariant::AlphaThreshold && !self.model.weight_tying {
            return Err(Error::AlphaRequiresTiedHead);
        }
        Ok(())
    }
}

/// Loads prepared data, building it from the raw corpus first if needed, and
/// checks that it matches the configured ratio and seed.
pub fn load_or_prepare(cfg: &DataConfig) -> Result<PreparedData> {
    if !cfg.dir.join("meta.txt").exists() {
        let text = fs::read_to_string(&cfg.corpus)?;
        PreparedData::prepare(&text, cfg.ratio, cfg.seed)?.write(&cfg.dir)?;
    }
    let data = PreparedData::read(&cfg.dir)?;
    if data.ratio != cfg.ratio || data.seed != cfg.seed {
        return Err(Error::Config(format!(
            "{} was prepared with ratio {} seed {}, config asks for ratio {} seed {}",
            cfg.dir.display(),
            data.ratio,
            data.seed,
            cfg.ratio,
            cfg.seed
        )));
    }
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub iter: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_ce: f64,
    pub val_ce: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub iters: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub best_val: f64,
    pub evals: Vec<EvalPoint>,
}

/// Paths of a run directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        RunFiles { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn curve(&self) -> PathBuf {
        self.dir.join("curve.csv")
    }
    pub fn evals(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }
    pub fn grad_log(&self) -> PathBuf {
        self.dir.join("grad.bin")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.bin")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.bin")
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join("final.bin")
    }
}

const CURVE_HEADER: &str = "iter,lr,loss,grad_norm,infinite_positions";
const EVAL_HEADER: &str = "iter,train_loss,val_loss,train_ce,val_ce";

/// Keeps the header and the rows whose leading iteration is below `keep_below`.
fn truncate_csv(path: &Path, header: &str, keep_below: u64) -> Result<()> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let iter: u64 = line.split(',').next().and_then(|x| x.parse().ok()).unwrap_or(u64::MAX);
            if iter < keep_below {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn mean_losses(
    params: &ModelParams<f32>,
    stream: &TokenStream,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let block = params.config.block_size;
    let standard = LossSpec::standard();
    let (mut spec_sum, mut ce_sum) = (0.0, 0.0);
    for _ in 0..cfg.eval_iters {
        let b = sample_batch(stream, block, cfg.batch_size, rng, None)?;
        let (logits, cache) = model::forward::<f32, ChaCha8Rng>(params, &b.inputs, b.batch_size, block, None)?;
        spec_sum += model::model_loss(params, &cache, &logits, &b.targets, &cfg.loss)?.loss;
        ce_sum += model::model_loss(params, &cache, &logits, &b.targets, &standard)?.loss;
    }
    let n = cfg.eval_iters as f64;
    Ok((spec_sum / n, ce_sum / n))
}

struct State {
    params: ModelParams<f32>,
    optim: OptimState<f32>,
    rng_batch: ChaCha8Rng,
    rng_dropout: ChaCha8Rng,
    rng_eval: ChaCha8Rng,
    best_val: f64,
}

impl State {
    fn checkpoint(&self, cfg: &RunConfig, vocab_chars: &[char], iter: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.params.config.clone(),
            run_config: cfg.to_toml()?,
            vocab_chars: vocab_chars.to_vec(),
            iter,
            best_val: self.best_val,
            params: self.params.clone(),
            optim: self.optim.clone(),
            rngs: [&self.rng_batch, &self.rng_dropout, &self.rng_eval].iter().map(|r| RngState::capture(r)).collect(),
        })
    }
}

/// Trains per `cfg`, writing checkpoints, curves and the gradient log into
/// `cfg.out_dir`. With `resume`, continues from that checkpoint; the result
/// is bitwise the same as an uninterrupted run.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_or_prepare(&cfg.data)?;
    let vocab = &data.vocab;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = vocab.total_size();
    } else if model_cfg.vocab_size != vocab.total_size() {
        return Err(Error::Config(format!("model vocab {} but data vocab {}", model_cfg.vocab_size, vocab.total_size())));
    }
    model_cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.model = model_cfg.clone();
    let train_stream = match cfg.mode {
        Mode::Bilingual => data.train.clone(),
        Mode::MonolingualLr => data.train.filter_language(Language::Low),
    };
    let max_iters = cfg.effective_max_iters();
    let files = RunFiles::new(&cfg.out_dir);
    fs::create_dir_all(&files.dir)?;
    fs::write(files.config(), cfg.to_toml()?)?;

    let (mut st, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.model != model_cfg || ck.vocab_chars != vocab.chars() {
                return Err(Error::Config("checkpoint does not match this configuration and data".into()));
            }
            if ck.rngs.len() != 3 {
                return Err(Error::Format("checkpoint lacks training RNG state".into()));
            }
            let st = State {
                params: ck.params,
                optim: ck.optim,
                rng_batch: ck.rngs[0].restore(),
                rng_dropout: ck.rngs[1].restore(),
                rng_eval: ck.rngs[2].restore(),
                best_val: ck.best_val,
            };
            (st, ck.iter)
        }
        None => {
            let params = ModelParams::<f32>::init(&model_cfg, cfg.seed)?;
            let optim = OptimState::new(&params);
            let stream_rng = |s: u64| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                r.set_stream(s);
                r
            };
            let st = State {
                params,
                optim,
                rng_batch: stream_rng(0),
                rng_dropout: stream_rng(1),
                rng_eval: stream_rng(2),
                best_val: f64::INFINITY,
            };
            (st, 0)
        }
    };
    // a checkpoint is written after its iteration's evaluation, so that row is kept and not redone
    let resumed = resume.is_some();
    truncate_csv(&files.curve(), CURVE_HEADER, start)?;
    truncate_csv(&files.evals(), EVAL_HEADER, if resumed { start + 1 } else { start })?;
    let mut grad_log = if !cfg.log_grads {
        None
    } else if start > 0 && files.grad_log().exists() {
        Some(GradLogWriter::resume(&files.grad_log(), model_cfg.vocab_size, start)?)
    } else {
        Some(GradLogWriter::create(&files.grad_log(), model_cfg.vocab_size)?)
    };

    let (v, d, block, bs) = (model_cfg.vocab_size, model_cfg.n_embd, model_cfg.block_size, cfg.batch_size);
    let mut outcome = TrainOutcome {
        out_dir: files.dir.clone(),
        iters: max_iters,
        first_loss: None,
        last_loss: None,
        best_val: st.best_val,
        evals: Vec::new(),
    };

    let mut iter = start;
    loop {
        let due = iter % cfg.eval_interval == 0 || iter == max_iters;
        if due && !(resumed && iter == start) {
            let (train_loss, train_ce) = mean_losses(&st.params, &train_stream, &cfg, &mut st.rng_eval)?;
            let (val_loss, val_ce) = mean_losses(&st.params, &data.val, &cfg, &mut st.rng_eval)?;
            let point = EvalPoint { iter, train_loss, val_loss, train_ce, val_ce };
            append_line(&files.evals(), &format!("{iter},{train_loss},{val_loss},{train_ce},{val_ce}"))?;
            progress(&format!("iter {iter}: train {train_loss:.4} val {val_loss:.4} (ce {train_ce:.4} / {val_ce:.4})"));
            outcome.evals.push(point);
            if val_ce < st.best_val {
                st.best_val = val_ce;
                st.checkpoint(&cfg, vocab.chars(), iter)?.write(&files.best())?;
            }
            if iter < max_iters {
                if let Some(w) = grad_log.as_mut() {
                    w.flush()?;
                }
                st.checkpoint(&cfg, vocab.chars(), iter)?.write(&files.last())?;
            }
        }
        if iter >= max_iters {
            break;
        }

        let lr = cosine_lr(iter, &cfg.optim);
        let batch = sample_batch(&train_stream, block, bs, &mut st.rng_batch, None)?;
        let (logits, cache) = model::forward(&st.params, &batch.inputs, bs, block, Some(&mut st.rng_dropout))?;
        let out = model::model_loss(&st.params, &cache, &logits, &batch.targets, &cfg.loss)?;
        if out.loss.is_nan() || (out.loss.is_infinite() && out.infinite_positions.is_empty()) {
            return Err(Error::Numeric(format!("loss {} at iter {iter}", out.loss)));
        }
        let h = grad_log.as_ref().map(|_| cache.h.clone());
        let mut grads = model::backward(&st.params, cache, &out.dlogits)?;
        if let (Some(w), Some(h)) = (grad_log.as_mut(), h) {
            let dec = decompose_embedding_grads(&grads.input_embedding, &h, &out.dlogits, &batch.targets, v, d)?;
            w.append(iter, &dec.norms(), &batch.targets)?;
        }
        let grad_norm = clip_global_norm(&mut grads.params, cfg.optim.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {grad_norm} at iter {iter}")));
        }
        if model_cfg.separated_embeddings {
            adamw_step_separated(&mut st.params, &grads.params, &mut st.optim, &cfg.optim, lr)?;
        } else {
            adamw_step(&mut st.params, &grads.params, &mut st.optim, &cfg.optim, lr)?;
        }
        append_line(&files.curve(), &format!("{iter},{lr},{},{grad_norm},{}", out.loss, out.infinite_positions.len()))?;
        outcome.first_loss.get_or_insert(out.loss);
        outcome.last_loss = Some(out.loss);
        iter += 1;
    }

    if let Some(w) = grad_log.as_mut() {
        w.flush()?;
    }
    st.checkpoint(&cfg, vocab.chars(), max_iters)?.write(&files.final_ckpt())?;
    outcome.best_val = st.best_val;
    Ok(outcome)
}
