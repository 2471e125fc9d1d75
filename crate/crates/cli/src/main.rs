//! `rarelm`: data preparation, training, evaluation, analysis and margin
//! calibration for the rare-token experiments.

mod overrides;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rarelm_core::calibration::{self, estimate_effective_margin, margin_for_min_p, margin_for_nucleus};
use rarelm_core::checkpoint::Checkpoint;
use rarelm_core::eval::{self, ValLogits};
use rarelm_core::report;
use rarelm_core::train::{self, load_or_prepare, RunFiles};
use rarelm_core::{Error, GradLog, Language, MetricsReport, PreparedData, RunConfig};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "RARELM_THREADS";

#[derive(Parser)]
#[command(name = "rarelm", version, about = "Rare-token language model experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the bilingual token streams from a raw text corpus.
    PrepareData(PrepareArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Per-language metrics of a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Embedding and gradient-ratio analysis bundle.
    Analyze(AnalyzeArgs),
    /// Margin bounds for sampling settings, or effective margins of an embedding matrix.
    Calibrate(CalibrateArgs),
    /// Validation perplexity across a temperature grid.
    SweepTemperature(SweepArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, default_value = "data/shakespeare.txt")]
    corpus: PathBuf,
    #[arg(long, default_value = "data/prepared")]
    out: PathBuf,
    /// Fraction of lines assigned to the low-resource language.
    #[arg(long, default_value_t = 0.02)]
    ratio: f64,
    #[arg(long, default_value_t = 1337)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; keys not given take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<u64>,
    /// Override any config key, e.g. `--set loss.margin=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared data directory; defaults to the one in the checkpoint's run config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    src: DataArgs,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    src: DataArgs,
    /// Gradient log; defaults to grad.bin next to the checkpoint.
    #[arg(long)]
    grad_log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also dump the full per-step gradient log as CSV.
    #[arg(long)]
    export_grad_log: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LangArg {
    Hr,
    Lr,
    Both,
}

impl LangArg {
    fn languages(self) -> Vec<Language> {
        match self {
            LangArg::Hr => vec![Language::High],
            LangArg::Lr => vec![Language::Low],
            LangArg::Both => Language::BOTH.to_vec(),
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    src: DataArgs,
    #[arg(long, value_enum, default_value = "both")]
    lang: LangArg,
    #[arg(long, default_value_t = 0.02)]
    t_min: f64,
    #[arg(long, default_value_t = 2.0)]
    t_max: f64,
    #[arg(long, default_value_t = 0.01)]
    t_step: f64,
    /// CSV with one row per (language, temperature).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Vocabulary size for the nucleus bound.
    #[arg(long, requires = "top_p")]
    vocab_size: Option<usize>,
    #[arg(long, requires = "vocab_size")]
    top_p: Option<f64>,
    /// Base probability for the min-p bound.
    #[arg(long)]
    min_p: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Embedding matrix file (`"N d\n"` then N·d little-endian f32).
    #[arg(long, conflicts_with_all = ["random", "checkpoint"])]
    matrix: Option<PathBuf>,
    /// Use the token embedding and final layer-norm gain of a checkpoint.
    #[arg(long, conflicts_with = "random")]
    checkpoint: Option<PathBuf>,
    /// Draw an N×d matrix with entries from N(0, std²).
    #[arg(long, num_args = 2, value_names = ["N", "D"])]
    random: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.02)]
    std: f64,
    #[arg(long, default_value_t = 1337)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    percentile: f64,
    /// Per-token margins and alphas as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Numeric(_))));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw.trim().parse().with_context(|| format!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::PrepareData(a) => prepare(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Calibrate(a) => calibrate(a),
        Command::SweepTemperature(a) => sweep(a),
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let text = fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let data = PreparedData::prepare(&text, a.ratio, a.seed)?;
    data.write(&a.out)?;
    println!(
        "{}: vocab {} ({} per language), train {} tokens, val {} tokens",
        a.out.display(),
        data.vocab.total_size(),
        data.vocab.base_size(),
        data.train.len(),
        data.val.len()
    );
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().context("parsing config")?;
    overrides::apply(&mut table, &a.sets)?;
    let mut cfg: RunConfig = table.try_into().context("config")?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(n) = a.max_iters {
        cfg.max_iters = Some(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if a.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let quiet = a.quiet;
    let out = train::train(&cfg, a.resume.as_deref(), |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    println!("{}: {} iters, best val CE {:.4}", out.out_dir.display(), out.iters, out.best_val);
    Ok(())
}

/// Loads a checkpoint and the data it should be evaluated on.
fn load(src: &DataArgs) -> Result<(Checkpoint, PreparedData)> {
    let ck = Checkpoint::read(&src.checkpoint).with_context(|| format!("reading {}", src.checkpoint.display()))?;
    let data = match &src.data {
        Some(dir) => PreparedData::read(dir).with_context(|| format!("reading {}", dir.display()))?,
        None => {
            let cfg = RunConfig::from_toml(&ck.run_config).context("checkpoint run config")?;
            load_or_prepare(&cfg.data)?
        }
    };
    if data.vocab.chars() != ck.vocab_chars.as_slice() || data.vocab.total_size() != ck.model.vocab_size {
        bail!(Error::Config("checkpoint vocabulary does not match the data".into()));
    }
    Ok((ck, data))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (ck, data) = load(&a.src)?;
    let report = MetricsReport::compute(&ck.params, &data.val, &data.vocab, &eval::default_grid())?;
    print!("{}", report.to_table());
    if let Some(p) = &a.out {
        report.write_csv(p)?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (ck, data) = load(&a.src)?;
    let log_path = a.grad_log.clone().unwrap_or_else(|| {
        let dir = a.src.checkpoint.parent().unwrap_or(Path::new("."));
        RunFiles::new(dir).grad_log()
    });
    let log = if log_path.exists() {
        Some(GradLog::read(&log_path).with_context(|| format!("reading {}", log_path.display()))?)
    } else {
        eprintln!("notice: no gradient log at {}; ratio outputs skipped", log_path.display());
        None
    };
    let counts = data.train.token_counts(data.vocab.total_size());
    let s = report::write_bundle(&a.out, &ck.params, &data.vocab, log.as_ref(), &counts, a.export_grad_log)?;
    for f in &s.files {
        println!("{}", a.out.join(f).display());
    }
    println!("neighbor slots holding a translation/capitalization relative: {}/{}", s.relatives_in_neighbors, s.neighbor_slots);
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let mut did = false;
    if let (Some(n), Some(p)) = (a.vocab_size, a.top_p) {
        println!("nucleus margin (N = {n}, top_p = {p}, T = {}): {:.4}", a.temperature, margin_for_nucleus(n, p, a.temperature)?);
        did = true;
    }
    if let Some(p) = a.min_p {
        println!("min-p margin (p_base = {p}, T = {}): {:.4}", a.temperature, margin_for_min_p(a.temperature, p)?);
        did = true;
    }
    let matrix = if let Some(path) = &a.matrix {
        let (w, n, d) = calibration::read_matrix(path)?;
        Some((w.iter().map(|&x| x as f64).collect::<Vec<_>>(), n, d, vec![1.0; d]))
    } else if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::read(path)?;
        let d = ck.model.n_embd;
        let w = ck.params.wte.matrix().iter().map(|&x| x as f64).collect();
        let gamma = ck.params.lnf_g.iter().map(|&x| x as f64).collect();
        Some((w, ck.model.vocab_size, d, gamma))
    } else if let Some(nd) = &a.random {
        let (n, d) = (nd[0], nd[1]);
        let normal = Normal::new(0.0, a.std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        Some(((0..n * d).map(|_| normal.sample(&mut rng)).collect(), n, d, vec![1.0; d]))
    } else {
        None
    };
    if let Some((w, n, d, gamma)) = matrix {
        let r = estimate_effective_margin(&w, n, d, &gamma, a.percentile)?;
        print!("{}", r.summary());
        if let Some(p) = &a.out {
            r.write_csv(p)?;
        }
        did = true;
    }
    if !did {
        bail!("nothing to calibrate: pass --vocab-size/--top-p, --min-p, --matrix, --checkpoint or --random");
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    if !(a.t_min > 0.0 && a.t_step > 0.0 && a.t_max >= a.t_min) {
        bail!(Error::InvalidArgument("need 0 < t-min ≤ t-max and t-step > 0".into()));
    }
    let steps = ((a.t_max - a.t_min) / a.t_step + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| ((a.t_min + k as f64 * a.t_step) * 1e6).round() / 1e6).collect();
    let (ck, data) = load(&a.src)?;
    let logits = ValLogits::collect(&ck.params, &data.val)?;
    let mut out = a.out.as_ref().map(csv::Writer::from_path).transpose()?;
    if let Some(w) = out.as_mut() {
        w.write_record(["language", "temperature", "nll", "ppl"])?;
    }
    for lang in a.lang.languages() {
        for &t in &grid {
            let (nll, ppl) = logits.nll(lang, t)?;
            if let Some(w) = out.as_mut() {
                w.write_record([lang.tag().to_string(), t.to_string(), nll.to_string(), ppl.to_string()])?;
            }
        }
        let (best, t_best) = logits.temperature_sweep(lang, &grid)?;
        println!("{}: PPL {:.4} at T = 1, best {:.4} at T = {t_best}", lang.tag(), logits.nll(lang, 1.0)?.1, best);
    }
    if let Some(mut w) = out {
        w.flush()?;
    }
    Ok(())
}
