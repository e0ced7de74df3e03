//! `cutoff`: trace generation, model training, forecast evaluation, policy
//! races and plot-data export.

use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cutoff_core::clustersim::{preset, simulate_trace, SimSpec, PRESET_NAMES};
use cutoff_core::harness::{run_policy, ModelPolicyConfig, PolicyKind, RunOptions, RunRecord, TaskConfig, ToyTask};
use cutoff_core::predictor::{one_step_forecasts, ImputeMode, Predictor, DEFAULT_K};
use cutoff_core::trace::{load_trace, save_trace, RuntimeTrace};
use cutoff_core::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

/// Errors caused by how the command was invoked. They exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "cutoff",
    version,
    about = "Dynamic cutoffs for synchronous data-parallel SGD"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a runtime trace from a preset or a TOML cluster description.
    TraceGen(TraceGenArgs),
    /// Fit the runtime model and inference network to a trace.
    Train(TrainArgs),
    /// Score one-step-ahead order-statistic forecasts on a trace.
    EvalPred(EvalPredArgs),
    /// Replay a trace under several cutoff policies.
    Race(RaceArgs),
    /// Turn race records into long-format plot data.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Named preset.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// TOML cluster description.
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl SourceArgs {
    fn resolve(&self, seed: Option<u64>, iterations: Option<usize>) -> Result<Option<SimSpec>> {
        let spec = match (&self.preset, &self.spec) {
            (Some(name), _) => preset(name).ok_or_else(|| {
                usage(format!(
                    "unknown preset {name:?}; available: {}",
                    PRESET_NAMES.join(", ")
                ))
            })?,
            (None, Some(path)) => SimSpec::load(path).map_err(|e| usage(format!("invalid cluster spec: {e}")))?,
            (None, None) => return Ok(None),
        };
        let spec = match seed {
            Some(s) => spec.with_seed(s),
            None => spec,
        };
        let spec = match iterations {
            Some(i) => spec.with_iterations(i),
            None => spec,
        };
        spec.validate()
            .map_err(|e| usage(format!("invalid cluster spec: {e}")))?;
        Ok(Some(spec))
    }
}

#[derive(Debug, Args)]
struct TraceGenArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Train on the first this many rows only.
    #[arg(long)]
    rows: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalPredArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Fraction of the trace before the first scored iteration.
    #[arg(long, default_value_t = 0.0)]
    split: f64,
    /// Score at most this many iterations.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-rank forecast CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ImputeArg {
    Marginal,
    Mixture,
}

#[derive(Debug, Args)]
struct RaceArgs {
    /// Recorded trace to replay.
    #[arg(long, conflicts_with_all = ["preset", "spec"])]
    trace: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// Seed for a simulated trace; the scenario's own seed otherwise.
    #[arg(long)]
    trace_seed: Option<u64>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated: full_sync, static_cutoff:<c>, gaussian_order,
    /// model_cutoff, oracle, async_staleness.
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<String>,
    #[arg(long)]
    iters: Option<usize>,
    /// Seed for data sampling and model draws, shared by all policies.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leading trace rows given to model_cutoff as history and skipped by
    /// every policy.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// TOML task configuration.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Examples per worker when no task file sets the batch size.
    #[arg(long, default_value_t = 4)]
    per_worker: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    overhead: f64,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    c_min: usize,
    #[arg(long, value_enum, default_value_t = ImputeArg::Marginal)]
    impute: ImputeArg,
    /// Directory for one CSV per policy.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum What {
    Throughput,
    Convergence,
    Idle,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long, num_args = 1.., required = true)]
    records: Vec<PathBuf>,
    #[arg(long)]
    what: String,
    /// The trace the records were raced on; needed for idle time.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Rows of the trace skipped as warmup during the race.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .context("writing standard output"),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn trace_gen(a: TraceGenArgs) -> Result<()> {
    let spec = a
        .source
        .resolve(a.seed, a.iterations)?
        .ok_or_else(|| usage("trace-gen needs --preset or --spec"))?;
    let trace = simulate_trace(&spec)?;
    match &a.out {
        Some(p) => save_trace(&trace, p)?,
        None => emit(None, &trace.to_text()?)?,
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lag {
        cfg.lag = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = a.threads {
        cfg.threads = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mut trace = load_trace(&a.trace)?;
    if let Some(r) = a.rows {
        trace = trace.slice(0, r.min(trace.len()))?;
    }
    let ckpt = train(&trace, &cfg)?;
    save_checkpoint(&ckpt, &a.out)?;
    match ckpt.meta.final_elbo {
        Some(e) => eprintln!(
            "trained {} steps over {} epochs, final batch ELBO {e:.4}",
            ckpt.meta.steps, cfg.epochs
        ),
        None => eprintln!("wrote untrained checkpoint"),
    }
    Ok(())
}

fn eval_pred(a: EvalPredArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.split) {
        return Err(usage(format!("--split must be in [0, 1), got {}", a.split)));
    }
    let predictor = Predictor::new(load_checkpoint(&a.ckpt)?)?;
    let trace = load_trace(&a.trace)?;
    let lag = predictor.lag();
    if trace.len() <= lag {
        return Err(anyhow!(
            "trace has {} rows; forecasting needs more than {lag}",
            trace.len()
        ));
    }
    let start = ((a.split * trace.len() as f64).ceil() as usize).max(lag);
    let end = a.steps.map_or(trace.len(), |s| start.saturating_add(s));
    let report = one_step_forecasts(&predictor, &trace, start, end, a.k, a.seed)?;
    if let Some(path) = &a.out {
        let mut csv = String::from("iteration,rank,observed,pred_mean,pred_lower,pred_upper,carry_forward\n");
        for s in &report.steps {
            for r in 0..s.observed_sorted.len() {
                let (m, sd) = (s.predicted.means[r], s.predicted.stds[r]);
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    s.iteration,
                    r + 1,
                    s.observed_sorted[r],
                    m,
                    m - 2.0 * sd,
                    m + 2.0 * sd,
                    s.carry_forward_sorted[r]
                );
            }
        }
        emit(Some(path), &csv)?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "iterations {}..{}", start, start + report.steps.len());
    let _ = writeln!(text, "steps {}", report.steps.len());
    let _ = writeln!(text, "rmse_model {}", report.rmse_model);
    let _ = writeln!(text, "rmse_carry_forward {}", report.rmse_carry_forward);
    emit(None, &text)
}

fn file_stem(kind: &PolicyKind) -> String {
    match kind {
        PolicyKind::StaticCutoff(c) => format!("static_cutoff_{c}"),
        other => other.label().to_string(),
    }
}

fn race(a: RaceArgs) -> Result<()> {
    let kinds = a
        .policies
        .iter()
        .map(|p| p.trim().parse::<PolicyKind>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(usage("no policies given"));
    }
    let needs_model = kinds.contains(&PolicyKind::ModelCutoff);
    if needs_model && a.ckpt.is_none() {
        return Err(usage("model_cutoff needs --ckpt"));
    }
    let trace = match (&a.trace, a.source.resolve(a.trace_seed, None)?) {
        (Some(p), _) => load_trace(p)?,
        (None, Some(spec)) => simulate_trace(&spec)?,
        (None, None) => return Err(usage("race needs --trace, --preset or --spec")),
    };
    if a.warmup >= trace.len() {
        return Err(usage(format!(
            "--warmup {} leaves no rows of a {}-row trace",
            a.warmup,
            trace.len()
        )));
    }
    let history = trace.rows()[..a.warmup].to_vec();
    let trace = trace.slice(a.warmup, trace.len())?;
    let n = trace.n_workers();

    let mut task_cfg: TaskConfig = match &a.task {
        Some(p) => read_toml(p)?,
        None => TaskConfig {
            batch_size: a.per_worker * n,
            ..TaskConfig::default()
        },
    };
    task_cfg.seed = a.seed;
    if let Some(lr) = a.lr {
        task_cfg.lr = lr;
    }
    let task = ToyTask::new(task_cfg).map_err(|e| usage(e.to_string()))?;
    task.per_worker(n).map_err(|e| usage(e.to_string()))?;

    let predictor = match (&a.ckpt, needs_model) {
        (Some(p), true) => {
            let pred = Predictor::new(load_checkpoint(p)?)?;
            if pred.n_workers() != n {
                return Err(anyhow!("checkpoint models {} workers, trace has {n}", pred.n_workers()));
            }
            Some(Arc::new(pred))
        }
        _ => None,
    };
    let model_cfg = ModelPolicyConfig {
        k: a.k,
        c_min: a.c_min,
        seed: a.seed,
        impute: match a.impute {
            ImputeArg::Marginal => ImputeMode::Marginal,
            ImputeArg::Mixture => ImputeMode::Mixture,
        },
    };
    let opts = RunOptions {
        max_iterations: a.iters,
        seed: a.seed,
        overhead_s: a.overhead,
        eval_every: a.eval_every,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for kind in kinds {
        let rec = run_policy(kind, &task, &trace, predictor.clone(), &model_cfg, &history, &opts)
            .with_context(|| format!("running {kind}"))?;
        let path = a.out.join(format!("{}.csv", file_stem(&kind)));
        rec.write_csv(&path)?;
        let last = rec.rows.last();
        eprintln!(
            "{kind}: {} rows, {:.3} s, {:.2} contributions/s, final val loss {:.5}",
            rec.rows.len(),
            rec.total_time(),
            rec.cumulative_throughput(),
            last.map_or(f64::NAN, |r| r.val_loss)
        );
    }
    Ok(())
}

/// Mean wait of the contributing workers for the slowest among them.
fn idle_seconds(row: &[f64], c: usize) -> f64 {
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let slowest = sorted[c - 1];
    sorted[..c].iter().map(|x| slowest - x).sum::<f64>() / c as f64
}

fn export(a: ExportArgs) -> Result<()> {
    let what = What::from_str(&a.what, true).map_err(|_| {
        usage(format!(
            "unknown --what {:?}; expected throughput, convergence or idle",
            a.what
        ))
    })?;
    let trace: Option<RuntimeTrace> = match (&a.trace, what) {
        (Some(p), What::Idle) => Some(load_trace(p)?),
        (None, What::Idle) => return Err(usage("--what idle needs --trace")),
        _ => None,
    };
    let mut csv = String::from("series,x,y\n");
    for path in &a.records {
        let rec = RunRecord::read_csv(path)?;
        for r in &rec.rows {
            let (x, y) = match what {
                What::Throughput => (r.iteration as f64, r.throughput),
                What::Convergence => (r.cum_time_s, r.val_loss),
                What::Idle => {
                    if rec.policy == "async_staleness" {
                        return Err(usage("idle time is defined for synchronous records only"));
                    }
                    let t = trace.as_ref().expect("loaded above");
                    let row = t
                        .row(a.warmup + r.iteration)
                        .ok_or_else(|| anyhow!("{} has more rows than the trace", path.display()))?;
                    if r.c == 0 || r.c > row.len() {
                        return Err(anyhow!("{}: cutoff {} does not fit the trace", path.display(), r.c));
                    }
                    (r.iteration as f64, idle_seconds(row, r.c))
                }
            };
            let _ = writeln!(csv, "{},{x},{y}", rec.policy);
        }
    }
    emit(a.out.as_deref(), &csv)
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TraceGen(a) => trace_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalPred(a) => eval_pred(a),
        Command::Race(a) => race(a),
        Command::Export(a) => export(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(if e.downcast_ref::<Usage>().is_some() { 2 } else { 1 })
        }
    }
}
