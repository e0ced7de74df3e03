//! Discrete-event simulation of synchronous cutoff SGD and its baselines on a
//! toy task, with simulated wall-clock accounting.
//!
//! Each synchronous iteration: the policy picks `c`; every worker's runtime
//! comes from the runtime source; the `c` fastest (ties by worker id)
//! contribute their sub-mini-batch gradients; the step is
//! `theta -= lr * mean(f_w)`; the iteration lasts `x_(c) + overhead`.

mod policy;
mod task;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clustersim::{Replay, RuntimeSource};
use crate::error::{Error, Result};
use crate::orderstats::{optimal_cutoff, SortedRuntimes};
use crate::predictor::Predictor;
use crate::trace::RuntimeTrace;

pub use policy::{
    CutoffPolicy, FullSync, GaussianOrder, ModelCutoff, ModelPolicyConfig, Observation, PolicyKind, StaticCutoff,
};
pub use task::{Dataset, LossKind, TaskConfig, ToyTask};

pub const CSV_HEADER: &str = "iteration,policy,c,iter_time_s,cum_time_s,train_loss,val_loss,throughput";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Upper bound on iterations (synchronous) or runtime rows per worker
    /// (asynchronous); the source's length applies otherwise.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    /// Fixed aggregation time added to every synchronous iteration.
    pub overhead_s: f64,
    /// Losses are recomputed every this many rows and carried in between.
    pub eval_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_iterations: None,
            seed: 0,
            overhead_s: 0.0,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub iteration: usize,
    pub c: usize,
    pub iter_time_s: f64,
    pub cum_time_s: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `c / iter_time_s` for synchronous rows; completed updates per second
    /// so far for asynchronous rows.
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub policy: String,
    pub rows: Vec<RunRow>,
    pub final_theta: Vec<f64>,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration, self.policy, r.c, r.iter_time_s, r.cum_time_s, r.train_loss, r.val_loss, r.throughput
            );
        }
        out
    }

    /// Parses the output of [`Self::to_csv`]. The final parameters are not
    /// stored in CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {CSV_HEADER:?}"),
                })
            }
        }
        let mut policy: Option<String> = None;
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(bad(format!("expected 8 fields, found {}", fields.len())));
            }
            match &policy {
                None => policy = Some(fields[1].to_string()),
                Some(p) if p != fields[1] => return Err(bad(format!("policy {:?} differs from {p:?}", fields[1]))),
                Some(_) => {}
            }
            let int = |j: usize| fields[j].parse::<usize>().map_err(|e| bad(format!("field {j}: {e}")));
            let real = |j: usize| fields[j].parse::<f64>().map_err(|e| bad(format!("field {j}: {e}")));
            rows.push(RunRow {
                iteration: int(0)?,
                c: int(2)?,
                iter_time_s: real(3)?,
                cum_time_s: real(4)?,
                train_loss: real(5)?,
                val_loss: real(6)?,
                throughput: real(7)?,
            });
        }
        Ok(Self {
            policy: policy.ok_or_else(|| Error::InsufficientData("record has no rows".into()))?,
            rows,
            final_theta: Vec::new(),
        })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn total_time(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_time_s)
    }

    /// Gradient contributions applied over the run.
    pub fn contributions(&self) -> usize {
        self.rows.iter().map(|r| r.c).sum()
    }

    /// Contributions per simulated second over the whole run.
    pub fn cumulative_throughput(&self) -> f64 {
        self.contributions() as f64 / self.total_time()
    }

    /// Contributions completed within the first `seconds` of simulated time.
    pub fn contributions_by(&self, seconds: f64) -> usize {
        self.rows
            .iter()
            .take_while(|r| r.cum_time_s <= seconds)
            .map(|r| r.c)
            .sum()
    }

    /// Simulated time at which validation loss first reaches `target`.
    pub fn time_to_val_loss(&self, target: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.val_loss <= target).map(|r| r.cum_time_s)
    }

    /// Validation loss of the last row finished by `seconds`.
    pub fn val_loss_at(&self, seconds: f64) -> Option<f64> {
        self.rows
            .iter()
            .take_while(|r| r.cum_time_s <= seconds)
            .last()
            .map(|r| r.val_loss)
    }
}

/// Task parameters and clocks carried between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub theta: Vec<f64>,
    pub cum_time_s: f64,
    pub iteration: usize,
    losses: Option<(f64, f64)>,
}

impl RunState {
    pub fn new(task: &ToyTask) -> Self {
        Self {
            theta: task.initial_theta(),
            cum_time_s: 0.0,
            iteration: 0,
            losses: None,
        }
    }

    fn losses(&mut self, task: &ToyTask, every: usize) -> (f64, f64) {
        match self.losses {
            Some(l) if every > 1 && !self.iteration.is_multiple_of(every) => l,
            _ => {
                let l = (task.train_loss(&self.theta), task.val_loss(&self.theta));
                self.losses = Some(l);
                l
            }
        }
    }
}

/// Worker ids sorted by runtime, ties broken by id.
fn arrival_order(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Applies one synchronous step with a given cutoff. Returns the row, the
/// observed runtimes (`None` for dropped workers) and the cutoff time.
fn sync_step(
    task: &ToyTask,
    state: &mut RunState,
    c: usize,
    row: &[f64],
    opts: &RunOptions,
) -> Result<(RunRow, Vec<Option<f64>>, f64)> {
    let n = row.len();
    if c == 0 || c > n {
        return Err(Error::Domain(format!("cutoff {c} outside 1..={n}")));
    }
    let per_worker = task.per_worker(n)?;
    let order = arrival_order(row);
    let mut contributors = order[..c].to_vec();
    contributors.sort_unstable();
    let cutoff_time = row[order[c - 1]];

    let mut step = vec![0.0; task.n_params()];
    for &w in &contributors {
        let g = task.worker_gradient(&state.theta, opts.seed, state.iteration, w, per_worker);
        step.iter_mut().zip(&g).for_each(|(s, gi)| *s += gi);
    }
    let scale = task.cfg.lr / c as f64;
    state.theta.iter_mut().zip(&step).for_each(|(t, s)| *t -= scale * s);

    let iter_time = cutoff_time + opts.overhead_s;
    state.cum_time_s += iter_time;
    let (train_loss, val_loss) = state.losses(task, opts.eval_every);
    let out = RunRow {
        iteration: state.iteration,
        c,
        iter_time_s: iter_time,
        cum_time_s: state.cum_time_s,
        train_loss,
        val_loss,
        throughput: c as f64 / iter_time,
    };
    let mut observed = vec![None; n];
    for &w in &contributors {
        observed[w] = Some(row[w]);
    }
    state.iteration += 1;
    Ok((out, observed, cutoff_time))
}

/// One synchronous iteration under `policy` with this iteration's runtimes.
pub fn run_iteration(
    task: &ToyTask,
    state: &mut RunState,
    policy: &mut dyn CutoffPolicy,
    row: &[f64],
    opts: &RunOptions,
) -> Result<RunRow> {
    let iteration = state.iteration;
    let c = policy.choose(iteration, row.len())?;
    let (out, observed, cutoff_time) = sync_step(task, state, c, row, opts)?;
    policy.observe(&Observation {
        iteration,
        runtimes: &observed,
        cutoff_time,
    })?;
    Ok(out)
}

/// Runs `policy` until the source is exhausted or the iteration cap is hit.
pub fn run_experiment(
    task: &ToyTask,
    policy: &mut dyn CutoffPolicy,
    source: &mut dyn RuntimeSource,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let mut state = RunState::new(task);
    let mut rows = Vec::new();
    while opts.max_iterations.is_none_or(|m| rows.len() < m) {
        let Some(row) = source.next_row() else { break };
        rows.push(run_iteration(task, &mut state, policy, &row, opts)?);
    }
    Ok(RunRecord {
        policy: policy.name(),
        rows,
        final_theta: state.theta,
    })
}

/// Per iteration, the throughput-maximizing cutoff for the true runtimes.
pub fn oracle_cutoffs(trace: &RuntimeTrace) -> Result<Vec<usize>> {
    trace
        .rows()
        .iter()
        .map(|r| Ok(optimal_cutoff(&SortedRuntimes::from_unsorted(r.clone())?, 1)?.c))
        .collect()
}

/// Replays `trace` choosing each iteration's cutoff from its true runtimes.
pub fn oracle_cutoff_run(task: &ToyTask, trace: &RuntimeTrace, opts: &RunOptions) -> Result<RunRecord> {
    let cutoffs = oracle_cutoffs(trace)?;
    let mut state = RunState::new(task);
    let limit = opts.max_iterations.unwrap_or(usize::MAX).min(trace.len());
    let mut rows = Vec::with_capacity(limit);
    for (row, &c) in trace.rows().iter().zip(&cutoffs).take(limit) {
        rows.push(sync_step(task, &mut state, c, row, opts)?.0);
    }
    Ok(RunRecord {
        policy: "oracle".into(),
        rows,
        final_theta: state.theta,
    })
}

#[derive(Debug)]
struct Completion {
    time: f64,
    worker: usize,
    job: usize,
    gradient: Vec<f64>,
}

impl PartialEq for Completion {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    /// Reversed so the max-heap pops the earliest event, ties by worker id.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.worker.cmp(&self.worker))
    }
}

/// Asynchronous baseline: each worker loops independently. Its `k`-th job
/// takes `trace[k][w]` seconds, computes its gradient against the parameters
/// at the job's start, and applies `theta -= (lr / n) * f_w` at completion.
/// One row per completion event.
pub fn run_async(task: &ToyTask, trace: &RuntimeTrace, opts: &RunOptions) -> Result<RunRecord> {
    let n = trace.n_workers();
    let per_worker = task.per_worker(n)?;
    let jobs = opts.max_iterations.unwrap_or(usize::MAX).min(trace.len());
    let lr = task.cfg.lr / n as f64;
    let mut state = RunState::new(task);
    let mut heap = BinaryHeap::with_capacity(n);
    if jobs > 0 {
        for w in 0..n {
            heap.push(Completion {
                time: trace.rows()[0][w],
                worker: w,
                job: 0,
                gradient: task.worker_gradient(&state.theta, opts.seed, 0, w, per_worker),
            });
        }
    }
    let mut rows = Vec::with_capacity(jobs * n);
    let mut prev = 0.0;
    while let Some(ev) = heap.pop() {
        state.theta.iter_mut().zip(&ev.gradient).for_each(|(t, g)| *t -= lr * g);
        state.cum_time_s = ev.time;
        let (train_loss, val_loss) = state.losses(task, opts.eval_every);
        rows.push(RunRow {
            iteration: state.iteration,
            c: 1,
            iter_time_s: ev.time - prev,
            cum_time_s: ev.time,
            train_loss,
            val_loss,
            throughput: (rows.len() + 1) as f64 / ev.time,
        });
        prev = ev.time;
        state.iteration += 1;
        let next = ev.job + 1;
        if next < jobs {
            heap.push(Completion {
                time: ev.time + trace.rows()[next][ev.worker],
                worker: ev.worker,
                job: next,
                gradient: task.worker_gradient(&state.theta, opts.seed, next, ev.worker, per_worker),
            });
        }
    }
    Ok(RunRecord {
        policy: "async_staleness".into(),
        rows,
        final_theta: state.theta,
    })
}

/// Runs one named policy over a recorded trace. `model_cutoff` needs a
/// predictor; `history` pre-fills its observation buffer.
pub fn run_policy(
    kind: PolicyKind,
    task: &ToyTask,
    trace: &RuntimeTrace,
    predictor: Option<Arc<Predictor>>,
    model_cfg: &ModelPolicyConfig,
    history: &[Vec<f64>],
    opts: &RunOptions,
) -> Result<RunRecord> {
    let lag = predictor.as_ref().map_or(crate::trace::DEFAULT_LAG, |p| p.lag());
    let mut policy: Box<dyn CutoffPolicy> = match kind {
        PolicyKind::Oracle => return oracle_cutoff_run(task, trace, opts),
        PolicyKind::AsyncStaleness => return run_async(task, trace, opts),
        PolicyKind::FullSync => Box::new(FullSync),
        PolicyKind::StaticCutoff(c) => Box::new(StaticCutoff { c }),
        PolicyKind::GaussianOrder => Box::new(GaussianOrder::new(lag, model_cfg.c_min)?),
        PolicyKind::ModelCutoff => {
            let p = predictor.ok_or_else(|| Error::Config("model_cutoff needs a trained checkpoint".into()))?;
            if p.n_workers() != trace.n_workers() {
                return Err(Error::Config(format!(
                    "checkpoint models {} workers, trace has {}",
                    p.n_workers(),
                    trace.n_workers()
                )));
            }
            Box::new(ModelCutoff::new(p, *model_cfg)?.with_history(history)?)
        }
    };
    let mut rec = run_experiment(task, policy.as_mut(), &mut Replay::new(trace.clone()), opts)?;
    if let PolicyKind::StaticCutoff(c) = kind {
        rec.policy = format!("static_cutoff:{c}");
    }
    Ok(rec)
}
