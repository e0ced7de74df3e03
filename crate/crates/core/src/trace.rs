//! Per-worker runtime traces: the data model, the tab-separated file format,
//! and the single-scalar normalization applied before modeling.
//!
//! File layout:
//!
//! ```text
//! #workers=3
//! 0	1.02	0.98	1.4
//! 1	1.1	0.97	1.38
//! ```
//!
//! Runtimes are written as shortest round-trip decimals and may carry at most
//! nine fractional digits (nanosecond resolution).

// The format example contains literal tabs.
#![allow(clippy::tabs_in_doc_comments)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default fixed-lag window length.
pub const DEFAULT_LAG: usize = 20;

/// Maximum fractional digits allowed for a runtime literal in a trace file.
pub const MAX_FRACTION_DIGITS: usize = 9;

/// A `T x n` matrix of positive per-worker gradient compute times in seconds.
///
/// Row `t` is SGD iteration `t`; column `j` is always worker `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeTrace {
    n_workers: usize,
    rows: Vec<Vec<f64>>,
}

impl RuntimeTrace {
    /// Builds a trace, checking arity and positivity of every entry.
    pub fn new(n_workers: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Domain("trace needs at least one worker".into()));
        }
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n_workers {
                return Err(Error::shape(format!("trace row {t}"), n_workers, row.len()));
            }
            if let Some(j) = row.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Domain(format!(
                    "non-positive runtime {} at iteration {t}, worker {j}",
                    row[j]
                )));
            }
        }
        Ok(Self { n_workers, rows })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, iteration: usize) -> Option<&[f64]> {
        self.rows.get(iteration).map(Vec::as_slice)
    }

    /// Rows `[start, end)` as a new trace with iterations renumbered from zero.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows.len() {
            return Err(Error::Domain(format!(
                "slice {start}..{end} out of range for {} rows",
                self.rows.len()
            )));
        }
        Ok(Self {
            n_workers: self.n_workers,
            rows: self.rows[start..end].to_vec(),
        })
    }

    /// The `lag` rows starting at `start`, as a conditioning window.
    pub fn window(&self, start: usize, lag: usize) -> Result<LagWindow> {
        if start + lag > self.rows.len() {
            return Err(Error::InsufficientData(format!(
                "window {start}..{} exceeds trace length {}",
                start + lag,
                self.rows.len()
            )));
        }
        LagWindow::new(self.rows[start..start + lag].to_vec())
    }

    /// Renders the trace in the on-disk text format.
    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("#workers={}\n", self.n_workers);
        for (t, row) in self.rows.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for &v in row {
                let lit = v.to_string();
                if fraction_digits(&lit) > MAX_FRACTION_DIGITS {
                    return Err(Error::Domain(format!(
                        "runtime {lit} at iteration {t} needs more than {MAX_FRACTION_DIGITS} fractional digits"
                    )));
                }
                out.push('\t');
                out.push_str(&lit);
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses the on-disk text format. Errors name the 1-based line number.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let n_workers = loop {
            let Some((i, line)) = lines.next() else {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing #workers=<n> header".into(),
                });
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let n = line
                .strip_prefix("#workers=")
                .and_then(|s| s.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("expected #workers=<n> header, found {line:?}"),
                })?;
            break n;
        };

        let mut rows = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let iter_field = fields.next().unwrap_or_default();
            let iteration: usize = iter_field.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad iteration index {iter_field:?}"),
            })?;
            if iteration != rows.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("iteration gap: expected {}, found {iteration}", rows.len()),
                });
            }
            let mut row = Vec::with_capacity(n_workers);
            for field in fields {
                let field = field.trim();
                if fraction_digits(field) > MAX_FRACTION_DIGITS {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("runtime {field:?} has more than {MAX_FRACTION_DIGITS} fractional digits"),
                    });
                }
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad runtime literal {field:?}"),
                })?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("non-positive runtime at line {lineno}"),
                    });
                }
                row.push(v);
            }
            if row.len() != n_workers {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {n_workers} runtimes, found {}", row.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { n_workers, rows })
    }

    /// Rounds every runtime to the file format's nanosecond resolution.
    pub fn quantized(mut self) -> Self {
        for row in &mut self.rows {
            for v in row.iter_mut() {
                *v = quantize(*v);
            }
        }
        self
    }
}

/// Rounds to nine fractional digits, never below one nanosecond.
pub fn quantize(v: f64) -> f64 {
    ((v * 1e9).round() / 1e9).max(1e-9)
}

fn fraction_digits(lit: &str) -> usize {
    let mantissa = lit.split(['e', 'E']).next().unwrap_or_default();
    mantissa.split_once('.').map_or(0, |(_, frac)| frac.len())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<RuntimeTrace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RuntimeTrace::from_text(&text)
}

pub fn save_trace(trace: &RuntimeTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace.to_text()?).map_err(|e| Error::io(path, e))
}

/// `lag` consecutive runtime vectors, the model's conditioning context.
#[derive(Debug, Clone, PartialEq)]
pub struct LagWindow {
    rows: Vec<Vec<f64>>,
}

impl LagWindow {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Domain("empty lag window".into()));
        };
        let n = first.len();
        if n == 0 {
            return Err(Error::Domain("lag window rows must be non-empty".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::shape(format!("lag window row {i}"), n, r.len()));
            }
        }
        Ok(Self { rows })
    }

    pub fn lag(&self) -> usize {
        self.rows.len()
    }

    pub fn n_workers(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

/// Global divisor applied to runtimes before they reach the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub scale: f64,
}

impl NormalizationSpec {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!(
                "normalization scale must be positive, got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    pub fn unit() -> Self {
        Self { scale: 1.0 }
    }

    pub fn apply(&self, v: f64) -> f64 {
        v / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale
    }
}

/// Scale = 2 x the mean of the first `lag x n_workers` entries.
pub fn fit_normalization(trace: &RuntimeTrace, lag: usize) -> Result<NormalizationSpec> {
    if lag == 0 {
        return Err(Error::Domain("lag must be positive".into()));
    }
    if trace.len() < lag {
        return Err(Error::InsufficientData(format!(
            "need {lag} rows to fit normalization, trace has {}",
            trace.len()
        )));
    }
    let count = (lag * trace.n_workers()) as f64;
    let sum: f64 = trace.rows[..lag].iter().flatten().sum();
    NormalizationSpec::new(2.0 * sum / count)
}

pub fn normalize(trace: &RuntimeTrace, spec: &NormalizationSpec) -> RuntimeTrace {
    map_entries(trace, |v| spec.apply(v))
}

pub fn denormalize(trace: &RuntimeTrace, spec: &NormalizationSpec) -> RuntimeTrace {
    map_entries(trace, |v| spec.invert(v))
}

fn map_entries(trace: &RuntimeTrace, f: impl Fn(f64) -> f64) -> RuntimeTrace {
    RuntimeTrace {
        n_workers: trace.n_workers,
        rows: trace.rows.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect(),
    }
}
