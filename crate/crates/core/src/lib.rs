//! Dynamic-cutoff synchronous distributed SGD.
//!
//! A deep Markov model of per-worker mini-batch runtimes is trained with an
//! amortized left-right guide; at run time the guide's posterior is pushed
//! through the model to predict the next iteration's joint runtimes, and the
//! parameter server waits only for the `c` workers that maximize gradient
//! throughput `c / x_(c)`. A deterministic discrete-event harness compares
//! this policy against fully synchronous, static, Gaussian order-statistic,
//! oracle and asynchronous baselines.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustersim;
pub mod dmm;
pub mod error;
pub mod guide;
pub mod harness;
pub mod ndmath;
pub mod normal;
pub mod orderstats;
pub mod predictor;
pub mod seed;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
