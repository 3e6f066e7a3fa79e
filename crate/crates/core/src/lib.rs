//! Amortized Bayesian inversion with conditional flow matching.
//!
//! A transformer velocity field `v(m_t, t, d, e)` is trained on samples of
//! the joint distribution of parameters `m`, designs `e` and observations
//! `d`; integrating it from a prior draw yields posterior samples of
//! `m | d, e`. The crate also ships the three forward models used as
//! benchmarks, a random-walk Metropolis–Hastings baseline and the error
//! metrics used to compare them.

pub mod cfm;
pub mod data;
mod error;
pub mod forward;
pub mod mcmc;
pub mod metrics;
pub mod net;
pub mod rng;

pub use error::{Error, Result};
pub use forward::{TaskKind, TaskSpec};
