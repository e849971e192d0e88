//! Path-integral stochastic optimal control.
//!
//! Control problems of the form
//!
//! ```text
//! dX = b(t, X) dt + σ(t, X) (u(t, X) dt + dW)
//! S  = Φ(X(t1)) + ∫ V(t, X) + ½ u'u dt + ∫ u'dW
//! ```
//!
//! have an optimal cost-to-go `J = −log E[exp(−S)]` that can be estimated from
//! paths sampled under *any* importance control `u`. This crate provides:
//!
//! * [`sde`]: problem definitions and a reproducible Euler–Maruyama path simulator,
//! * [`cost`]: path costs, normalized path weights, effective sample fraction
//!   and the weight-variance bounds,
//! * [`estimator`]: weighted averages, the control-correction estimator and the
//!   per-node linear solve for parametrized feedback controllers,
//! * [`iis`]: the iterative importance sampling driver,
//! * [`bench_gbm`]: the geometric Brownian motion benchmark with closed-form and
//!   finite-difference oracles,
//! * [`cli`]: configuration, expression grammar and artifact writers used by the
//!   `pathint` binary.

pub mod bench_gbm;
pub mod cli;
pub mod cost;
pub mod error;
pub mod estimator;
pub mod iis;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
