//! Numerical laboratory for flow-matching velocity fields on Gaussian
//! mixtures.
//!
//! The crate is organised around a single family of stochastic interpolants
//!
//! ```text
//!     x_t = alpha_t * x_0 + sigma_t * eps,    eps ~ N(0, I),
//! ```
//!
//! with `alpha_0 = 1, sigma_0 = 0` at the data end and `alpha_1 = 0,
//! sigma_1 = 1` at the noise end. Everything else is built on top of that
//! line:
//!
//! * [`schedules`] defines the interpolant coefficient schedules and the
//!   conditional-velocity / score algebra.
//! * [`gmm`] provides an exactly solvable data distribution (diagonal
//!   Gaussian mixtures) with closed-form marginal velocity and score at
//!   every noise level, used as the ground-truth oracle throughout.
//! * [`targets`] implements regression targets for velocity training:
//!   plain conditional targets, self-normalised multi-reference targets,
//!   and a streaming importance-sampling approximation to the marginal
//!   velocity.
//! * [`bank`] is the FIFO per-class memory bank that supplies reference
//!   batches during conditional training with classifier-free guidance.
//! * [`varepa`] contains time-dependent weighting functions and the
//!   weighted auxiliary-loss combinator for representation alignment.
//! * [`solvers`] implements Euler / Euler-Maruyama baselines and the
//!   interpolant-exact deterministic and stochastic samplers, plus the
//!   plan orchestration that switches between them.
//! * [`nn`] is a small self-contained MLP velocity model with analytic
//!   gradients, AdamW, and a training loop.
//! * [`profiler`] estimates the per-time variance of the regression
//!   targets and the mean-squared error of trained fields.
//! * [`dataset`], [`checkpoint`], [`config`], and [`cli`] provide the
//!   on-disk formats and the command-line front end.
//!
//! All randomness descends from one master seed through the named
//! substreams in [`rng`], so every artefact the crate produces is
//! reproducible bit-for-bit for a fixed seed, including under the
//! probe-parallel Monte Carlo loops.

pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gmm;
pub mod nn;
pub mod profiler;
pub mod rng;
pub mod schedules;
pub mod solvers;
pub mod svg;
pub mod targets;
pub mod varepa;

pub use error::{Error, Result};
