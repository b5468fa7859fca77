//! Normalizing-flow density estimation with shared-estimator parameterization.
//!
//! The crate implements four ways of parameterizing the density estimators
//! behind a stack of coupling flows — one network per flow (`baseline`), one
//! network for all flows (`naive`), a shared trunk with per-flow projection
//! heads (`decomp`), and the shared trunk conditioned by a per-flow indication
//! embedding (`nanoflow`) — together with the machinery needed to train and
//! compare them: a small reverse-mode tensor tape, affine and rational-quadratic
//! spline couplings, actnorm, permutations, multi-scale squeeze/factor-out,
//! maximum-likelihood training with checkpoint averaging, deterministic toy
//! datasets, and an experiment sweep runner.

#![forbid(unsafe_code)]

pub mod coupling;
pub mod data;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod models;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
