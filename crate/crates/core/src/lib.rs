//! Learning-based stochastic MPC building blocks.
//!
//! A known nominal model is augmented with a Gaussian-process error model,
//! approximate Gaussian state distributions are propagated over the
//! prediction horizon, state and input constraints are tightened through
//! probabilistic reachable sets, and the resulting receding-horizon problem
//! is solved by sequential quadratic programming.
//!
//! The crate is `no_std` (with `alloc`); all math goes through `libm`, so
//! results are reproducible across platforms for a fixed seed.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod constraints;
pub mod gp;
pub mod mpc;
pub mod prob;
pub mod propagation;
pub mod sparse;

pub use prob::{Covariance, GaussianBelief};
