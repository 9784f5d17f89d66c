//! Kernel mixture of polynomials regression.
//!
//! Bayesian nonparametric regression with a basis of locally weighted
//! polynomials: posterior sampling at fixed `K`, selection of `K` by DIC,
//! a conjugate fixed-design variant, sieve least squares, a partial linear
//! model, and baseline smoothers for comparison.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod dist;
pub mod error;
pub mod fixed_design;
pub mod grid;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod model;
pub mod par;
pub mod plm;
pub mod posterior;
pub mod prior;
pub mod sampler;
pub mod sieve;

pub use data::Dataset;
pub use error::{KmpError, Result};
pub use grid::{MultiIndexSet, PartitionGrid};
pub use kernel::{KernelFamily, KernelSpec};
pub use model::KmpParams;
pub use par::Execution;
pub use prior::PriorConfig;
pub use sampler::{McmcConfig, PosteriorDraws};
