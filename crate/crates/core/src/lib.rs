//! Dynamic discrete choice models with permanent unobserved heterogeneity:
//! solving, simulating, two-step fixed-grid sieve estimation, rank estimation
//! of the number of types, and a numerical identification bench.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dgp;
pub mod error;
pub mod ident;
pub mod io;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod montecarlo;
pub mod rank;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod simulator;
pub mod solver;
pub mod transition;

pub use error::{DdcError, Result};
pub use scalar::Scalar;

/// Double-precision aliases for the generic core.
pub type Spec = model::ModelSpec<f64>;
pub type Grid = model::StateGrid<f64>;
pub type Kernel = model::TransitionKernel<f64>;
pub type Params = model::PayoffParams<f64>;
pub type Values = solver::ValueFunction<f64>;
pub type Ccps = solver::CcpTable<f64>;
