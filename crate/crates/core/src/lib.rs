//! Chance-constrained AC optimal power flow with hybrid (linear plus
//! Gaussian-process) power-flow models.
//!
//! The regression and propagation modules are generic over [`scalar::Real`];
//! the aliases below fix them to `f64`, which is what the grid, optimization
//! and validation layers use.

// `!(x >= 0.0)` style checks are meant to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acpf;
pub mod ccopf;
pub mod cli;
pub mod dataset;
pub mod gp;
pub mod grid;
pub mod kernel;
pub mod linmodel;
pub mod model;
pub mod nlp;
pub mod optim;
pub mod scalar;
pub mod sparsegp;
pub mod uncertainty;
pub mod validate;

pub type GpModel = gp::GpModel<f64>;
pub type SparseGpModel = sparsegp::SparseGpModel<f64>;
pub type LinearSurrogate = linmodel::LinearSurrogate<f64>;
pub type Hyperparams = kernel::Hyperparams<f64>;
pub type HybridModel = model::HybridModel<f64>;
pub type Margins = uncertainty::Margins<f64>;
pub type OutputMoments = uncertainty::OutputMoments<f64>;
