//! Gaussian Volterra processes, their variance curves, and the semilinear
//! heat equation that links backward SDEs driven by them to PDEs.
//!
//! Every routine is generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`). The `f64` instantiations used by the command line tool
//! are re-exported as type aliases at the crate root.

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod error;
pub mod expr;
pub mod kernels;
pub mod operators;
pub mod pde;
pub mod quad;
pub mod scalar;
pub mod simulate;
pub mod spline;
pub mod stats;
pub mod table;

pub use error::{Error, Result};
pub use expr::{Expr, ExprError};
pub use kernels::{Family, Kernel};
pub use scalar::Real;

pub type KernelSpec = kernels::KernelSpec<f64>;
pub type Volatility = operators::Volatility<f64>;
pub type VarianceCurve = operators::VarianceCurve<f64>;
pub type SingularQuadRule = operators::SingularQuadRule<f64>;

pub type KernelSpecF32 = kernels::KernelSpec<f32>;
pub type VarianceCurveF32 = operators::VarianceCurve<f32>;
pub type TimeGrid = simulate::TimeGrid<f64>;
pub type PathEnsemble = simulate::PathEnsemble<f64>;
pub type SpaceGrid = pde::SpaceGrid<f64>;
pub type PdeSolution = pde::PdeSolution<f64>;
pub type Driver = pde::Driver<f64>;
pub type TerminalCondition = pde::TerminalCondition<f64>;
pub type BsdeSolution = bsde::BsdeSolution<f64>;
