//! Correctors, effective tensors and regularity experiments for elliptic
//! equations with several periodic or quasi-periodic scales.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix `f64`. Scale analysis, experiments and the command line work in
//! `f64` only.

pub mod cell;
pub mod cli;
pub mod coeff;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod krylov;
pub mod linalg;
pub mod pde;
pub mod quasicell;
pub mod real;
pub mod reperiod;
pub mod scales;
pub mod torus;

pub use error::{Error, Result};
pub use real::Real;

pub type Matrix = linalg::Mat<f64>;
pub type Spec = coeff::CoefficientSpec<f64>;
pub type Corrector = cell::CorrectorField<f64>;
pub type Effective = cell::EffectiveTensor<f64>;
pub type Grid = pde::Domain<f64>;
pub type Solution = pde::FieldOnGrid<f64>;
pub type QuasiSpec = quasicell::CutProjectSpec<f64>;
pub type Reperiodization = reperiod::ReperiodizationMap<f64>;
