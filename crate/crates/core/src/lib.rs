//! Numerical laboratory for McKean SDEs with density-dependent (moderated) and
//! conditional-expectation coefficients: PDE solvers, particle engines,
//! estimators and the checks that tie them together.

pub mod coefficients;
pub mod conditional;
pub mod config;
pub mod error;
pub mod estimators;
pub mod fp_solver;
pub mod grid;
pub mod metrics;
pub mod mild;
pub mod particles;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod study;

pub use coefficients::{DiffusionModel, HypothesisReport, SigmaLaw};
pub use error::{Error, Result};
pub use grid::{DensityField, GridSpec, InitialDensity, PathField};
pub use report::{Check, VerificationReport};
