//! Sequential kernel ridge-less regression in the NTK regime: closed-form
//! learning curves from a kernel eigenspectrum, and a Monte Carlo simulator
//! that runs the actual regressions to check them.

pub mod checks;
pub mod config;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod par;
pub mod points;
pub mod quadrature;
pub mod series;
pub mod sim;
pub mod spectral;
pub mod theory;

pub use error::{Error, Result};
