//! Hypoelliptic diffusion toolkit: Hoermander rank analysis, frozen Gaussian
//! kernels, parametrix and Trotter-splitting densities, a Monte Carlo oracle,
//! and numerical checks of Gaussian-type derivative bounds.

pub mod cli;
pub mod error;
pub mod estimates;
pub mod fields;
pub mod grid;
pub mod hoermander;
pub mod kernels;
pub mod parametrix;
pub mod oracle;
pub mod quad;
pub mod splitting;

pub use error::{Error, Result};
