//! Quench dynamics of transverse-field Ising chains and kink statistics.
//!
//! The crate provides a Jordan-Wigner free-fermion engine that integrates the
//! closed equations of motion for the two-point correlators (optionally with
//! site dephasing), a dense many-body oracle for small chains, spectral
//! tools, closed-form reference predictions, and an analysis pipeline that
//! fits kink-number scaling laws to simulated or externally measured runs.

pub mod analysis;
pub mod correlator;
pub mod error;
pub mod integrator;
pub mod model;
pub mod oracle;
pub mod spectrum;
pub mod theory;
pub mod validation;

pub use error::{Error, ErrorCategory, Result};
