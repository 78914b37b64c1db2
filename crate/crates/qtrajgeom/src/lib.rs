//! Numerical lab for continuously monitored qubits with a rotating
//! measurement axis: stochastic trajectory sampling, most-likely-path
//! boundary-value solving, measurement-induced geometric phases and their
//! topological transitions, and Gaussian fluctuation corrections.

pub mod action;
pub mod bloch;
pub mod corrections;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod optimal;
pub mod par;

pub use bloch::{BlochState, MeasurementProtocol, MeasurementVariant};
pub use error::{QtError, Result};
