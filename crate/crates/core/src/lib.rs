//! Γ-nets: value estimators that take the prediction timescale as an input
//! and train on many timescales from every transition.

pub mod config;
pub mod deep;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod linear;
pub mod snapshot;
pub mod timescale;

pub use error::{Error, Result};
pub use timescale::{gamma_to_tau, tau_to_gamma, Timescale};
