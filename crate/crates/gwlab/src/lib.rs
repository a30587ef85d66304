//! Simulation and verification laboratory for supercritical Galton-Watson
//! processes with countably many types.

pub mod cli;
pub mod conditions;
pub mod enumeration;
pub mod error;
pub mod forward;
pub mod law;
pub mod model;
pub mod report;
pub mod rng;
pub mod spectral;
pub mod spine;
pub mod types;

pub use error::{Error, Result};
