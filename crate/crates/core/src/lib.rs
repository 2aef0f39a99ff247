//! Receding horizon control of linear parabolic equations with random
//! diffusion coefficients, at desk scale.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mesh_fem;
pub mod ocp;
pub mod projections;
pub mod random_fields;
pub mod rhc;
pub mod risk;
pub mod setup;
pub mod spectral_actuators;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
