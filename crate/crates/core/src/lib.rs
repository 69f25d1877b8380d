//! Particle simulation and quadrature toolkit for the diffusively driven
//! inelastic Boltzmann equation on the 3-torus.

pub mod cli;
pub mod collision_oracle;
pub mod dsmc;
pub mod error;
pub mod kinematics;
pub mod observables;
pub mod quadrature;
pub mod restitution;
pub mod rng;
pub mod spectral_probe;
pub mod stats;

pub use error::{Error, Result};
