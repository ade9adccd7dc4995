//! Translation of triply periodic minimal surfaces (Gyroid, Diamond, Schwarz P)
//! into error-bounded, C²-continuous NURBS B-rep solids written as STEP files.
//!
//! The pipeline is split into the modules below, roughly in execution order:
//! analytic evaluation, ε-density sampling, constrained fitting, assembly,
//! STEP output and verification.

pub mod assembly;
pub mod config;
pub mod constraints;
pub mod cpia;
pub mod error;
pub mod geom;
pub mod nurbs;
pub mod pipeline;
pub mod sampling;
pub mod step_io;
pub mod verify;
pub mod weierstrass;

pub use error::{Error, Result};
