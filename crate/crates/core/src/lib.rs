//! Variational inference for the sticky HDP switching linear dynamical system,
//! with a Gaussian-HMM baseline, a synthetic data generator and NMI scoring.

pub mod app;
pub mod baseline;
pub mod chain;
pub mod cluster;
pub mod config;
pub mod dist;
pub mod error;
pub mod hdp;
pub mod io;
pub mod lds;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod moments;
pub mod synth;
pub mod vbem;

pub use error::{Error, Result};
