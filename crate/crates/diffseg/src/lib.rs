//! File formats, training runs, sweeps and the command line for
//! diffusion-based agnostic segmentation. The numerics live in
//! `diffseg-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fit;
pub mod io;
pub mod predict;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
