//! Terrain-aware self-supervised pretraining for building segmentation on
//! elevation rasters: synthetic scene generation, tiling and label budgets,
//! a residual U-Net with squeeze-excitation, the pretext and segmentation
//! objectives, training protocols and reporting.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dem_synth;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod report;
pub mod train;

pub use error::{Error, Result};
