//! Few-shot particle localization in cryo-electron tomograms.
//!
//! A 3D U-Net is trained from a handful of point annotations per class in a
//! single tomogram. Training combines contrastive pretraining on sliding
//! windows, Volume Infill mixing of spatially transformed subvolumes and a
//! transformation-consistency loss on the network's own predictions.
//! Predictions are turned into particle coordinates with 26-connected
//! component labeling and scored by localization F1.

pub mod augment;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalx;
pub mod fastcc;
pub mod losses;
pub mod model;
pub mod phantom;
pub mod postproc;
pub mod sampling;
pub mod trainer;
pub mod voldata;

pub use error::{Error, Result};
