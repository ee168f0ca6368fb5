//! COVID-19 classification of chest CT volumes.
//!
//! The pipeline runs in two levels. Slices are first segmented (a classical
//! morphological pass for slice selection and a learned UNet for the lung mask),
//! closed-lung slices are filtered out, and the survivors are resampled into
//! fixed-length sets of 32. Each set is composed into a 3-channel clip and
//! classified by an R(2+1)D backbone with attention pooling. The per-set
//! embeddings of a volume are then pooled and classified again by a small MLP.

pub mod classifier;
pub mod compose;
pub mod config;
pub mod error;
pub mod features;
pub mod ingest;
pub mod metrics;
pub mod mlp;
pub mod morph;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod prepare;
pub mod raster;
pub mod select;
pub mod unet;

pub use error::{Error, Result};
