//! Reliability scoring for segmentation models on satellite imagery: feature
//! space OOD distances, ensemble uncertainty, selective prediction metrics,
//! a learned failure combiner and attribute trend analysis.

pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod heatmap;
pub mod link;
pub mod manifest;
pub mod ood;
pub mod pipeline;
pub mod record;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, ErrorClass, Result};
