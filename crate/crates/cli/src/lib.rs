//! Command-line tools and the HTTP control service for LUV rigs.
//!
//! The `luv` binary is a thin shell over [`commands`]; [`service::router`]
//! builds the HTTP API used by the calibration UI.

use std::collections::BTreeMap;

use serde::Serialize;

use luv_core::datastore::encode_png_mask;
use luv_core::maskgen::extract_labels;
use luv_core::{CalibrationProfile, ImageRgb, Keypoint, LabelSet};

pub mod commands;
pub mod config;
pub mod service;

pub use config::AppConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config file or profile. Exit status 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Anything that failed while running. Exit status 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Output of labeling one set of UV frames. `label` and `/api/preview` both
/// go through [`label_frames`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelReport {
    #[serde(skip)]
    pub labels: LabelSet,
    #[serde(skip)]
    pub mask_png: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub per_class_pixel_counts: BTreeMap<u8, usize>,
    pub keypoints: Vec<Keypoint>,
}

pub fn label_frames(frames: &[(f64, ImageRgb)], profile: &CalibrationProfile) -> Result<LabelReport, CliError> {
    let labels = extract_labels(frames, profile).map_err(CliError::runtime)?;
    let mask_png = encode_png_mask(&labels.mask).map_err(CliError::runtime)?;
    let mut per_class_pixel_counts: BTreeMap<u8, usize> =
        profile.classes.iter().filter(|c| !c.keypoint_mode).map(|c| (c.class_id, 0)).collect();
    for &c in labels.mask.classes().iter().filter(|&&c| c != 0) {
        *per_class_pixel_counts.entry(c).or_default() += 1;
    }
    let (width, height) = labels.mask.dims();
    Ok(LabelReport { keypoints: labels.keypoints.clone(), labels, mask_png, width, height, per_class_pixel_counts })
}
