//! Segmentation labels from UV-fluorescent paint.
//!
//! A scene is photographed twice: once under ordinary light and once under UV,
//! where transparent fluorescent paint glows in class-specific colors. HSV
//! thresholds on the UV frame give masks and keypoints for the ordinary frame.
//! This crate holds the whole data path: light and camera orchestration
//! ([`capture`], [`plugnet`]), label extraction ([`colorops`], [`maskgen`],
//! [`fusion`]), persistence ([`datastore`]), a baseline learned segmenter
//! ([`segmodel`]), metrics ([`evalkit`]), the towel smoothing/folding policy
//! ([`foldpolicy`]), and a synthetic scene generator with exact ground truth
//! ([`synthscene`]) that stands in for the physical rig.

pub mod capture;
pub mod colorops;
pub mod datastore;
pub mod evalkit;
pub mod foldpolicy;
pub mod fusion;
pub mod maskgen;
pub mod model;
pub mod plugnet;
pub mod segmodel;
pub mod synthscene;

pub use model::{
    BinaryMask, CalibrationProfile, ClassSpec, HsvBand, ImageRgb, Keypoint, LabelSet, Mask, ModelError, PairedSample,
    PaintType, TimingRecord,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/profiles.md")]
    mod profiles {}
    #[doc = include_str!("../../../book/src/labeling.md")]
    mod labeling {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/capture.md")]
    mod capture {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/folding.md")]
    mod folding {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
