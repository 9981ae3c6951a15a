//! Domain types shared by every stage of the labeling pipeline.
//!
//! Images are stored 8-bit and normalized to `[0, 1]` on access. All
//! constructors validate their invariants and return [`ModelError`] instead of
//! clamping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest and highest camera exposure accepted by a profile, in device units.
pub const EXPOSURE_RANGE: (f64, f64) = (0.0, 100.0);
/// White balance range in Kelvin.
pub const WHITE_BALANCE_RANGE: (u32, u32) = (2800, 6500);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("buffer length {actual} does not match {width}x{height}")]
    BufferLength { width: usize, height: usize, actual: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("mask class {class} exceeds maximum class {max}")]
    ClassOutOfRange { class: u8, max: u8 },
    #[error("invalid HSV band: {0}")]
    InvalidBand(String),
    #[error("invalid class spec: {0}")]
    InvalidClass(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("keypoint ({u}, {v}) outside {width}x{height} image")]
    KeypointOutOfBounds { u: f64, v: f64, width: usize, height: usize },
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawImage", into = "RawImage")]
pub struct ImageRgb {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl TryFrom<RawImage> for ImageRgb {
    type Error = ModelError;
    fn try_from(raw: RawImage) -> Result<Self, Self::Error> {
        ImageRgb::from_pixels(raw.width, raw.height, raw.pixels)
    }
}

impl From<ImageRgb> for RawImage {
    fn from(img: ImageRgb) -> Self {
        RawImage { width: img.width, height: img.height, pixels: img.pixels }
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), ModelError> {
    if width == 0 || height == 0 {
        return Err(ModelError::EmptyImage { width, height });
    }
    if width.checked_mul(height) != Some(len) {
        return Err(ModelError::BufferLength { width, height, actual: len });
    }
    Ok(())
}

impl ImageRgb {
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, ModelError> {
        check_dims(width, height, pixels.len())?;
        Ok(Self { width, height, pixels })
    }

    /// Uniformly filled image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ModelError> {
        Self::from_pixels(width, height, vec![rgb; width.saturating_mul(height)])
    }

    /// Builds an image from normalized channels, rounding to the nearest 8-bit
    /// level. Values outside `[0, 1]` are clamped.
    pub fn from_normalized(width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<Self, ModelError> {
        check_dims(width, height, rgb.len())?;
        let pixels = rgb
            .iter()
            .map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Normalized channels of one pixel.
    pub fn normalized(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixel(x, y).map(|c| f64::from(c) / 255.0)
    }

    /// Whole image as normalized channels.
    pub fn to_normalized(&self) -> Vec<[f64; 3]> {
        self.pixels.iter().map(|p| p.map(|c| f64::from(c) / 255.0)).collect()
    }

    pub fn into_pixels(self) -> Vec<[u8; 3]> {
        self.pixels
    }
}

/// Per-pixel foreground flags, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ModelError> {
        check_dims(width, height, bits.len())?;
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, ModelError> {
        Self::new(width, height, vec![false; width.saturating_mul(height)])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self, ModelError> {
        let mut bits = Vec::with_capacity(width.saturating_mul(height));
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Class-indexed segmentation mask. 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    classes: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self, ModelError> {
        check_dims(width, height, classes.len())?;
        Ok(Self { width, height, classes })
    }

    /// Like [`Mask::new`] but also rejects indices above `max_class`.
    pub fn with_max_class(width: usize, height: usize, classes: Vec<u8>, max_class: u8) -> Result<Self, ModelError> {
        if let Some(&class) = classes.iter().find(|&&c| c > max_class) {
            return Err(ModelError::ClassOutOfRange { class, max: max_class });
        }
        Self::new(width, height, classes)
    }

    pub fn background(width: usize, height: usize) -> Result<Self, ModelError> {
        Self::new(width, height, vec![0; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.classes[y * self.width + x] = class;
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn max_class(&self) -> u8 {
        self.classes.iter().copied().max().unwrap_or(0)
    }

    /// Pixels belonging to `class`.
    pub fn binary(&self, class: u8) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.classes.iter().map(|&c| c == class).collect(),
        }
    }

    /// Writes `class` wherever `mask` is set.
    pub fn paint(&mut self, mask: &BinaryMask, class: u8) -> Result<(), ModelError> {
        if mask.dims() != self.dims() {
            return Err(ModelError::DimensionMismatch(self.width, self.height, mask.width, mask.height));
        }
        for (dst, &on) in self.classes.iter_mut().zip(&mask.bits) {
            if on {
                *dst = class;
            }
        }
        Ok(())
    }
}

/// Subpixel point label reduced from a fluorescent blob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub class_id: u8,
    /// Column, pixels.
    pub u: f64,
    /// Row, pixels.
    pub v: f64,
    /// Pixel count of the source blob.
    pub area: usize,
}

impl Keypoint {
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<(), ModelError> {
        let inside = self.u >= 0.0 && self.v >= 0.0 && self.u < width as f64 && self.v < height as f64;
        if inside {
            Ok(())
        } else {
            Err(ModelError::KeypointOutOfBounds { u: self.u, v: self.v, width, height })
        }
    }
}

/// Closed HSV box. Hue in degrees `[0, 360)`; when `hue_min > hue_max` the
/// band wraps through 0°.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBand", into = "RawBand")]
pub struct HsvBand {
    hue_min: f64,
    hue_max: f64,
    sat_min: f64,
    sat_max: f64,
    val_min: f64,
    val_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBand {
    hue_min: f64,
    hue_max: f64,
    sat_min: f64,
    sat_max: f64,
    val_min: f64,
    val_max: f64,
}

impl TryFrom<RawBand> for HsvBand {
    type Error = ModelError;
    fn try_from(r: RawBand) -> Result<Self, Self::Error> {
        HsvBand::new((r.hue_min, r.hue_max), (r.sat_min, r.sat_max), (r.val_min, r.val_max))
    }
}

impl From<HsvBand> for RawBand {
    fn from(b: HsvBand) -> Self {
        RawBand {
            hue_min: b.hue_min,
            hue_max: b.hue_max,
            sat_min: b.sat_min,
            sat_max: b.sat_max,
            val_min: b.val_min,
            val_max: b.val_max,
        }
    }
}

impl HsvBand {
    pub fn new(hue: (f64, f64), sat: (f64, f64), val: (f64, f64)) -> Result<Self, ModelError> {
        let hue_ok = |h: f64| (0.0..360.0).contains(&h);
        let unit_ok = |x: f64| (0.0..=1.0).contains(&x);
        if !hue_ok(hue.0) || !hue_ok(hue.1) {
            return Err(ModelError::InvalidBand(format!("hue bounds {:?} outside [0, 360)", hue)));
        }
        if !unit_ok(sat.0) || !unit_ok(sat.1) || sat.0 > sat.1 {
            return Err(ModelError::InvalidBand(format!("saturation bounds {:?}", sat)));
        }
        if !unit_ok(val.0) || !unit_ok(val.1) || val.0 > val.1 {
            return Err(ModelError::InvalidBand(format!("value bounds {:?}", val)));
        }
        Ok(Self { hue_min: hue.0, hue_max: hue.1, sat_min: sat.0, sat_max: sat.1, val_min: val.0, val_max: val.1 })
    }

    /// Band accepting every HSV triple.
    pub fn full() -> Self {
        Self { hue_min: 0.0, hue_max: 359.999_999, sat_min: 0.0, sat_max: 1.0, val_min: 0.0, val_max: 1.0 }
    }

    pub fn hue(&self) -> (f64, f64) {
        (self.hue_min, self.hue_max)
    }

    pub fn sat(&self) -> (f64, f64) {
        (self.sat_min, self.sat_max)
    }

    pub fn val(&self) -> (f64, f64) {
        (self.val_min, self.val_max)
    }

    pub fn wraps(&self) -> bool {
        self.hue_min > self.hue_max
    }
}

/// Fluorescent marking substance, descriptive only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaintType {
    Lacquer,
    Dye,
    WaterBased,
    NaturalFluorescence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: u8,
    pub name: String,
    pub band: HsvBand,
    pub min_area: usize,
    pub morphology_open_radius: usize,
    pub morphology_close_radius: usize,
    pub paint_type: PaintType,
    /// Blobs are reduced to centroid keypoints instead of mask regions.
    pub keypoint_mode: bool,
}

impl ClassSpec {
    /// Class with the default cleanup parameters (open 1, close 1, min area 10).
    pub fn new(class_id: u8, name: impl Into<String>, band: HsvBand) -> Self {
        Self {
            class_id,
            name: name.into(),
            band,
            min_area: 10,
            morphology_open_radius: 1,
            morphology_close_radius: 1,
            paint_type: PaintType::Lacquer,
            keypoint_mode: false,
        }
    }
}

fn default_settle_delay() -> u64 {
    250
}

/// Persisted thresholds and camera settings for one labeling setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub uv_exposure: f64,
    pub std_exposure: f64,
    /// Kelvin; held fixed for a whole session.
    pub white_balance: u32,
    /// Milliseconds between switching lights and grabbing a frame.
    #[serde(default = "default_settle_delay")]
    pub settle_delay_ms: u64,
    /// Extra UV exposures captured and fused on every sample. Empty disables
    /// bracketing.
    #[serde(default)]
    pub bracket: Vec<f64>,
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ModelError::InvalidProfile(format!("bad profile name {:?}", self.name)));
        }
        if self.classes.is_empty() {
            return Err(ModelError::InvalidProfile("profile needs at least one class".into()));
        }
        let mut seen = [false; 256];
        for class in &self.classes {
            if class.class_id == 0 {
                return Err(ModelError::InvalidClass(format!("{}: class id 0 is reserved for background", class.name)));
            }
            if std::mem::replace(&mut seen[class.class_id as usize], true) {
                return Err(ModelError::InvalidClass(format!("duplicate class id {}", class.class_id)));
            }
        }
        let (lo, hi) = EXPOSURE_RANGE;
        for e in [self.uv_exposure, self.std_exposure].iter().chain(&self.bracket) {
            if !(lo..=hi).contains(e) {
                return Err(ModelError::InvalidProfile(format!("exposure {e} outside [{lo}, {hi}]")));
            }
        }
        let (wlo, whi) = WHITE_BALANCE_RANGE;
        if !(wlo..=whi).contains(&self.white_balance) {
            return Err(ModelError::InvalidProfile(format!("white balance {} outside [{wlo}, {whi}]", self.white_balance)));
        }
        Ok(())
    }

    pub fn max_class_id(&self) -> u8 {
        self.classes.iter().map(|c| c.class_id).max().unwrap_or(0)
    }

    pub fn class(&self, class_id: u8) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    /// UV exposures a capture should take: the bracket if set, otherwise the
    /// single UV exposure.
    pub fn uv_exposures(&self) -> Vec<f64> {
        if self.bracket.is_empty() {
            vec![self.uv_exposure]
        } else {
            let mut e = self.bracket.clone();
            e.sort_by(f64::total_cmp);
            e
        }
    }
}

/// Mask plus keypoints extracted from one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub mask: Mask,
    pub keypoints: Vec<Keypoint>,
}

/// Wall-clock accounting for one sample. All values in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub capture_seconds: f64,
    pub label_seconds: f64,
    /// Seconds since the capture started at which the standard frame landed.
    pub std_captured_at: f64,
    /// Seconds since the capture started at which the last UV frame landed.
    pub uv_captured_at: f64,
}

/// One standard-lighting frame with its UV counterparts and optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub sample_id: String,
    pub std_image: ImageRgb,
    /// `(exposure, image)` pairs, ascending exposure.
    pub uv_images: Vec<(f64, ImageRgb)>,
    pub labels: Option<LabelSet>,
    pub timing: TimingRecord,
}

impl PairedSample {
    pub fn new(
        sample_id: impl Into<String>,
        std_image: ImageRgb,
        uv_images: Vec<(f64, ImageRgb)>,
        labels: Option<LabelSet>,
        timing: TimingRecord,
    ) -> Result<Self, ModelError> {
        let sample = Self { sample_id: sample_id.into(), std_image, uv_images, labels, timing };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sample_id.is_empty() || !self.sample_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(ModelError::InvalidSample(format!("bad sample id {:?}", self.sample_id)));
        }
        if self.uv_images.is_empty() {
            return Err(ModelError::InvalidSample("at least one UV image required".into()));
        }
        let (w, h) = self.std_image.dims();
        for (_, img) in &self.uv_images {
            if img.dims() != (w, h) {
                return Err(ModelError::DimensionMismatch(w, h, img.width(), img.height()));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.mask.dims() != (w, h) {
                return Err(ModelError::DimensionMismatch(w, h, labels.mask.width(), labels.mask.height()));
            }
            for kp in &labels.keypoints {
                kp.check_bounds(w, h)?;
            }
        }
        let t = &self.timing;
        if [t.capture_seconds, t.label_seconds, t.std_captured_at, t.uv_captured_at].iter().any(|d| d.is_nan() || *d < 0.0) {
            return Err(ModelError::InvalidSample("durations must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_buffers() {
        assert!(matches!(ImageRgb::from_pixels(0, 3, vec![]), Err(ModelError::EmptyImage { .. })));
        assert!(matches!(ImageRgb::from_pixels(2, 2, vec![[0; 3]; 3]), Err(ModelError::BufferLength { .. })));
        assert!(ImageRgb::from_pixels(2, 2, vec![[0; 3]; 4]).is_ok());
    }

    #[test]
    fn image_deserialize_validates() {
        let bad = r#"{"width":2,"height":2,"pixels":[[0,0,0]]}"#;
        assert!(serde_json::from_str::<ImageRgb>(bad).is_err());
    }

    #[test]
    fn band_invariants() {
        assert!(HsvBand::new((350.0, 10.0), (0.2, 1.0), (0.3, 1.0)).unwrap().wraps());
        assert!(HsvBand::new((0.0, 10.0), (0.5, 0.2), (0.0, 1.0)).is_err());
        assert!(HsvBand::new((0.0, 360.0), (0.0, 1.0), (0.0, 1.0)).is_err());
        assert!(HsvBand::new((0.0, 10.0), (0.0, 1.0), (0.9, 0.1)).is_err());
        let json = r#"{"hue_min":0,"hue_max":10,"sat_min":0.9,"sat_max":0.1,"val_min":0,"val_max":1}"#;
        assert!(serde_json::from_str::<HsvBand>(json).is_err());
    }

    #[test]
    fn mask_class_bound() {
        assert!(Mask::with_max_class(2, 1, vec![0, 3], 2).is_err());
        assert!(Mask::with_max_class(2, 1, vec![0, 2], 2).is_ok());
    }

    fn profile() -> CalibrationProfile {
        CalibrationProfile {
            name: "p".into(),
            classes: vec![ClassSpec::new(1, "red", HsvBand::full())],
            uv_exposure: 50.0,
            std_exposure: 40.0,
            white_balance: 4600,
            settle_delay_ms: 0,
            bracket: vec![],
        }
    }

    #[test]
    fn profile_validation() {
        let mut p = profile();
        p.validate().unwrap();
        p.classes.push(ClassSpec::new(1, "dup", HsvBand::full()));
        assert!(p.validate().is_err());
        let mut p = profile();
        p.classes.clear();
        assert!(p.validate().is_err());
        let mut p = profile();
        p.uv_exposure = 400.0;
        assert!(p.validate().is_err());
        let mut p = profile();
        p.classes[0].class_id = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn sample_dimension_check() {
        let a = ImageRgb::filled(4, 4, [0; 3]).unwrap();
        let b = ImageRgb::filled(4, 5, [0; 3]).unwrap();
        let t = TimingRecord::default();
        assert!(PairedSample::new("s1", a.clone(), vec![(50.0, b)], None, t).is_err());
        assert!(PairedSample::new("s1", a.clone(), vec![], None, t).is_err());
        assert!(PairedSample::new("../x", a.clone(), vec![(50.0, a.clone())], None, t).is_err());
        assert!(PairedSample::new("s1", a.clone(), vec![(50.0, a)], None, t).is_ok());
    }

    #[test]
    fn profile_roundtrip_json() {
        let p = profile();
        let back: CalibrationProfile = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
    }
}
