//! Paired capture: one frame under ordinary light, then one or more under UV.
//!
//! Lights rest in the state "ambient on, UV off". Every operation here
//! returns the rig to that state, including when it fails.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::colorops::image_to_hsv;
use crate::datastore::{DatasetWriter, DatastoreError};
use crate::evalkit::{spl_from_seconds, SplSummary};
use crate::maskgen::{extract_labels, threshold_plane, MaskgenError};
use crate::model::{CalibrationProfile, ImageRgb, ModelError, PairedSample, TimingRecord};
use crate::plugnet::{PlugClient, PlugError, RelayCommand, RelayState};
use crate::synthscene::{randomize, render_standard, render_uv, SceneSpec};

/// Lowest and highest value counted as a well-exposed label pixel.
pub const SWEEP_VALUE_RANGE: (f64, f64) = (0.2, 0.98);

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("camera: {0}")]
    Camera(String),
    #[error("light: {0}")]
    Light(String),
    #[error("plug: {0}")]
    Plug(#[from] PlugError),
    #[error("no more frames to replay")]
    Exhausted,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("labeling: {0}")]
    Maskgen(#[from] MaskgenError),
    #[error("persistence: {0}")]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("session failed: {failed} of {attempted} samples failed; first error: {first}")]
    SessionFailed { failed: usize, attempted: usize, first: String },
}

pub trait CameraPort {
    fn set_exposure(&mut self, exposure: f64) -> Result<(), CaptureError>;
    fn set_white_balance(&mut self, kelvin: u32) -> Result<(), CaptureError>;
    fn grab(&mut self) -> Result<ImageRgb, CaptureError>;
}

/// A switchable light.
pub trait LightChannel: Send {
    fn set(&mut self, on: bool) -> Result<(), CaptureError>;
}

/// Light on a smart plug.
#[derive(Debug)]
pub struct PlugChannel(pub PlugClient);

impl LightChannel for PlugChannel {
    fn set(&mut self, on: bool) -> Result<(), CaptureError> {
        self.0.set_relay(RelayCommand { state: RelayState::from_bool(on) })?;
        Ok(())
    }
}

pub struct LightRig {
    pub uv: Box<dyn LightChannel>,
    /// `None` when room light is not switchable.
    pub ambient: Option<Box<dyn LightChannel>>,
    pub settle_delay: Duration,
}

impl std::fmt::Debug for LightRig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LightRig")
            .field("ambient", &self.ambient.is_some())
            .field("settle_delay", &self.settle_delay)
            .finish()
    }
}

impl LightRig {
    fn settle(&self) {
        if !self.settle_delay.is_zero() {
            std::thread::sleep(self.settle_delay);
        }
    }

    fn set(&mut self, ambient: bool, uv: bool) -> Result<(), CaptureError> {
        if let Some(a) = self.ambient.as_mut() {
            a.set(ambient)?;
        }
        self.uv.set(uv)
    }

    /// Ambient on, UV off. Tries both channels even if the first fails.
    pub fn rest(&mut self) -> Result<(), CaptureError> {
        let a = self.ambient.as_mut().map_or(Ok(()), |a| a.set(true));
        let u = self.uv.set(false);
        a.and(u)
    }

    /// Runs `f`, then restores the rest state whatever the outcome.
    fn guarded<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, CaptureError>) -> Result<T, CaptureError> {
        let out = f(self);
        let rest = self.rest();
        match (out, rest) {
            (Ok(v), Ok(())) => Ok(v),
            (Ok(_), Err(e)) => Err(e),
            (Err(e), r) => {
                if let Err(r) = r {
                    log::error!("could not restore lights after failure: {r}");
                }
                Err(e)
            }
        }
    }
}

/// Captures a standard frame and the UV frames of `bracket` (or the
/// profile's UV exposures), ascending.
pub fn capture_pair(
    camera: &mut dyn CameraPort,
    rig: &mut LightRig,
    profile: &CalibrationProfile,
    bracket: Option<&[f64]>,
    sample_id: &str,
) -> Result<PairedSample, CaptureError> {
    let mut exposures = bracket.map_or_else(|| profile.uv_exposures(), <[f64]>::to_vec);
    if exposures.is_empty() || exposures.iter().any(|e| !e.is_finite()) {
        return Err(CaptureError::InvalidArgument("bracket must hold finite exposures".into()));
    }
    exposures.sort_by(f64::total_cmp);
    let start = Instant::now();
    let (std_image, std_at, uv_images, uv_at) = rig.guarded(|rig| {
        camera.set_white_balance(profile.white_balance)?;
        rig.set(true, false)?;
        rig.settle();
        camera.set_exposure(profile.std_exposure)?;
        let std_image = camera.grab()?;
        let std_at = start.elapsed().as_secs_f64();
        rig.set(false, true)?;
        rig.settle();
        let mut uv = Vec::with_capacity(exposures.len());
        for &e in &exposures {
            camera.set_exposure(e)?;
            uv.push((e, camera.grab()?));
        }
        Ok((std_image, std_at, uv, start.elapsed().as_secs_f64()))
    })?;
    let timing = TimingRecord {
        capture_seconds: start.elapsed().as_secs_f64(),
        label_seconds: 0.0,
        std_captured_at: std_at,
        uv_captured_at: uv_at,
    };
    Ok(PairedSample::new(sample_id, std_image, uv_images, None, timing)?)
}

/// One frame under UV (`uv`) or room light, then back to the rest state.
pub fn grab_frame(
    camera: &mut dyn CameraPort,
    rig: &mut LightRig,
    white_balance: u32,
    uv: bool,
    exposure: f64,
) -> Result<ImageRgb, CaptureError> {
    rig.guarded(|rig| {
        camera.set_white_balance(white_balance)?;
        rig.set(!uv, uv)?;
        rig.settle();
        camera.set_exposure(exposure)?;
        camera.grab()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best: f64,
    /// `(exposure, score)` in candidate order.
    pub scores: Vec<(f64, usize)>,
    /// Every candidate scored zero; `best` is then the lowest exposure.
    pub all_zero: bool,
}

/// In-band pixels with value inside [`SWEEP_VALUE_RANGE`], summed over classes.
pub fn sweep_score(uv: &ImageRgb, profile: &CalibrationProfile) -> usize {
    let plane = image_to_hsv(uv);
    let (lo, hi) = SWEEP_VALUE_RANGE;
    profile
        .classes
        .iter()
        .map(|c| {
            let m = threshold_plane(&plane, &c.band);
            m.bits().iter().zip(plane.data()).filter(|(b, hsv)| **b && hsv.v >= lo && hsv.v <= hi).count()
        })
        .sum()
}

/// Picks the candidate exposure with the highest [`sweep_score`], ties to the
/// lower exposure.
pub fn sweep_exposures(
    camera: &mut dyn CameraPort,
    rig: &mut LightRig,
    profile: &CalibrationProfile,
    candidates: &[f64],
) -> Result<SweepResult, CaptureError> {
    if candidates.is_empty() {
        return Err(CaptureError::InvalidArgument("no candidate exposures".into()));
    }
    let scores = rig.guarded(|rig| {
        camera.set_white_balance(profile.white_balance)?;
        rig.set(false, true)?;
        rig.settle();
        candidates
            .iter()
            .map(|&e| {
                camera.set_exposure(e)?;
                Ok((e, sweep_score(&camera.grab()?, profile)))
            })
            .collect::<Result<Vec<_>, CaptureError>>()
    })?;
    let best = scores
        .iter()
        .copied()
        .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
        .expect("nonempty");
    Ok(SweepResult { best: best.0, all_zero: best.1 == 0, scores })
}

/// Changes the scene between samples (shaking a towel, re-dropping a cable).
pub trait Randomizer {
    fn randomize(&mut self, iteration: usize) -> Result<(), CaptureError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub attempted: usize,
    pub succeeded: usize,
    /// `(iteration, message)` of skipped samples.
    pub failures: Vec<(usize, String)>,
    pub mean_capture_seconds: f64,
    pub label_spl: Option<SplSummary>,
    pub sample_ids: Vec<String>,
}

/// Captures, labels and stores `n` samples named `<prefix>-<index>`.
#[allow(clippy::too_many_arguments)]
pub fn collect_session(
    camera: &mut dyn CameraPort,
    rig: &mut LightRig,
    profile: &CalibrationProfile,
    n: usize,
    mut randomizer: Option<&mut dyn Randomizer>,
    sink: &mut DatasetWriter,
    prefix: &str,
) -> Result<SessionSummary, CaptureError> {
    if n == 0 {
        return Err(CaptureError::InvalidArgument("session needs at least one sample".into()));
    }
    profile.validate()?;
    sink.save_profile(profile)?;
    let start_index = sink.len();
    let mut failures = Vec::new();
    let (mut capture_times, mut label_times, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let id = format!("{prefix}-{:05}", start_index + i);
        let result = (|| {
            if let Some(r) = randomizer.as_deref_mut() {
                r.randomize(i)?;
            }
            let mut sample = capture_pair(camera, rig, profile, None, &id)?;
            let t = Instant::now();
            let labels = extract_labels(&sample.uv_images, profile)?;
            sample.timing.label_seconds = t.elapsed().as_secs_f64();
            sample.labels = Some(labels);
            sink.write_sample(&sample, &profile.name)?;
            Ok::<_, CaptureError>(sample.timing)
        })();
        match result {
            Ok(t) => {
                capture_times.push(t.capture_seconds);
                label_times.push(t.label_seconds);
                ids.push(id);
            }
            Err(e) => {
                log::warn!("sample {id} failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    if failures.len() * 2 > n {
        return Err(CaptureError::SessionFailed { failed: failures.len(), attempted: n, first: failures[0].1.clone() });
    }
    Ok(SessionSummary {
        attempted: n,
        succeeded: ids.len(),
        mean_capture_seconds: capture_times.iter().sum::<f64>() / capture_times.len().max(1) as f64,
        label_spl: spl_from_seconds(&label_times).ok(),
        failures,
        sample_ids: ids,
    })
}

// ---------------------------------------------------------------------------
// Simulation

/// Shared on/off state of simulated lights. Ambient starts on.
#[derive(Debug, Clone)]
pub struct SimLights {
    uv: Arc<AtomicBool>,
    ambient: Arc<AtomicBool>,
}

impl Default for SimLights {
    fn default() -> Self {
        Self { uv: Arc::new(AtomicBool::new(false)), ambient: Arc::new(AtomicBool::new(true)) }
    }
}

impl SimLights {
    pub fn uv_on(&self) -> bool {
        self.uv.load(Ordering::SeqCst)
    }

    pub fn ambient_on(&self) -> bool {
        self.ambient.load(Ordering::SeqCst)
    }

    pub fn uv_channel(&self) -> SimChannel {
        SimChannel::new(self.uv.clone())
    }

    pub fn ambient_channel(&self) -> SimChannel {
        SimChannel::new(self.ambient.clone())
    }

    /// Rig with both channels simulated.
    pub fn rig(&self, settle_delay: Duration) -> LightRig {
        LightRig {
            uv: Box::new(self.uv_channel()),
            ambient: Some(Box::new(self.ambient_channel())),
            settle_delay,
        }
    }
}

/// Simulated light channel with optional fault injection.
#[derive(Debug, Clone)]
pub struct SimChannel {
    state: Arc<AtomicBool>,
    calls: Arc<AtomicUsize>,
    fail_on: Arc<Mutex<Option<usize>>>,
}

impl SimChannel {
    fn new(state: Arc<AtomicBool>) -> Self {
        Self { state, calls: Arc::default(), fail_on: Arc::default() }
    }

    /// The `n`th call (0-based, counted from now on) fails once.
    pub fn fail_on_call(&self, n: usize) {
        *self.fail_on.lock().unwrap_or_else(|p| p.into_inner()) = Some(self.calls.load(Ordering::SeqCst) + n);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LightChannel for SimChannel {
    fn set(&mut self, on: bool) -> Result<(), CaptureError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let mut fail = self.fail_on.lock().unwrap_or_else(|p| p.into_inner());
        if *fail == Some(call) {
            *fail = None;
            return Err(CaptureError::Light("injected transport failure".into()));
        }
        self.state.store(on, Ordering::SeqCst);
        Ok(())
    }
}

/// Camera that renders a synthetic scene under the current simulated lights.
/// With UV on it renders the UV view; otherwise the ordinary view.
#[derive(Debug, Clone)]
pub struct SimCamera {
    scene: Arc<Mutex<SceneSpec>>,
    lights: SimLights,
    exposure: f64,
    white_balance: u32,
    grabs: Arc<AtomicUsize>,
}

impl SimCamera {
    pub fn new(scene: Arc<Mutex<SceneSpec>>, lights: SimLights) -> Self {
        Self { scene, lights, exposure: crate::synthscene::NOMINAL_EXPOSURE, white_balance: 4600, grabs: Arc::default() }
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn white_balance(&self) -> u32 {
        self.white_balance
    }

    pub fn grabs(&self) -> usize {
        self.grabs.load(Ordering::SeqCst)
    }
}

impl CameraPort for SimCamera {
    fn set_exposure(&mut self, exposure: f64) -> Result<(), CaptureError> {
        let (lo, hi) = crate::model::EXPOSURE_RANGE;
        if !(lo..=hi).contains(&exposure) {
            return Err(CaptureError::Camera(format!("exposure {exposure} outside [{lo}, {hi}]")));
        }
        self.exposure = exposure;
        Ok(())
    }

    fn set_white_balance(&mut self, kelvin: u32) -> Result<(), CaptureError> {
        self.white_balance = kelvin;
        Ok(())
    }

    fn grab(&mut self) -> Result<ImageRgb, CaptureError> {
        self.grabs.fetch_add(1, Ordering::SeqCst);
        let scene = self.scene.lock().unwrap_or_else(|p| p.into_inner());
        Ok(if self.lights.uv_on() { render_uv(&scene, self.exposure) } else { render_standard(&scene, self.exposure) })
    }
}

/// Replaces the shared scene with `randomize(base, seed + iteration)`.
#[derive(Debug, Clone)]
pub struct SimRandomizer {
    pub scene: Arc<Mutex<SceneSpec>>,
    pub base: SceneSpec,
    pub seed: u64,
}

impl Randomizer for SimRandomizer {
    fn randomize(&mut self, iteration: usize) -> Result<(), CaptureError> {
        let next = randomize(&self.base, self.seed.wrapping_add(iteration as u64));
        *self.scene.lock().unwrap_or_else(|p| p.into_inner()) = next;
        Ok(())
    }
}

/// Camera that replays PNG files from a directory in file-name order.
#[derive(Debug, Clone)]
pub struct FileReplayCamera {
    frames: Vec<PathBuf>,
    next: usize,
    exposure: f64,
}

impl FileReplayCamera {
    pub fn open(dir: &Path) -> Result<Self, CaptureError> {
        let entries = std::fs::read_dir(dir).map_err(|e| CaptureError::Camera(format!("{}: {e}", dir.display())))?;
        let mut frames: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        frames.sort();
        if frames.is_empty() {
            return Err(CaptureError::Camera(format!("no PNG frames in {}", dir.display())));
        }
        Ok(Self { frames, next: 0, exposure: 0.0 })
    }

    pub fn remaining(&self) -> usize {
        self.frames.len() - self.next
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }
}

impl CameraPort for FileReplayCamera {
    fn set_exposure(&mut self, exposure: f64) -> Result<(), CaptureError> {
        self.exposure = exposure;
        Ok(())
    }

    fn set_white_balance(&mut self, _kelvin: u32) -> Result<(), CaptureError> {
        Ok(())
    }

    fn grab(&mut self) -> Result<ImageRgb, CaptureError> {
        let path = self.frames.get(self.next).ok_or(CaptureError::Exhausted)?;
        self.next += 1;
        let bytes = std::fs::read(path).map_err(|e| CaptureError::Camera(format!("{}: {e}", path.display())))?;
        Ok(crate::datastore::decode_png_rgb(&bytes)?)
    }
}
