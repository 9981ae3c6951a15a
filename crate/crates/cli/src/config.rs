//! Application configuration, read from the JSON file named by `LUV_CONFIG`
//! or `--config`. Command-line flags override every field.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use luv_core::capture::{CameraPort, FileReplayCamera, LightChannel, LightRig, PlugChannel, SimCamera, SimLights};
use luv_core::plugnet::{PlugClient, PlugEndpoint, DEFAULT_PORT, DEFAULT_TIMEOUT};
use luv_core::synthscene::{companion_profile, SceneKind, SceneSpec};
use luv_core::CalibrationProfile;

use crate::CliError;

pub const CONFIG_ENV: &str = "LUV_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub dataset: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub rig: RigConfig,
    pub camera: CameraConfig,
    pub port: u16,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            profile: None,
            rig: RigConfig::Sim,
            camera: CameraConfig::Sim,
            port: 8080,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RigConfig {
    Sim,
    Plugs {
        uv: PlugAddress,
        #[serde(default)]
        ambient: Option<PlugAddress>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlugAddress {
    pub host: String,
    #[serde(default = "default_plug_port")]
    pub port: u16,
}

fn default_plug_port() -> u16 {
    DEFAULT_PORT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraConfig {
    Sim,
    /// PNG frames replayed in file-name order.
    Replay { dir: PathBuf },
}

/// Synthetic scene used by the simulated camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { kind: SceneKind::Mixed, width: 320, height: 240, noise_sigma: 0.02 }
    }
}

impl AppConfig {
    /// `explicit` wins over `LUV_CONFIG`; neither gives the defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self, CliError> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
    }

    /// Forces simulated camera and lights.
    pub fn force_sim(&mut self) {
        self.rig = RigConfig::Sim;
        self.camera = CameraConfig::Sim;
    }

    pub fn is_sim(&self) -> bool {
        self.camera == CameraConfig::Sim
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(p) = &self.profile {
            if !p.is_file() {
                return Err(CliError::Config(format!("profile not found: {}", p.display())));
            }
        }
        if let CameraConfig::Replay { dir } = &self.camera {
            if !dir.is_dir() {
                return Err(CliError::Config(format!("replay directory not found: {}", dir.display())));
            }
        }
        if self.scene.width == 0 || self.scene.height == 0 {
            return Err(CliError::Config("scene dimensions must be positive".into()));
        }
        if !(self.scene.noise_sigma >= 0.0 && self.scene.noise_sigma.is_finite()) {
            return Err(CliError::Config("scene noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&Path, CliError> {
        self.dataset.as_deref().ok_or_else(|| CliError::Config("no dataset directory given".into()))
    }

    /// The configured profile file, or the synthetic profile in sim mode.
    pub fn resolve_profile(&self) -> Result<CalibrationProfile, CliError> {
        match &self.profile {
            Some(p) => read_profile(p),
            None if self.is_sim() => Ok(companion_profile()),
            None => Err(CliError::Config("no profile given".into())),
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let s = &self.scene;
        SceneSpec::generate(s.kind, s.width, s.height, self.seed, s.noise_sigma)
    }

    pub fn build_station(&self, profile: &CalibrationProfile) -> Result<Station, CliError> {
        let settle = Duration::from_millis(profile.settle_delay_ms);
        let lights = SimLights::default();
        let rig = match &self.rig {
            RigConfig::Sim => lights.rig(settle),
            RigConfig::Plugs { uv, ambient } => LightRig {
                uv: plug_channel(uv)?,
                ambient: ambient.as_ref().map(plug_channel).transpose()?,
                settle_delay: settle,
            },
        };
        let (camera, sim): (Box<dyn CameraPort + Send>, _) = match &self.camera {
            CameraConfig::Sim => {
                let base = self.scene_spec();
                let scene = Arc::new(Mutex::new(base.clone()));
                let cam = SimCamera::new(scene.clone(), lights.clone());
                (Box::new(cam), Some(SimWorld { scene, base, lights }))
            }
            CameraConfig::Replay { dir } => {
                (Box::new(FileReplayCamera::open(dir).map_err(|e| CliError::Config(e.to_string()))?), None)
            }
        };
        Ok(Station { camera, rig, sim })
    }
}

pub fn read_profile(path: &Path) -> Result<CalibrationProfile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("profile not found: {} ({e})", path.display())))?;
    let profile: CalibrationProfile =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad profile {}: {e}", path.display())))?;
    profile.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(profile)
}

fn plug_channel(addr: &PlugAddress) -> Result<Box<dyn LightChannel>, CliError> {
    let endpoint = PlugEndpoint::new(addr.host.clone(), addr.port).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Box::new(PlugChannel(PlugClient::new(endpoint, DEFAULT_TIMEOUT))))
}

/// Camera and lights, owned by whoever holds the capture lock.
pub struct Station {
    pub camera: Box<dyn CameraPort + Send>,
    pub rig: LightRig,
    pub sim: Option<SimWorld>,
}

/// Handles onto the simulated scene and lights.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub scene: Arc<Mutex<SceneSpec>>,
    pub base: SceneSpec,
    pub lights: SimLights,
}
