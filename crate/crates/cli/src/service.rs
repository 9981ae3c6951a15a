//! HTTP control service.
//!
//! | Method | Path | Body | Reply |
//! |---|---|---|---|
//! | GET | `/api/frame?light=std\|uv&exposure=E` | | PNG |
//! | POST | `/api/preview` | profile | `{mask_png_base64, per_class_pixel_counts, keypoints}` |
//! | GET, PUT | `/api/profile/{name}` | profile (PUT) | profile |
//! | POST | `/api/sweep` | `{exposures}` | `{best, scores}` |
//! | POST | `/api/plug/{channel}` | `{state: "on"\|"off"}` | `{state}` |
//! | POST | `/api/capture` | | `{sample_id}` |
//!
//! Everything that touches the camera or lights runs under one lock, in
//! arrival order. Label extraction for previews runs outside it.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use luv_core::capture::{capture_pair, grab_frame, sweep_exposures};
use luv_core::datastore::{encode_png_rgb, load_profile, DatasetWriter};
use luv_core::maskgen::extract_labels;
use luv_core::CalibrationProfile;

use crate::config::Station;
use crate::{label_frames, AppConfig, CliError};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Config(m) => Self::bad_request(m),
            CliError::Runtime(m) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, m),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Camera, lights and dataset writer: the mutation queue.
struct Bench {
    station: Station,
    writer: Option<DatasetWriter>,
}

pub struct AppState {
    bench: Mutex<Bench>,
    profiles: RwLock<BTreeMap<String, CalibrationProfile>>,
    active: RwLock<String>,
    dataset: Option<PathBuf>,
}

impl AppState {
    pub fn from_config(cfg: &AppConfig) -> Result<Arc<Self>, CliError> {
        let profile = cfg.resolve_profile()?;
        let station = cfg.build_station(&profile)?;
        let writer = match &cfg.dataset {
            Some(d) => Some(DatasetWriter::open(d).map_err(CliError::runtime)?),
            None => None,
        };
        Ok(Self::new(station, writer, profile))
    }

    pub fn new(station: Station, writer: Option<DatasetWriter>, profile: CalibrationProfile) -> Arc<Self> {
        let dataset = writer.as_ref().map(|w| w.root().to_path_buf());
        let active = profile.name.clone();
        Arc::new(Self {
            bench: Mutex::new(Bench { station, writer }),
            profiles: RwLock::new(BTreeMap::from([(active.clone(), profile)])),
            active: RwLock::new(active),
            dataset,
        })
    }

    fn bench(&self) -> MutexGuard<'_, Bench> {
        self.bench.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn active_profile(&self) -> CalibrationProfile {
        let name = self.active.read().unwrap_or_else(|p| p.into_inner()).clone();
        self.profiles.read().unwrap_or_else(|p| p.into_inner())[&name].clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/frame", get(frame))
        .route("/api/preview", post(preview))
        .route("/api/profile/{name}", get(get_profile).put(put_profile))
        .route("/api/sweep", post(sweep))
        .route("/api/plug/{channel}", post(plug))
        .route("/api/capture", post(capture))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Light {
    Std,
    Uv,
}

#[derive(Debug, Deserialize)]
struct FrameQuery {
    light: Light,
    exposure: Option<f64>,
}

async fn frame(State(st): State<Arc<AppState>>, Query(q): Query<FrameQuery>) -> ApiResult<Response> {
    let profile = st.active_profile();
    let uv = q.light == Light::Uv;
    let exposure = q.exposure.unwrap_or(if uv { profile.uv_exposure } else { profile.std_exposure });
    let png = blocking(move || {
        let mut bench = st.bench();
        let s = &mut bench.station;
        let img = grab_frame(s.camera.as_mut(), &mut s.rig, profile.white_balance, uv, exposure)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
        encode_png_rgb(&img).map_err(ApiError::internal)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn preview(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let profile: CalibrationProfile =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad profile: {e}")))?;
    profile.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    blocking(move || {
        let frames = {
            let mut bench = st.bench();
            let s = &mut bench.station;
            profile
                .uv_exposures()
                .into_iter()
                .map(|e| Ok((e, grab_frame(s.camera.as_mut(), &mut s.rig, profile.white_balance, true, e)?)))
                .collect::<Result<Vec<_>, luv_core::capture::CaptureError>>()
                .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?
        };
        let report = label_frames(&frames, &profile)?;
        Ok(Json(json!({
            "mask_png_base64": base64::engine::general_purpose::STANDARD.encode(&report.mask_png),
            "per_class_pixel_counts": report.per_class_pixel_counts,
            "keypoints": report.keypoints,
            "width": report.width,
            "height": report.height,
        })))
    })
    .await
}

async fn get_profile(State(st): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<CalibrationProfile>> {
    if let Some(p) = st.profiles.read().unwrap_or_else(|p| p.into_inner()).get(&name) {
        return Ok(Json(p.clone()));
    }
    let root = st.dataset.clone();
    let found = blocking(move || Ok(root.and_then(|r| load_profile(&r, &name).ok()))).await?;
    found.map(Json).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no such profile"))
}

/// Stores the profile (and persists it with the dataset) and makes it active.
async fn put_profile(
    State(st): State<Arc<AppState>>,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult<Json<CalibrationProfile>> {
    let profile: CalibrationProfile =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad profile: {e}")))?;
    if profile.name != name {
        return Err(ApiError::bad_request(format!("profile name {:?} does not match path {name:?}", profile.name)));
    }
    profile.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let saved = profile.clone();
    let st2 = st.clone();
    blocking(move || {
        let mut bench = st2.bench();
        if let Some(w) = bench.writer.as_mut() {
            w.save_profile(&saved).map_err(ApiError::internal)?;
        }
        st2.profiles.write().unwrap_or_else(|p| p.into_inner()).insert(name.clone(), saved);
        *st2.active.write().unwrap_or_else(|p| p.into_inner()) = name;
        Ok(())
    })
    .await?;
    Ok(Json(profile))
}

#[derive(Debug, Deserialize)]
struct SweepBody {
    exposures: Vec<f64>,
}

async fn sweep(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: SweepBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad sweep request: {e}")))?;
    if body.exposures.is_empty() {
        return Err(ApiError::bad_request("exposures must not be empty"));
    }
    let profile = st.active_profile();
    blocking(move || {
        let mut bench = st.bench();
        let s = &mut bench.station;
        let r = sweep_exposures(s.camera.as_mut(), &mut s.rig, &profile, &body.exposures)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
        Ok(Json(json!({
            "best": r.best,
            "scores": r.scores.iter().map(|(e, s)| json!({"exposure": e, "score": s})).collect::<Vec<_>>(),
            "all_zero": r.all_zero,
        })))
    })
    .await
}

async fn plug(State(st): State<Arc<AppState>>, Path(channel): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: Value = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad JSON: {e}")))?;
    let on = match body.get("state").and_then(Value::as_str) {
        Some("on") => true,
        Some("off") => false,
        _ => return Err(ApiError::bad_request(r#"state must be "on" or "off""#)),
    };
    blocking(move || {
        let mut bench = st.bench();
        let rig = &mut bench.station.rig;
        let light = match channel.as_str() {
            "uv" => &mut rig.uv,
            "ambient" => rig.ambient.as_mut().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no ambient channel"))?,
            _ => return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown channel {channel:?}"))),
        };
        light.set(on).map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
        Ok(Json(json!({ "state": if on { "on" } else { "off" } })))
    })
    .await
}

async fn capture(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let profile = st.active_profile();
    blocking(move || {
        let mut bench = st.bench();
        let Bench { station, writer } = &mut *bench;
        let writer = writer.as_mut().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no dataset configured"))?;
        let id = format!("svc-{:05}", writer.len());
        let mut sample = capture_pair(station.camera.as_mut(), &mut station.rig, &profile, None, &id)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
        let t = Instant::now();
        sample.labels = Some(extract_labels(&sample.uv_images, &profile).map_err(ApiError::internal)?);
        sample.timing.label_seconds = t.elapsed().as_secs_f64();
        writer.save_profile(&profile).map_err(ApiError::internal)?;
        writer.write_sample(&sample, &profile.name).map_err(ApiError::internal)?;
        Ok(Json(json!({ "sample_id": id })))
    })
    .await
}
