//! HTTP inference service.
//!
//! Endpoints:
//!
//! - `GET /scenes`: scene ids and sizes.
//! - `GET /scenes/{id}/image`: the scene's pixels in the dataset's binary format.
//! - `POST /infer`: detections for box prompts drawn on a scene or inline image.
//! - `GET /model/info`: the loaded model's configuration.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use negprompt_core::dataengine::{
    decode_pixels, encode_pixels, load_dataset, DatasetManifest, Split,
};
use negprompt_core::detector::{
    load_checkpoint, model_version, prompts_from_boxes, run_detector, DetectorConfig, ModelParams,
};
use negprompt_core::geometry::{BBox, JitterSpec};
use negprompt_core::numcore::Tensor;
use negprompt_core::rng::stream;
use negprompt_core::scoring::{infer_detections, InferenceMode, DEFAULT_BETA};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl From<negprompt_core::Error> for ServiceError {
    fn from(e: negprompt_core::Error) -> Self {
        use negprompt_core::Error as E;
        match e {
            E::NotFound(_) => ServiceError::NotFound(e.to_string()),
            E::Shape(_)
            | E::Range(_)
            | E::Invalid(_)
            | E::Count { .. }
            | E::MissingNegatives
            | E::DegenerateJitter { .. }
            | E::Encode(_) => ServiceError::BadRequest(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(ErrorBody {
                error: self.to_string(),
            }),
        )
            .into_response()
    }
}

/// Shared, read-only model snapshot.
pub struct AppState {
    pub model: ModelParams,
    pub manifest: DatasetManifest,
    pub model_version: String,
    pub default_beta: f64,
    pub neg_jitter: JitterSpec,
}

impl AppState {
    pub fn new(model: ModelParams, manifest: DatasetManifest) -> Result<Self, ServiceError> {
        if manifest.config.image_size != model.config.image_size {
            return Err(ServiceError::Internal(format!(
                "dataset images are {}px, model expects {}px",
                manifest.config.image_size, model.config.image_size
            )));
        }
        Ok(AppState {
            model_version: model_version(&model)?,
            model,
            manifest,
            default_beta: DEFAULT_BETA,
            neg_jitter: JitterSpec::negative(),
        })
    }

    pub fn load(checkpoint: &Path, dataset: &Path) -> Result<Self, ServiceError> {
        let model = load_checkpoint(checkpoint)?;
        let manifest = load_dataset(dataset)?;
        Self::new(model, manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivePrompt {
    pub category_name: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativePrompt {
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Base64 of the binary pixel format served by `/scenes/{id}/image`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InlinePixels {
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    #[serde(default)]
    pub scene_id: Option<u64>,
    #[serde(default)]
    pub pixels: Option<InlinePixels>,
    pub positives: Vec<PositivePrompt>,
    #[serde(default)]
    pub negatives: Vec<NegativePrompt>,
    pub mode: InferenceMode,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub score_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Adds `timing_ms` to the response; off by default so bodies repeat exactly.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionOut {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category_name: String,
    pub probability: f64,
    pub suppressed_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub detections: Vec<DetectionOut>,
    pub timing_ms: Option<f64>,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: DetectorConfig,
    pub dim: usize,
    pub k: usize,
    pub beta_default: f64,
    pub model_version: String,
}

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;

fn request_pixels(state: &AppState, req: &InferRequest) -> Result<Tensor, ServiceError> {
    match (req.scene_id, &req.pixels) {
        (Some(_), Some(_)) => Err(ServiceError::BadRequest(
            "give scene_id or pixels, not both".into(),
        )),
        (None, None) => Err(ServiceError::BadRequest(
            "scene_id or pixels is required".into(),
        )),
        (Some(id), None) => state
            .manifest
            .scene(id)
            .map(|s| s.pixels.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("scene {id}"))),
        (None, Some(p)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(&p.data)
                .map_err(|e| ServiceError::BadRequest(format!("pixels: {e}")))?;
            Ok(decode_pixels(&bytes)?)
        }
    }
}

/// Runs one request against the snapshot.
pub fn handle_infer(state: &AppState, req: &InferRequest) -> Result<InferResponse, ServiceError> {
    let started = Instant::now();
    let pixels = request_pixels(state, req)?;
    let size = state.model.config.image_size as f64;
    if req.positives.is_empty() {
        return Err(ServiceError::BadRequest(
            "at least one positive prompt is required".into(),
        ));
    }
    let boxes = req
        .positives
        .iter()
        .map(|p| &p.bbox)
        .chain(req.negatives.iter().map(|n| &n.bbox));
    for b in boxes {
        b.validate()?;
        if !b.inside(size, size) {
            return Err(ServiceError::BadRequest(format!(
                "box {b:?} leaves the {size}px image"
            )));
        }
    }
    if req.mode == InferenceMode::UserCurated && req.negatives.is_empty() {
        return Err(negprompt_core::Error::MissingNegatives.into());
    }
    let beta = req.beta.unwrap_or(state.default_beta);
    if !(0.0..1.0).contains(&beta) {
        return Err(ServiceError::BadRequest(format!(
            "beta {beta} outside [0, 1)"
        )));
    }
    let threshold = req.score_threshold.unwrap_or(DEFAULT_SCORE_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ServiceError::BadRequest(format!(
            "score_threshold {threshold} outside [0, 1]"
        )));
    }
    let k = req.k.unwrap_or(state.model.config.k);

    // category ids are positions in first-appearance order of the names
    let mut names: Vec<&str> = Vec::new();
    let mut positives = Vec::with_capacity(req.positives.len());
    for p in &req.positives {
        let id = match names.iter().position(|n| *n == p.category_name) {
            Some(i) => i,
            None => {
                names.push(&p.category_name);
                names.len() - 1
            }
        };
        positives.push((id as u32, p.bbox));
    }
    let negatives: Vec<BBox> = match req.mode {
        InferenceMode::UserCurated => req.negatives.iter().map(|n| n.bbox).collect(),
        _ => Vec::new(),
    };

    let out = run_detector(&state.model, &pixels)?;
    let mut rng = stream(req.seed, "auto_suggested");
    let prompts = prompts_from_boxes(
        &state.model,
        &out.pyramid,
        &positives,
        &negatives,
        req.mode,
        k,
        &state.neg_jitter,
        &mut rng,
    )?;
    let dets = infer_detections(
        &out.queries,
        &out.boxes,
        &prompts,
        beta,
        req.mode,
        threshold,
    )?;
    let detections = dets
        .iter()
        .map(|d| DetectionOut {
            bbox: d.bbox,
            category_name: names[d.category_id as usize].to_string(),
            probability: d.probability,
            suppressed_delta: d.suppressed_delta(),
        })
        .collect();
    Ok(InferResponse {
        detections,
        timing_ms: req.timing.then(|| started.elapsed().as_secs_f64() * 1e3),
        model_version: state.model_version.clone(),
    })
}

async fn list_scenes(State(state): State<Arc<AppState>>) -> Json<Vec<SceneInfo>> {
    let split_of = |id: u64| {
        if state.manifest.val.contains(&id) {
            Split::Val
        } else {
            Split::Train
        }
    };
    Json(
        state
            .manifest
            .scenes
            .iter()
            .map(|s| SceneInfo {
                id: s.image_id,
                width: s.width,
                height: s.height,
                split: split_of(s.image_id),
            })
            .collect(),
    )
}

async fn scene_image(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<Response, ServiceError> {
    let scene = state
        .manifest
        .scene(id)
        .ok_or_else(|| ServiceError::NotFound(format!("scene {id}")))?;
    let bytes = encode_pixels(&scene.pixels)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn infer(
    State(state): State<Arc<AppState>>,
    body: Result<Json<InferRequest>, JsonRejection>,
) -> Result<Json<InferResponse>, ServiceError> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    tokio::task::spawn_blocking(move || handle_infer(&state, &req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(ModelInfo {
        config: state.model.config,
        dim: state.model.config.dim,
        k: state.model.config.k,
        beta_default: state.default_beta,
        model_version: state.model_version.clone(),
    })
}

pub fn app(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}/image", get(scene_image))
        .route("/infer", post(infer))
        .route("/model/info", get(model_info))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app(Arc::new(state))).await
}
