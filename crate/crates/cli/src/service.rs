//! HTTP prediction service.
//!
//! - `GET /health` answers `ok`.
//! - `GET /model` echoes the loaded model's configuration and vocabulary.
//! - `POST /predict` counts objects for a JSON prompt:
//!
//! ```json
//! {"image": "scene.png", "boxes": [[10, 12, 22, 25]], "text": "red circle",
//!  "sigma": 0.23, "keyword_span": [0, 1], "adaptive_crop": false,
//!  "masks": ["rle:..."]}
//! ```
//!
//! `image_base64` replaces `image` for inline PNG/PPM bytes. Malformed
//! requests get 400 with `{"error", "field"}`; without a loaded model every
//! model endpoint answers 503.

use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use countgd::data::InstanceMask;
use countgd::encoders::{BoundingBox, ImageInput};
use countgd::inference::{analyze, check_sigma, CountRequest, DEFAULT_SIGMA};
use countgd::model::CountingModel;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::CliError;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Threshold when a request gives none.
    pub sigma: f64,
    pub adaptive_crop: bool,
    /// Base directory of image and mask paths; relative paths may not leave
    /// it. The working directory when absent.
    pub image_root: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            sigma: DEFAULT_SIGMA,
            adaptive_crop: false,
            image_root: None,
        }
    }
}

/// A model with where it came from.
pub struct Loaded {
    pub model: CountingModel,
    pub checkpoint: Option<PathBuf>,
    pub metadata: Value,
}

/// Shared state. Each request works on the snapshot current when it
/// started; [`AppState::swap`] replaces it for later requests.
pub struct AppState {
    config: ServiceConfig,
    model: RwLock<Option<Arc<Loaded>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<AppState> {
        Arc::new(AppState {
            config,
            model: RwLock::new(None),
        })
    }

    pub fn swap(&self, loaded: Loaded) {
        *self.model.write().expect("model lock") = Some(Arc::new(loaded));
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<(), CliError> {
        let (model, metadata) = CountingModel::load(path)
            .map_err(|e| CliError::Runtime(format!("loading {}: {e}", path.display())))?;
        self.swap(Loaded {
            model,
            checkpoint: Some(path.to_path_buf()),
            metadata,
        });
        Ok(())
    }

    fn snapshot(&self) -> Option<Arc<Loaded>> {
        self.model.read().expect("model lock").clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/model", get(model_info))
        .route("/predict", post(predict))
        .with_state(state)
}

struct ApiError {
    status: StatusCode,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn bad(field: impl Into<String>, message: impl Into<String>) -> ApiError {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            field: Some(field.into()),
            message: message.into(),
        }
    }

    fn unavailable() -> ApiError {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            field: None,
            message: "no model loaded".into(),
        }
    }

    fn internal(message: impl Into<String>) -> ApiError {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            field: None,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

async fn model_info(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let loaded = state.snapshot().ok_or_else(ApiError::unavailable)?;
    Ok(Json(json!({
        "config": loaded.model.config(),
        "vocabulary": loaded.model.vocab().words(),
        "checkpoint": loaded.checkpoint,
        "metadata": loaded.metadata,
        "defaults": { "sigma": state.config.sigma, "adaptive_crop": state.config.adaptive_crop },
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    image: Option<String>,
    image_base64: Option<String>,
    #[serde(default)]
    boxes: Vec<[f64; 4]>,
    #[serde(default)]
    text: String,
    sigma: Option<f64>,
    keyword_span: Option<[usize; 2]>,
    adaptive_crop: Option<bool>,
    /// One instance mask per box enables the repeated-part correction.
    #[serde(default)]
    masks: Vec<String>,
}

fn parse_request(body: &[u8]) -> Result<PredictRequest, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        // unknown fields are reported at the parent path with the name in the message
        let field = match inner.to_string().split('`').nth(1) {
            Some(name) if inner.to_string().starts_with("unknown field") => name.to_string(),
            _ if inner.is_syntax() || inner.is_eof() || path == "." => "body".to_string(),
            _ => path,
        };
        ApiError::bad(field, inner.to_string())
    })
}

fn resolve_path(root: Option<&Path>, raw: &str, field: &str) -> Result<PathBuf, ApiError> {
    let p = Path::new(raw);
    match root {
        None => Ok(p.to_path_buf()),
        Some(root) => {
            if p.is_absolute() || p.components().any(|c| matches!(c, Component::ParentDir)) {
                return Err(ApiError::bad(field, "path must stay inside the image root"));
            }
            Ok(root.join(p))
        }
    }
}

fn build(req: PredictRequest, cfg: &ServiceConfig) -> Result<(ImageInput, CountRequest), ApiError> {
    let image = match (&req.image, &req.image_base64) {
        (Some(_), Some(_)) => return Err(ApiError::bad("image", "give either image or image_base64, not both")),
        (None, None) => return Err(ApiError::bad("image", "missing image or image_base64")),
        (Some(path), None) => {
            let p = resolve_path(cfg.image_root.as_deref(), path, "image")?;
            ImageInput::load(&p).map_err(|e| ApiError::bad("image", format!("{}: {e}", p.display())))?
        }
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad("image_base64", e.to_string()))?;
            ImageInput::from_encoded(&bytes).map_err(|e| ApiError::bad("image_base64", e.to_string()))?
        }
    };
    if req.text.trim().is_empty() && req.boxes.is_empty() {
        return Err(ApiError::bad("text", "empty prompt: give text, boxes, or both"));
    }
    let sigma = req.sigma.unwrap_or(cfg.sigma);
    check_sigma(sigma).map_err(|e| ApiError::bad("sigma", e.to_string()))?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut boxes = Vec::with_capacity(req.boxes.len());
    for (i, b) in req.boxes.iter().enumerate() {
        let bb = BoundingBox::new(b[0], b[1], b[2], b[3]);
        bb.validate(w, h).map_err(|e| ApiError::bad(format!("boxes[{i}]"), e.to_string()))?;
        boxes.push(bb);
    }
    let keyword_span = match req.keyword_span {
        Some([a, b]) if a < b => Some((a, b)),
        Some(_) => return Err(ApiError::bad("keyword_span", "span must be [start, end) with start < end")),
        None => None,
    };
    let masks = if req.masks.is_empty() {
        None
    } else {
        if req.masks.len() != boxes.len() {
            return Err(ApiError::bad(
                "masks",
                format!("{} masks given for {} boxes", req.masks.len(), boxes.len()),
            ));
        }
        let base = cfg.image_root.clone().unwrap_or_else(|| PathBuf::from("."));
        let mut out = Vec::with_capacity(req.masks.len());
        for (i, m) in req.masks.iter().enumerate() {
            let field = format!("masks[{i}]");
            if !m.starts_with("rle:") {
                resolve_path(cfg.image_root.as_deref(), m, &field)?;
            }
            out.push(InstanceMask::resolve(m, &base).map_err(|e| ApiError::bad(field, e.to_string()))?);
        }
        Some(out)
    };
    let req = CountRequest {
        sigma,
        keyword_span,
        adaptive_crop: req.adaptive_crop.unwrap_or(cfg.adaptive_crop),
        masks,
        ..CountRequest::new(req.text, boxes)
    };
    Ok((image, req))
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let loaded = state.snapshot().ok_or_else(ApiError::unavailable)?;
    let req = parse_request(&body)?;
    let config = state.config.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let (image, req) = build(req, &config)?;
        let req_has_span = req.keyword_span.is_some();
        let analysis = analyze(&loaded.model, &image, &req).map_err(|e| match e {
            countgd::Error::UnknownWord(_) | countgd::Error::EmptyPrompt => ApiError::bad("text", e.to_string()),
            countgd::Error::InvalidArgument(_) if req_has_span => ApiError::bad("keyword_span", e.to_string()),
            other => ApiError::internal(other.to_string()),
        })?;
        Ok::<_, ApiError>(json!({
            "count": analysis.result.count,
            "sigma": analysis.result.sigma,
            "tiles": analysis.result.tiles,
            "tt_norm_divisor": analysis.result.tt_norm_divisor,
            "detections": analysis.result.detections,
            "queries": analysis.queries,
            "tokens": analysis.tokens,
            "image_size": [image.width(), image.height()],
        }))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(outcome))
}
