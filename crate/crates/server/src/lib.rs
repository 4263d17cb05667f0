//! HTTP front end over a loaded checkpoint.
//!
//! `POST /detect`, `POST /localize` and `POST /detect_and_localize` take a multipart upload in
//! field `file`. At most `max_concurrent_inferences` forwards run at once; requests beyond that
//! are rejected with 503 instead of queueing.

use std::future::Future;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thforge_core::data::decode_image;
use thforge_core::inference::{resize_mask, Prediction, Predictor};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

pub const SCORE_HEADER: &str = "x-detection-score";
pub const LABEL_HEADER: &str = "x-detection-label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevicePreference {
    /// Use an accelerator when one is compiled in, otherwise the CPU.
    #[default]
    Auto,
    Cpu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    /// 0 lets the OS pick a free port.
    pub port: u16,
    pub checkpoint_path: PathBuf,
    pub max_upload_bytes: usize,
    pub inference_device_preference: DevicePreference,
    pub max_concurrent_inferences: usize,
    /// Overrides the threshold stored in the checkpoint; 0.80 when neither is set.
    pub threshold: Option<f64>,
    pub seg_threshold: Option<f64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint_path: PathBuf::from("checkpoint.safetensors"),
            max_upload_bytes: 20 << 20,
            inference_device_preference: DevicePreference::Auto,
            max_concurrent_inferences: 2,
            threshold: None,
            seg_threshold: None,
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.80;
pub const DEFAULT_SEG_THRESHOLD: f64 = 0.10;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service configuration: {0}")]
    Config(String),
    #[error("cannot load checkpoint: {0}")]
    Checkpoint(#[from] thforge_core::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn is_input_error(&self) -> bool {
        match self {
            ServiceError::Config(_) => true,
            ServiceError::Checkpoint(e) => e.is_input_error(),
            _ => false,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_concurrent_inferences == 0 {
            return Err(ServiceError::Config("max_concurrent_inferences must be positive".into()));
        }
        if self.max_upload_bytes == 0 {
            return Err(ServiceError::Config("max_upload_bytes must be positive".into()));
        }
        for t in [self.threshold, self.seg_threshold].into_iter().flatten() {
            if !(0.0..=1.0).contains(&t) {
                return Err(ServiceError::Config(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// What the service needs from a model.
pub trait InferenceBackend: Send + Sync + 'static {
    /// One evaluation-mode forward pass.
    fn infer(&self, image: &RgbImage) -> thforge_core::Result<Prediction>;
    fn input_size(&self) -> usize;
    fn has_detection(&self) -> bool;
    fn has_segmentation(&self) -> bool;
}

impl InferenceBackend for Predictor {
    fn infer(&self, image: &RgbImage) -> thforge_core::Result<Prediction> {
        self.predict_image(image)
    }

    fn input_size(&self) -> usize {
        Predictor::input_size(self)
    }

    fn has_detection(&self) -> bool {
        self.state().config().has_detection_head()
    }

    fn has_segmentation(&self) -> bool {
        self.state().config().has_segmentation_head()
    }
}

#[derive(Clone)]
pub struct AppState {
    backend: Arc<dyn InferenceBackend>,
    permits: Arc<Semaphore>,
    threshold: f64,
    seg_threshold: f64,
    max_upload_bytes: usize,
}

impl AppState {
    pub fn new(backend: Arc<dyn InferenceBackend>, cfg: &ServiceConfig, threshold: f64, seg_threshold: f64) -> Self {
        Self {
            backend,
            permits: Arc::new(Semaphore::new(cfg.max_concurrent_inferences)),
            threshold,
            seg_threshold,
            max_upload_bytes: cfg.max_upload_bytes,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn seg_threshold(&self) -> f64 {
        self.seg_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub label: String,
    pub score: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MaskQuery {
    #[serde(default)]
    pub soft: bool,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn label_for(score: f64, threshold: f64) -> &'static str {
    if score >= threshold {
        "attack"
    } else {
        "bona_fide"
    }
}

async fn read_upload(state: &AppState, mut multipart: Multipart) -> ApiResult<RgbImage> {
    let mut bytes = None;
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) if field.name() == Some("file") => {
                let data = field.bytes().await.map_err(|e| ApiError(e.status(), e.body_text()))?;
                bytes = Some(data);
                break;
            }
            Ok(Some(_)) => continue,
            Ok(None) => break,
            Err(e) => return Err(ApiError(e.status(), e.body_text())),
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "missing multipart field `file`".into()))?;
    if bytes.len() > state.max_upload_bytes {
        return Err(ApiError(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("upload of {} bytes exceeds {}", bytes.len(), state.max_upload_bytes),
        ));
    }
    decode_image(&bytes).map_err(|e| ApiError(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))
}

/// Runs one forward pass, or fails fast with 503 when every inference slot is busy.
async fn infer(state: &AppState, image: RgbImage) -> ApiResult<Prediction> {
    let permit = state
        .permits
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "inference capacity exhausted".into()))?;
    let backend = state.backend.clone();
    let out = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        backend.infer(&image)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    out.map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn require(ok: bool, what: &str) -> ApiResult<()> {
    if ok {
        Ok(())
    } else {
        Err(ApiError(StatusCode::NOT_IMPLEMENTED, format!("loaded model has no {what} head")))
    }
}

/// Soft probability map as 8-bit levels at `width × height`.
pub fn soft_mask_levels(mask: &[f32], size: usize, width: u32, height: u32) -> Vec<u8> {
    resize_mask(mask, size, width, height)
        .into_iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Binarizes 8-bit levels: 255 where `level ≥ threshold·255`.
pub fn binarize_levels(levels: &[u8], threshold: f64) -> Vec<u8> {
    let cut = threshold * 255.0;
    levels.iter().map(|&v| if v as f64 >= cut { 255 } else { 0 }).collect()
}

fn mask_png(state: &AppState, pred: &Prediction, width: u32, height: u32, soft: bool) -> ApiResult<Vec<u8>> {
    let mask = pred
        .mask
        .as_ref()
        .ok_or_else(|| ApiError(StatusCode::NOT_IMPLEMENTED, "loaded model has no segmentation head".into()))?;
    let levels = soft_mask_levels(mask, state.backend.input_size(), width, height);
    let pixels = if soft { levels } else { binarize_levels(&levels, state.seg_threshold) };
    let img = GrayImage::from_raw(width, height, pixels).expect("mask has width × height pixels");
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(out)
}

fn png_response(body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], body).into_response()
}

async fn detect(State(state): State<AppState>, multipart: Multipart) -> ApiResult<Json<DetectResponse>> {
    require(state.backend.has_detection(), "detection")?;
    let image = read_upload(&state, multipart).await?;
    let pred = infer(&state, image).await?;
    let score = pred.score.unwrap_or_default();
    Ok(Json(DetectResponse {
        label: label_for(score, state.threshold).into(),
        score,
        threshold: state.threshold,
    }))
}

async fn localize(
    State(state): State<AppState>,
    Query(q): Query<MaskQuery>,
    multipart: Multipart,
) -> ApiResult<Response> {
    require(state.backend.has_segmentation(), "segmentation")?;
    let image = read_upload(&state, multipart).await?;
    let (w, h) = image.dimensions();
    let pred = infer(&state, image).await?;
    Ok(png_response(mask_png(&state, &pred, w, h, q.soft)?))
}

async fn detect_and_localize(
    State(state): State<AppState>,
    Query(q): Query<MaskQuery>,
    multipart: Multipart,
) -> ApiResult<Response> {
    require(state.backend.has_detection(), "detection")?;
    require(state.backend.has_segmentation(), "segmentation")?;
    let image = read_upload(&state, multipart).await?;
    let (w, h) = image.dimensions();
    let pred = infer(&state, image).await?;
    let score = pred.score.unwrap_or_default();
    let mut resp = png_response(mask_png(&state, &pred, w, h, q.soft)?);
    let headers = resp.headers_mut();
    headers.insert(SCORE_HEADER, HeaderValue::from_str(&format!("{score:.6}")).expect("ascii"));
    headers.insert(LABEL_HEADER, HeaderValue::from_static(label_for(score, state.threshold)));
    Ok(resp)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_loaded": true }))
}

pub fn router(state: AppState) -> Router {
    // Leave room for multipart framing so an upload of exactly the limit still gets through.
    let body_limit = state.max_upload_bytes + (64 << 10);
    Router::new()
        .route("/detect", post(detect))
        .route("/localize", post(localize))
        .route("/detect_and_localize", post(detect_and_localize))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Loads the checkpoint named in `cfg` and resolves the decision thresholds.
pub fn load_state(cfg: &ServiceConfig) -> Result<AppState, ServiceError> {
    cfg.validate()?;
    if cfg.inference_device_preference == DevicePreference::Auto {
        tracing::info!("no accelerator backend compiled in; running on CPU");
    }
    let predictor = Predictor::from_checkpoint(&cfg.checkpoint_path)?;
    let meta = predictor.meta();
    let threshold = cfg.threshold.or(meta.det_threshold).unwrap_or(DEFAULT_THRESHOLD);
    let seg_threshold = cfg.seg_threshold.or(meta.seg_threshold).unwrap_or(DEFAULT_SEG_THRESHOLD);
    Ok(AppState::new(Arc::new(predictor), cfg, threshold, seg_threshold))
}

pub async fn bind(cfg: &ServiceConfig) -> Result<TcpListener, ServiceError> {
    let addr = format!("{}:{}", cfg.host, cfg.port);
    TcpListener::bind(&addr).await.map_err(|source| ServiceError::Bind { addr, source })
}

/// Serves until `shutdown` resolves, then stops accepting and drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    tracing::info!("server stopped");
    Ok(())
}
