use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lesionscreen_core::locator::sha256_hex;
use lesionscreen_core::{ClassificationResult, Label, PipelineConfig, Screener, StageDecision, StageName, StageReason};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::compressor::{compress_ingress, CompressorPolicy, IngressError};

pub const DEFAULT_DISCLAIMER: &str =
    "Screening aid for research use. The output is not a diagnosis; consult a clinician.";

/// Room for multipart boundaries and part headers above the image limit.
const MULTIPART_OVERHEAD: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probabilities {
    pub monkeypox: f64,
    pub others: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: StageName,
    pub applied: bool,
    pub blackout_fraction: f64,
    pub reason: StageReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl From<StageDecision> for StageEntry {
    fn from(d: StageDecision) -> Self {
        Self {
            name: d.stage_name,
            applied: d.applied,
            blackout_fraction: d.blackout_fraction,
            reason: d.reason,
            note: d.note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResponse {
    pub label: Label,
    pub probabilities: Probabilities,
    pub stage_trace: Vec<StageEntry>,
    pub model_version: String,
    pub request_id: String,
    pub timing_ms: f64,
}

impl ScreenResponse {
    pub fn new(result: ClassificationResult, request_id: String, timing_ms: f64) -> Self {
        Self {
            label: result.label,
            probabilities: Probabilities {
                monkeypox: result.probabilities[Label::Monkeypox.index()],
                others: result.probabilities[Label::Others.index()],
            },
            stage_trace: result.stage_trace.into_iter().map(StageEntry::from).collect(),
            model_version: result.model_version,
            request_id,
            timing_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub request_id: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    request_id: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>, request_id: &str) -> Self {
        let code = match status {
            StatusCode::PAYLOAD_TOO_LARGE => "payload_too_large",
            StatusCode::UNSUPPORTED_MEDIA_TYPE => "unsupported_media_type",
            s if s.is_client_error() => "bad_request",
            _ => "internal_error",
        };
        Self {
            status,
            code,
            message: message.into(),
            request_id: request_id.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.into(),
            message: self.message,
            request_id: self.request_id,
        };
        (self.status, Json(body)).into_response()
    }
}

/// Append-only JSONL of per-request metadata. Image bytes are never written.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AuditEntry {
    pub request_id: String,
    pub received_at_unix: u64,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub label: Label,
    pub probabilities: Probabilities,
    pub model_version: String,
}

impl AuditLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, entry: &AuditEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line)
    }
}

pub struct AppState {
    pub screener: Arc<Screener>,
    pub compressor: CompressorPolicy,
    pub audit: Option<AuditLog>,
    pub disclaimer: String,
}

impl AppState {
    pub fn new(screener: Screener, compressor: CompressorPolicy) -> Self {
        Self {
            screener: Arc::new(screener),
            compressor,
            audit: None,
            disclaimer: DEFAULT_DISCLAIMER.into(),
        }
    }
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let limit = state.compressor.max_upload_bytes.saturating_add(MULTIPART_OVERHEAD);
    let app = Router::new()
        .route("/v1/screen", post(screen))
        .route("/v1/health", get(health))
        .route("/v1/version", get(version))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

fn new_request_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

async fn read_image_field(multipart: Result<Multipart, MultipartRejection>, request_id: &str) -> Result<Vec<u8>, ApiError> {
    let mut multipart = multipart.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text(), request_id))?;
    loop {
        let field = multipart
            .next_field()
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text(), request_id))?;
        let Some(field) = field else {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "missing multipart field `image`", request_id));
        };
        if field.name() == Some("image") {
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::new(e.status(), e.body_text(), request_id))?;
            return Ok(bytes.to_vec());
        }
    }
}

async fn screen(State(state): State<Arc<AppState>>, multipart: Result<Multipart, MultipartRejection>) -> Response {
    let request_id = new_request_id();
    let started = Instant::now();
    let bytes = match read_image_field(multipart, &request_id).await {
        Ok(b) => b,
        Err(e) => return e.into_response(),
    };
    let rid = request_id.clone();
    let task_state = state.clone();
    let outcome = tokio::task::spawn_blocking(move || screen_bytes(&task_state, &bytes, &rid)).await;
    let response = match outcome {
        Ok(Ok(result)) => result,
        Ok(Err(e)) => return e.into_response(),
        Err(join) => {
            tracing::error!(request_id, error = %join, "screening task panicked");
            return ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "screening task failed", &request_id).into_response();
        }
    };
    let timing_ms = started.elapsed().as_secs_f64() * 1e3;
    Json(ScreenResponse::new(response, request_id, timing_ms)).into_response()
}

/// Per-request pipeline settings. An upload the compressor shrank is not
/// enlarged again by restoration.
pub fn effective_pipeline(base: &PipelineConfig, downscaled: bool) -> PipelineConfig {
    let mut cfg = base.clone();
    if downscaled {
        cfg.enable_restoration = false;
    }
    cfg
}

fn screen_bytes(state: &AppState, bytes: &[u8], request_id: &str) -> Result<ClassificationResult, ApiError> {
    let compressed = compress_ingress(bytes, &state.compressor, request_id).map_err(|e| match e {
        IngressError::TooLarge { .. } => ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, e.to_string(), request_id),
        IngressError::Unsupported(_) => ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string(), request_id),
    })?;
    let screener = &state.screener;
    let cfg = effective_pipeline(screener.config(), compressed.downscaled);
    let result = screener.screen_with(&compressed.image, &cfg).map(|mut r| {
        if compressed.downscaled && screener.config().enable_restoration {
            if let Some(d) = r.stage_trace.iter_mut().find(|d| d.stage_name == StageName::Restoration) {
                d.note = Some("skipped: upload was downscaled by the compressor".into());
            }
        }
        r
    });
    let result = result.map_err(|e| {
        tracing::error!(request_id, error = %e, "screening failed");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), request_id)
    })?;
    if let Some(audit) = &state.audit {
        let (width, height) = compressed.original_size;
        let entry = AuditEntry {
            request_id: request_id.into(),
            received_at_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            sha256: sha256_hex(bytes),
            width,
            height,
            label: result.label,
            probabilities: Probabilities {
                monkeypox: result.probabilities[0],
                others: result.probabilities[1],
            },
            model_version: result.model_version.clone(),
        };
        if let Err(e) = audit.append(&entry) {
            tracing::warn!(request_id, error = %e, path = %audit.path().display(), "audit append failed");
        }
    }
    Ok(result)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_version: state.screener.model().model_version().into(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VersionInfo {
    pub service: String,
    pub version: String,
    pub model_version: String,
    pub pipeline: String,
    pub disclaimer: String,
}

async fn version(State(state): State<Arc<AppState>>) -> Json<VersionInfo> {
    Json(VersionInfo {
        service: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        model_version: state.screener.model().model_version().into(),
        pipeline: state.screener.config().descriptor(),
        disclaimer: state.disclaimer.clone(),
    })
}

async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = interrupt => {},
        _ = terminate => {},
    }
    tracing::info!("shutting down, draining in-flight requests");
}

/// Serves until SIGINT/SIGTERM, then drains in-flight requests.
pub async fn serve(app: Router, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown_signal()).await
}
