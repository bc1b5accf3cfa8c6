//! HTTP front end and command-line plumbing for the screening pipeline.

pub mod compressor;
pub mod config;
pub mod server;

use std::path::Path;
use std::sync::Arc;

use lesionscreen_core::locator::WeightsLocator;
use lesionscreen_core::{load_backend, BackendKind, Model, PipelineConfig, Screener, Stages};

use crate::config::ServiceConfig;
use crate::server::{AppState, AuditLog, DEFAULT_DISCLAIMER};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Loads whichever segmentation backends are given. A stage without one
/// passes images through and reports `backend_unavailable`.
pub fn load_stages(background: Option<&WeightsLocator>, skin: Option<&WeightsLocator>) -> lesionscreen_core::Result<Stages> {
    let bg = background.map(|l| load_backend(BackendKind::SalientObject, l)).transpose()?;
    let sk = skin.map(|l| load_backend(BackendKind::SkinRegion, l)).transpose()?;
    Stages::new(bg, sk)
}

pub fn load_screener(model_dir: &Path, stages: Stages, pipeline: PipelineConfig) -> lesionscreen_core::Result<Screener> {
    let model = Model::load(model_dir)?;
    Screener::new(Arc::new(model), stages, pipeline)
}

/// Everything `serve` needs, built from a validated configuration.
pub fn build_state(cfg: &ServiceConfig) -> Result<AppState, BoxError> {
    let model_dir = cfg
        .model_dir
        .as_deref()
        .ok_or("no model directory configured (model_dir or LESIONSCREEN_MODEL_DIR)")?;
    let bg = cfg.backends.background.as_ref().map(|l| l.locator());
    let skin = cfg.backends.skin.as_ref().map(|l| l.locator());
    let stages = load_stages(bg.as_ref(), skin.as_ref())?;
    let screener = load_screener(model_dir, stages, cfg.pipeline_config())?;
    let audit = match (&cfg.audit.enabled, &cfg.audit.path) {
        (true, Some(p)) => Some(AuditLog::open(p)?),
        _ => None,
    };
    Ok(AppState {
        screener: Arc::new(screener),
        compressor: cfg.compressor,
        audit,
        disclaimer: cfg.disclaimer.clone().unwrap_or_else(|| DEFAULT_DISCLAIMER.into()),
    })
}
