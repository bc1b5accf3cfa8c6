//! Service configuration: a TOML file plus `LESIONSCREEN_*` overrides.

use std::path::{Path, PathBuf};

use lesionscreen_core::locator::WeightsLocator;
use lesionscreen_core::{GateConfig, PipelineConfig, RestorationPolicy};
use serde::{Deserialize, Serialize};

use crate::compressor::CompressorPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatorConfig {
    pub location: String,
    #[serde(default)]
    pub sha256: Option<String>,
}

impl LocatorConfig {
    pub fn locator(&self) -> WeightsLocator {
        let l = WeightsLocator::new(&self.location);
        match &self.sha256 {
            Some(h) => l.with_sha256(h),
            None => l,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub background: Option<LocatorConfig>,
    pub skin: Option<LocatorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub enable_restoration: bool,
    pub enable_background_removal: bool,
    pub enable_skin_segmentation: bool,
    pub background_blackout_threshold: f64,
    pub skin_blackout_threshold: f64,
    pub restoration: RestorationPolicy,
    pub model_version: Option<String>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            enable_restoration: p.enable_restoration,
            enable_background_removal: p.enable_background_removal,
            enable_skin_segmentation: p.enable_skin_segmentation,
            background_blackout_threshold: p.background_gate.blackout_threshold,
            skin_blackout_threshold: p.skin_gate.blackout_threshold,
            restoration: p.restoration_policy,
            model_version: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Append one metadata line per request (never image bytes).
    pub enabled: bool,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub model_dir: Option<PathBuf>,
    pub backends: BackendsConfig,
    pub pipeline: PipelineSection,
    pub compressor: CompressorPolicy,
    pub audit: AuditConfig,
    /// Static web UI assets served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub disclaimer: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            model_dir: None,
            backends: BackendsConfig::default(),
            pipeline: PipelineSection::default(),
            compressor: CompressorPolicy::default(),
            audit: AuditConfig::default(),
            ui_dir: None,
            disclaimer: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads `path` (if any), then applies overrides from the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Self::from_toml(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        let locator = |v: String| LocatorConfig {
            location: v,
            sha256: None,
        };
        for (key, v) in vars {
            let Some(name) = key.strip_prefix("LESIONSCREEN_") else {
                continue;
            };
            match name {
                "BIND" => self.bind = v,
                "PORT" => self.port = num(&key, &v)?,
                "MODEL_DIR" => self.model_dir = Some(v.into()),
                "BACKGROUND_WEIGHTS" => self.backends.background = Some(locator(v)),
                "SKIN_WEIGHTS" => self.backends.skin = Some(locator(v)),
                "MAX_SIDE" => self.compressor.max_side = num(&key, &v)?,
                "MAX_UPLOAD_BYTES" => self.compressor.max_upload_bytes = num(&key, &v)?,
                "JPEG_QUALITY" => self.compressor.re_encode_quality = num(&key, &v)?,
                "BLACKOUT_THRESHOLD" => {
                    let t: f64 = num(&key, &v)?;
                    self.pipeline.background_blackout_threshold = t;
                    self.pipeline.skin_blackout_threshold = t;
                }
                "AUDIT_PATH" => {
                    self.audit.enabled = true;
                    self.audit.path = Some(v.into());
                }
                "UI_DIR" => self.ui_dir = Some(v.into()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.compressor.validate()?;
        self.pipeline_config().validate().map_err(|e| e.to_string())?;
        if self.audit.enabled && self.audit.path.is_none() {
            return Err("audit.enabled needs audit.path".into());
        }
        Ok(())
    }

    /// Pipeline settings for the service. Restoration output is capped at
    /// the compressor's `max_side`.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            enable_restoration: p.enable_restoration,
            enable_background_removal: p.enable_background_removal,
            enable_skin_segmentation: p.enable_skin_segmentation,
            background_gate: GateConfig {
                blackout_threshold: p.background_blackout_threshold,
            },
            skin_gate: GateConfig {
                blackout_threshold: p.skin_blackout_threshold,
            },
            restoration_policy: RestorationPolicy {
                max_output_side: p.restoration.max_output_side.min(self.compressor.max_side),
                ..p.restoration
            },
            model_version: p.model_version.clone(),
        }
    }
}
