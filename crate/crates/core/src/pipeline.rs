//! The screening chain: restoration, background removal, skin
//! segmentation, classification. Each stage can be switched off, which
//! makes it the identity on pixels while still leaving an entry in the
//! stage trace.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::{train, ClassificationResult, LabeledImage, Model, TrainConfig, TrainedModel};
use crate::dataset::{DatasetManifest, ImageStore};
use crate::error::{Error, Result};
use crate::imaging::{ScreeningImage, StageDecision, StageName};
use crate::restoration::{restore, RestorationPolicy, SuperResolver};
use crate::segmentation::{gated_segment, BackendKind, GateConfig, SegmentationBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub enable_restoration: bool,
    pub enable_background_removal: bool,
    pub enable_skin_segmentation: bool,
    pub background_gate: GateConfig,
    pub skin_gate: GateConfig,
    pub restoration_policy: RestorationPolicy,
    /// When set, the screener refuses a model with a different version.
    #[serde(default)]
    pub model_version: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_stages(true, true, true)
    }
}

impl PipelineConfig {
    pub fn with_stages(restoration: bool, background_removal: bool, skin_segmentation: bool) -> Self {
        Self {
            enable_restoration: restoration,
            enable_background_removal: background_removal,
            enable_skin_segmentation: skin_segmentation,
            background_gate: GateConfig::default(),
            skin_gate: GateConfig::default(),
            restoration_policy: RestorationPolicy::default(),
            model_version: None,
        }
    }

    pub fn classifier_only() -> Self {
        Self::with_stages(false, false, false)
    }

    /// `(restoration, background_removal, skin_segmentation)`.
    pub fn toggles(&self) -> (bool, bool, bool) {
        (
            self.enable_restoration,
            self.enable_background_removal,
            self.enable_skin_segmentation,
        )
    }

    /// Short form such as `R- B+ S+`.
    pub fn descriptor(&self) -> String {
        let m = |on: bool| if on { '+' } else { '-' };
        let (r, b, s) = self.toggles();
        format!("R{} B{} S{}", m(r), m(b), m(s))
    }

    pub fn validate(&self) -> Result<()> {
        GateConfig::new(self.background_gate.blackout_threshold)?;
        GateConfig::new(self.skin_gate.blackout_threshold)?;
        self.restoration_policy.validate()
    }
}

/// The eight stage combinations, classifier-only first and the full stack
/// last: none, R, B, S, R+B, B+S, R+S, R+B+S.
pub fn ablation_configs() -> Vec<PipelineConfig> {
    [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (false, false, true),
        (true, true, false),
        (false, true, true),
        (true, false, true),
        (true, true, true),
    ]
    .into_iter()
    .map(|(r, b, s)| PipelineConfig::with_stages(r, b, s))
    .collect()
}

/// Which chain a call belongs to. Training never restores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Inference,
    Training,
}

/// Backends for the preprocessing stages. A missing restorer means bicubic.
#[derive(Clone, Default)]
pub struct Stages {
    pub background: Option<Arc<dyn SegmentationBackend>>,
    pub skin: Option<Arc<dyn SegmentationBackend>>,
    pub restorer: Option<Arc<dyn SuperResolver>>,
}

impl fmt::Debug for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stages")
            .field("background", &self.background.as_ref().map(|b| b.name().to_string()))
            .field("skin", &self.skin.as_ref().map(|b| b.name().to_string()))
            .field("restorer", &self.restorer.as_ref().map(|b| b.name().to_string()))
            .finish()
    }
}

impl Stages {
    pub fn new(
        background: Option<Arc<dyn SegmentationBackend>>,
        skin: Option<Arc<dyn SegmentationBackend>>,
    ) -> Result<Self> {
        for (slot, want) in [(&background, BackendKind::SalientObject), (&skin, BackendKind::SkinRegion)] {
            if let Some(b) = slot {
                if b.kind() != want {
                    return Err(Error::invalid(format!(
                        "backend {} is a {} model, expected {want}",
                        b.name(),
                        b.kind()
                    )));
                }
            }
        }
        Ok(Self {
            background,
            skin,
            restorer: None,
        })
    }

    pub fn with_restorer(mut self, restorer: Arc<dyn SuperResolver>) -> Self {
        self.restorer = Some(restorer);
        self
    }

    /// Checks that every enabled segmentation stage has a backend. Missing
    /// backends are not fatal: the stage passes images through.
    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        if cfg.enable_background_removal && self.background.is_none() {
            return Err(Error::invalid("background removal enabled but no backend configured"));
        }
        if cfg.enable_skin_segmentation && self.skin.is_none() {
            return Err(Error::invalid("skin segmentation enabled but no backend configured"));
        }
        Ok(())
    }
}

fn segment_stage(
    image: ScreeningImage,
    enabled: bool,
    backend: Option<&Arc<dyn SegmentationBackend>>,
    gate: &GateConfig,
    stage: StageName,
) -> (ScreeningImage, StageDecision) {
    match (enabled, backend) {
        (true, Some(b)) => gated_segment(&image, b.as_ref(), gate),
        (true, None) => (
            image,
            StageDecision::bypassed(stage, 0.0, crate::imaging::StageReason::BackendUnavailable)
                .with_note("no backend configured"),
        ),
        (false, _) => (image, StageDecision::not_requested(stage)),
    }
}

/// Runs the three preprocessing stages and returns the image the
/// classifier should see plus one decision per stage, in pipeline order.
pub fn preprocess(
    image: &ScreeningImage,
    cfg: &PipelineConfig,
    stages: &Stages,
    mode: PipelineMode,
) -> (ScreeningImage, Vec<StageDecision>) {
    let mut trace = Vec::with_capacity(3);
    let restored = if cfg.enable_restoration && mode == PipelineMode::Inference {
        let (out, d) = restore(image, &cfg.restoration_policy, stages.restorer.as_deref());
        trace.push(d);
        out
    } else {
        trace.push(StageDecision::not_requested(StageName::Restoration));
        image.clone()
    };
    let (bg, d) = segment_stage(
        restored,
        cfg.enable_background_removal,
        stages.background.as_ref(),
        &cfg.background_gate,
        StageName::BackgroundRemoval,
    );
    trace.push(d);
    let (skin, d) = segment_stage(
        bg,
        cfg.enable_skin_segmentation,
        stages.skin.as_ref(),
        &cfg.skin_gate,
        StageName::SkinSegmentation,
    );
    trace.push(d);
    (skin, trace)
}

/// A trained model wired to its preprocessing backends. Shareable across
/// threads; `screen` takes `&self`.
#[derive(Debug, Clone)]
pub struct Screener {
    model: Arc<Model>,
    stages: Stages,
    config: PipelineConfig,
}

impl Screener {
    pub fn new(model: Arc<Model>, stages: Stages, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if let Err(e) = stages.check(&config) {
            tracing::warn!(error = %e, "enabled stage will report backend_unavailable");
        }
        if !model.is_initialized() {
            return Err(Error::Model("screener needs a trained or loaded model".into()));
        }
        if let Some(want) = &config.model_version {
            if want != model.model_version() {
                return Err(Error::Model(format!(
                    "configured model_version {want} but loaded {}",
                    model.model_version()
                )));
            }
        }
        Ok(Self { model, stages, config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn stages(&self) -> &Stages {
        &self.stages
    }

    pub fn screen(&self, image: &ScreeningImage) -> Result<ClassificationResult> {
        self.screen_with(image, &self.config)
    }

    /// Screens with different toggles or gates than the configured ones.
    /// Stages without a backend are reported as unavailable.
    pub fn screen_with(&self, image: &ScreeningImage, cfg: &PipelineConfig) -> Result<ClassificationResult> {
        let (processed, trace) = preprocess(image, cfg, &self.stages, PipelineMode::Inference);
        let mut result = self.model.predict(&processed)?;
        result.stage_trace = trace;
        Ok(result)
    }
}

fn load_labeled(manifest: &DatasetManifest, store: &dyn ImageStore) -> Result<Vec<LabeledImage>> {
    manifest
        .records()
        .iter()
        .map(|r| {
            Ok(LabeledImage {
                image: r.load_image(store)?,
                label: r.label,
            })
        })
        .collect()
}

/// Trains `model` on manifest images. With `segment_training_images` set,
/// images pass through background removal and skin segmentation as
/// configured in `pipeline`; restoration is never applied to training data.
pub fn train_on_manifests(
    model: Model,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    store: &dyn ImageStore,
    cfg: &TrainConfig,
    stages: &Stages,
    pipeline: &PipelineConfig,
) -> Result<TrainedModel> {
    let train_images = load_labeled(train_manifest, store)?;
    let val_images = load_labeled(val_manifest, store)?;
    let prep_cfg = if cfg.segment_training_images {
        pipeline.clone()
    } else {
        PipelineConfig::classifier_only()
    };
    let preprocess_fn = |img: &ScreeningImage| preprocess(img, &prep_cfg, stages, PipelineMode::Training).0;
    let mut trained = train(model, &train_images, &val_images, cfg, &preprocess_fn)?;
    trained.model.set_dataset_checksum(train_manifest.checksum());
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::StageReason;
    use crate::segmentation::stub::{all_foreground, FixedBlackoutBackend};

    fn stub_stages(bg_blackout: f64) -> Stages {
        Stages::new(
            Some(Arc::new(FixedBlackoutBackend {
                kind: BackendKind::SalientObject,
                blackout: bg_blackout,
            })),
            Some(Arc::new(all_foreground(BackendKind::SkinRegion))),
        )
        .unwrap()
    }

    fn image(w: u32, h: u32) -> ScreeningImage {
        ScreeningImage::from_fn(w, h, "p", |x, y| [(x % 200) as u8 + 20, (y % 200) as u8 + 30, 99]).unwrap()
    }

    #[test]
    fn ablation_grid_layout() {
        let c = ablation_configs();
        assert_eq!(c.len(), 8);
        assert_eq!(c[0].toggles(), (false, false, false));
        assert_eq!(c[7].toggles(), (true, true, true));
        assert!(c.iter().any(|c| c.toggles() == (false, true, true)));
        let mut seen: Vec<_> = c.iter().map(|c| c.toggles()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn all_disabled_yields_three_not_requested_and_same_pixels() {
        let input = image(300, 300);
        let (out, trace) = preprocess(&input, &PipelineConfig::classifier_only(), &Stages::default(), PipelineMode::Inference);
        assert_eq!(out, input);
        assert_eq!(trace.len(), 3);
        for (d, name) in trace.iter().zip(StageName::PIPELINE_ORDER) {
            assert_eq!(d.stage_name, name);
            assert_eq!(d.reason, StageReason::NotRequested);
            assert!(!d.applied);
        }
    }

    #[test]
    fn identity_backends_leave_large_images_untouched() {
        let input = image(300, 260);
        let (out, trace) = preprocess(&input, &PipelineConfig::default(), &stub_stages(0.0), PipelineMode::Inference);
        assert_eq!(out.as_raw(), input.as_raw());
        assert!(!trace[0].applied);
        assert!(trace[1].applied && trace[2].applied);
    }

    #[test]
    fn bypassed_level_one_hands_untouched_image_to_level_two() {
        let input = image(300, 300);
        let seen = Arc::new(std::sync::Mutex::new(None));
        let seen2 = seen.clone();
        let skin = crate::segmentation::stub::FnBackend {
            kind: BackendKind::SkinRegion,
            f: move |img: &ScreeningImage| {
                *seen2.lock().unwrap() = Some(img.clone());
                Ok(crate::imaging::BinaryMask::filled(img.width(), img.height(), true))
            },
        };
        let stages = Stages::new(
            Some(Arc::new(FixedBlackoutBackend {
                kind: BackendKind::SalientObject,
                blackout: 0.9,
            })),
            Some(Arc::new(skin)),
        )
        .unwrap();
        let (_, trace) = preprocess(&input, &PipelineConfig::default(), &stages, PipelineMode::Inference);
        assert_eq!(trace[1].reason, StageReason::OverThreshold);
        assert!(trace[2].applied);
        assert_eq!(seen.lock().unwrap().as_ref().unwrap(), &input);
    }

    #[test]
    fn training_mode_never_restores() {
        let input = image(64, 64);
        let cfg = PipelineConfig::with_stages(true, false, false);
        let (out, trace) = preprocess(&input, &cfg, &Stages::default(), PipelineMode::Training);
        assert_eq!(out, input);
        assert_eq!(trace[0].reason, StageReason::NotRequested);
        let (out, trace) = preprocess(&input, &cfg, &Stages::default(), PipelineMode::Inference);
        assert_eq!(out.dimensions(), (128, 128));
        assert!(trace[0].applied);
    }

    #[test]
    fn mismatched_backend_kinds_are_rejected() {
        let err = Stages::new(Some(Arc::new(all_foreground(BackendKind::SkinRegion))), None);
        assert!(err.is_err());
    }

    #[test]
    fn enabled_stage_without_backend_is_a_config_error() {
        assert!(Stages::default().check(&PipelineConfig::default()).is_err());
        assert!(Stages::default().check(&PipelineConfig::with_stages(true, false, false)).is_ok());
    }
}
