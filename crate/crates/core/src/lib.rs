//! Staged skin-lesion screening.
//!
//! The inference chain is restoration, then salient-object background
//! removal, then skin-region segmentation, then a convolutional classifier
//! with a regularised transfer head. Both segmentation stages sit behind a
//! coverage gate: a mask that blacks out more than 87% of its input is not
//! applied.
//!
//! Besides the chain itself the crate carries the dataset builder used to
//! assemble balanced, leakage-free splits, the classifier training harness
//! and the weighted-metric / ablation evaluation harness.

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod locator;
pub mod nn;
pub mod pipeline;
pub mod restoration;
pub mod segmentation;
pub mod synthetic;

pub use classifier::{
    build_model, BackboneSource, BackboneSpec, ClassificationResult, HeadSpec, Model,
    TrainConfig, TrainedModel,
};
pub use dataset::{DatasetManifest, Label, ManifestRecord, Origin, Split, TransformDescriptor};
pub use error::{Error, Result};
pub use evaluation::{
    run_ablation, weighted_metrics, AblationReport, ConfusionMatrix, ImageClassifier,
    MetricsReport,
};
pub use imaging::{
    apply_mask, blackout_fraction, resize, BinaryMask, ScreeningImage, StageDecision, StageName,
    StageReason,
};
pub use pipeline::{ablation_configs, PipelineConfig, PipelineMode, Screener, Stages};
pub use restoration::{restore, BicubicUpscaler, RestorationPolicy, SuperResolver};
pub use segmentation::{gated_segment, load_backend, BackendKind, GateConfig, SegmentationBackend};

/// Side length of the square classifier input.
pub const CLASSIFIER_INPUT_SIDE: u32 = 224;
