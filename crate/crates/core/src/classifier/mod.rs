//! Level-3 classifier: a frozen compound-scaled backbone feeding the
//! four-layer transfer head (batch norm, regularised dense, dropout,
//! softmax), plus training and the on-disk model artifact.

mod artifact;
mod backbone;
mod head;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::{ScreeningImage, StageDecision};
use crate::locator::WeightsLocator;

pub use artifact::{ModelMetadata, METADATA_FILE, WEIGHTS_FILE};
pub use backbone::{Backbone, BackboneSpec};
pub use head::{Adam, DropoutMask, Head, HeadGradients, HeadParam, LossBreakdown, TrainPass};
pub use train::{train, EpochRecord, LabeledImage, TrainHistory, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub units: usize,
    pub kernel_l2: f64,
    pub activity_l1: f64,
    pub bias_l1: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub classes: usize,
    pub activation: Activation,
}

/// Hyperparameters of the transfer head, in layer order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub batch_norm: BatchNormSpec,
    pub dense: DenseSpec,
    pub dropout_rate: f64,
    pub output: OutputSpec,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            batch_norm: BatchNormSpec {
                momentum: 0.99,
                epsilon: 0.001,
            },
            dense: DenseSpec {
                units: 256,
                kernel_l2: 0.016,
                activity_l1: 0.006,
                bias_l1: 0.006,
                activation: Activation::Relu,
            },
            dropout_rate: 0.45,
            output: OutputSpec {
                classes: 2,
                activation: Activation::Softmax,
            },
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.output.classes != 2 || self.output.activation != Activation::Softmax {
            return bad("output layer must be a 2-class softmax".into());
        }
        if self.dense.activation != Activation::Relu || self.dense.units == 0 {
            return bad("dense layer must be a non-empty ReLU layer".into());
        }
        if !(0.0..1.0).contains(&self.batch_norm.momentum) || self.batch_norm.epsilon <= 0.0 {
            return bad("batch norm momentum must be in [0, 1) and epsilon positive".into());
        }
        for (name, v) in [
            ("kernel_l2", self.dense.kernel_l2),
            ("activity_l1", self.dense.activity_l1),
            ("bias_l1", self.dense.bias_l1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

/// Training hyperparameters. `momentum` is Adam's first-moment decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub input_size: u32,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Per-epoch multiplicative decay of the learning rate.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub second_moment_decay: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Run training images through background removal and skin
    /// segmentation, as at inference time.
    pub segment_training_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: crate::CLASSIFIER_INPUT_SIDE,
            optimizer: Optimizer::Adam,
            learning_rate: 0.001,
            lr_decay: 0.95,
            batch_size: 48,
            momentum: 0.99,
            second_moment_decay: 0.999,
            adam_epsilon: 1e-7,
            epochs: 10,
            seed: 0,
            segment_training_images: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("learning-rate decay must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.second_moment_decay) {
            return Err(Error::invalid("moment decays must lie in [0, 1)"));
        }
        if self.input_size != crate::CLASSIFIER_INPUT_SIDE {
            return Err(Error::invalid(format!(
                "classifier input is fixed at {0}x{0}",
                crate::CLASSIFIER_INPUT_SIDE
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Output of one screening: the label, its class probabilities
/// (`[monkeypox, others]`) and what each preprocessing stage did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub label: Label,
    pub probabilities: [f64; 2],
    pub stage_trace: Vec<StageDecision>,
    pub model_version: String,
}

impl ClassificationResult {
    pub fn from_probabilities(probabilities: [f64; 2], model_version: impl Into<String>) -> Self {
        let label = if probabilities[0] >= probabilities[1] {
            Label::Monkeypox
        } else {
            Label::Others
        };
        Self {
            label,
            probabilities,
            stage_trace: Vec::new(),
            model_version: model_version.into(),
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let [a, b] = self.probabilities;
        if !(a >= 0.0 && b >= 0.0 && ((a + b) - 1.0).abs() <= 1e-6) {
            return Err(Error::Model(format!("invalid probability pair {:?}", self.probabilities)));
        }
        let argmax = if a >= b { Label::Monkeypox } else { Label::Others };
        if argmax != self.label {
            return Err(Error::Model("label is not the argmax".into()));
        }
        Ok(())
    }
}

/// Where the backbone weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSource {
    Pretrained(WeightsLocator),
    Random { spec: BackboneSpec, seed: u64 },
}

/// One row of [`Model::layer_summary`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: &'static str,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    backbone: Backbone,
    head: Head,
    model_version: String,
    initialized: bool,
    train_config: Option<TrainConfig>,
    dataset_checksum: Option<String>,
}

/// Builds a classifier: backbone from `source`, freshly initialised head.
pub fn build_model(head: &HeadSpec, source: BackboneSource, seed: u64) -> Result<Model> {
    head.validate()?;
    let backbone = match source {
        BackboneSource::Pretrained(locator) => {
            let bytes = locator.fetch("backbone weights")?;
            Backbone::from_safetensors(&bytes, &locator.location)?
        }
        BackboneSource::Random { spec, seed } => Backbone::random(spec, seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Head::new(*head, backbone.feature_dim(), &mut rng);
    let model_version = format!(
        "mbconv-phi{}-dense{}-untrained",
        backbone.spec().compound_coefficient,
        head.units()
    );
    Ok(Model {
        backbone,
        head,
        model_version,
        initialized: false,
        train_config: None,
        dataset_checksum: None,
    })
}

impl Model {
    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn head_spec(&self) -> &HeadSpec {
        self.head.spec()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    pub fn dataset_checksum(&self) -> Option<&str> {
        self.dataset_checksum.as_deref()
    }

    /// True once trained or loaded from an artifact.
    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Expected input as (height, width, channels).
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.backbone.spec().input_size as usize;
        (s, s, 3)
    }

    pub fn features(&self, image: &ScreeningImage) -> Result<Vec<f64>> {
        Ok(self
            .backbone
            .features(image)?
            .into_iter()
            .map(f64::from)
            .collect())
    }

    /// Inference-mode class probabilities for already-extracted features.
    pub fn predict_features(&self, features: &[f64]) -> [f64; 2] {
        self.head.predict_proba(features)
    }

    /// Inference-mode forward pass over a batch; does not require a
    /// trained model.
    pub fn forward_batch(&self, images: &[ScreeningImage]) -> Result<Vec<[f64; 2]>> {
        images
            .par_iter()
            .map(|img| Ok(self.predict_features(&self.features(img)?)))
            .collect()
    }

    /// Classifies one image of any size (resized internally).
    pub fn predict(&self, image: &ScreeningImage) -> Result<ClassificationResult> {
        if !self.initialized {
            return Err(Error::Model(
                "model has not been trained or loaded from an artifact".into(),
            ));
        }
        let p = self.predict_features(&self.features(image)?);
        Ok(ClassificationResult::from_probabilities(p, self.model_version.clone()))
    }

    pub fn layer_summary(&self) -> Vec<LayerInfo> {
        let f = self.backbone.feature_dim();
        let u = self.head.units();
        let (h, w, _) = self.input_shape();
        let _ = (h, w);
        vec![
            LayerInfo {
                name: "backbone",
                output_shape: vec![f],
                parameters: self.backbone.parameter_count(),
                trainable: false,
            },
            LayerInfo {
                name: "batch_norm",
                output_shape: vec![f],
                parameters: 4 * f,
                trainable: true,
            },
            LayerInfo {
                name: "dense",
                output_shape: vec![u],
                parameters: self.head.param(HeadParam::DenseKernel).len() + self.head.param(HeadParam::DenseBias).len(),
                trainable: true,
            },
            LayerInfo {
                name: "dropout",
                output_shape: vec![u],
                parameters: 0,
                trainable: false,
            },
            LayerInfo {
                name: "output",
                output_shape: vec![self.head_spec().output.classes],
                parameters: self.head.param(HeadParam::OutputKernel).len() + self.head.param(HeadParam::OutputBias).len(),
                trainable: true,
            },
        ]
    }

    pub(crate) fn mark_trained(&mut self, cfg: TrainConfig, dataset_checksum: Option<String>) {
        self.initialized = true;
        self.train_config = Some(cfg);
        self.dataset_checksum = dataset_checksum;
        self.model_version = self.fingerprint_version();
    }

    pub(crate) fn set_dataset_checksum(&mut self, checksum: String) {
        self.dataset_checksum = Some(checksum);
    }

    fn fingerprint_version(&self) -> String {
        let digest = crate::locator::sha256_hex(&artifact::weights_bytes(self).unwrap_or_default());
        format!(
            "mbconv-phi{}-dense{}-{}",
            self.backbone.spec().compound_coefficient,
            self.head.units(),
            &digest[..12]
        )
    }
}
