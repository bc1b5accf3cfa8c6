//! Model directory: `weights.safetensors` plus `model.json`.

use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneSpec};
use super::head::{Head, HeadParam};
use super::train::{TrainHistory, TrainedModel};
use super::{HeadSpec, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::locator::sha256_hex;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const METADATA_FILE: &str = "model.json";
const FORMAT: &str = "lesionscreen-model-v1";
const MOVING_MEAN: &str = "head.bn.moving_mean";
const MOVING_VAR: &str = "head.bn.moving_var";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format: String,
    pub model_version: String,
    pub head_spec: HeadSpec,
    pub backbone_spec: BackboneSpec,
    pub feature_dim: usize,
    pub train_config: Option<TrainConfig>,
    pub dataset_manifest_checksum: Option<String>,
    pub weights_sha256: String,
    #[serde(default)]
    pub history: Option<TrainHistory>,
}

impl ModelMetadata {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(METADATA_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            what: "model metadata",
            locator: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn head_tensors(head: &Head) -> Vec<(&'static str, Vec<usize>, Vec<u8>)> {
    let f = head.inputs();
    let u = head.units();
    let shape = |p: HeadParam| match p {
        HeadParam::BnGamma | HeadParam::BnBeta => vec![f],
        HeadParam::DenseKernel => vec![f, u],
        HeadParam::DenseBias => vec![u],
        HeadParam::OutputKernel => vec![u, 2],
        HeadParam::OutputBias => vec![2],
    };
    let mut out: Vec<_> = HeadParam::TRAINABLE
        .iter()
        .map(|&p| (p.tensor_name(), shape(p), f64_bytes(head.param(p))))
        .collect();
    out.push((MOVING_MEAN, vec![f], f64_bytes(head.moving_mean())));
    out.push((MOVING_VAR, vec![f], f64_bytes(head.moving_var())));
    out
}

/// Serialised weights; identical models give identical bytes.
pub(crate) fn weights_bytes(model: &Model) -> Result<Vec<u8>> {
    let backbone = model.backbone.export("backbone.");
    let head = head_tensors(&model.head);
    let mut views = Vec::with_capacity(backbone.len() + head.len());
    for (name, shape, data) in &backbone {
        views.push((
            name.clone(),
            TensorView::new(Dtype::F32, shape.clone(), data).map_err(|e| Error::Model(e.to_string()))?,
        ));
    }
    for (name, shape, data) in &head {
        views.push((
            name.to_string(),
            TensorView::new(Dtype::F64, shape.clone(), data).map_err(|e| Error::Model(e.to_string()))?,
        ));
    }
    safetensors::serialize(views, None).map_err(|e| Error::Model(e.to_string()))
}

fn read_f64(tensors: &SafeTensors<'_>, name: &str, len: usize) -> Result<Vec<f64>> {
    let view = tensors
        .tensor(name)
        .map_err(|e| Error::Model(format!("{name}: {e}")))?;
    if view.dtype() != Dtype::F64 || view.data().len() != len * 8 {
        return Err(Error::Model(format!("{name}: expected {len} f64 values")));
    }
    Ok(view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Model {
    pub fn metadata(&self, history: Option<&TrainHistory>) -> Result<ModelMetadata> {
        Ok(ModelMetadata {
            format: FORMAT.to_string(),
            model_version: self.model_version.clone(),
            head_spec: *self.head.spec(),
            backbone_spec: self.backbone.spec(),
            feature_dim: self.backbone.feature_dim(),
            train_config: self.train_config.clone(),
            dataset_manifest_checksum: self.dataset_checksum.clone(),
            weights_sha256: sha256_hex(&weights_bytes(self)?),
            history: history.cloned(),
        })
    }

    /// Writes the artifact into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path, history: Option<&TrainHistory>) -> Result<ModelMetadata> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = weights_bytes(self)?;
        let meta = ModelMetadata {
            weights_sha256: sha256_hex(&bytes),
            ..self.metadata(history)?
        };
        let weights = dir.join(WEIGHTS_FILE);
        std::fs::write(&weights, &bytes).map_err(|e| Error::io(&weights, e))?;
        let meta_path = dir.join(METADATA_FILE);
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
        Ok(meta)
    }

    /// Loads an artifact written by [`Model::save`]; the result is ready
    /// for inference.
    pub fn load(dir: &Path) -> Result<Model> {
        let locator = dir.display().to_string();
        let load_err = |detail: String| Error::Load {
            what: "model artifact",
            locator: locator.clone(),
            detail,
        };
        let meta = ModelMetadata::read(dir)?;
        if meta.format != FORMAT {
            return Err(load_err(format!("unknown format {:?}", meta.format)));
        }
        meta.head_spec.validate().map_err(|e| load_err(e.to_string()))?;
        let weights = dir.join(WEIGHTS_FILE);
        let bytes = std::fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        let digest = sha256_hex(&bytes);
        if digest != meta.weights_sha256 {
            return Err(load_err(format!(
                "weights checksum mismatch: metadata says {}, file is {digest}",
                meta.weights_sha256
            )));
        }
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| load_err(e.to_string()))?;
        let backbone = Backbone::import(meta.backbone_spec, &tensors, "backbone.").map_err(|e| load_err(e.to_string()))?;
        let f = backbone.feature_dim();
        if f != meta.feature_dim {
            return Err(load_err(format!("feature width {f} does not match metadata {}", meta.feature_dim)));
        }
        let mut head = Head::zeroed(meta.head_spec, f);
        for p in HeadParam::TRAINABLE {
            let len = head.param(p).len();
            *head.param_mut(p) = read_f64(&tensors, p.tensor_name(), len).map_err(|e| load_err(e.to_string()))?;
        }
        let mean = read_f64(&tensors, MOVING_MEAN, f).map_err(|e| load_err(e.to_string()))?;
        let var = read_f64(&tensors, MOVING_VAR, f).map_err(|e| load_err(e.to_string()))?;
        head.set_moving_stats(&mean, &var);
        Ok(Model {
            backbone,
            head,
            model_version: meta.model_version,
            initialized: true,
            train_config: meta.train_config,
            dataset_checksum: meta.dataset_manifest_checksum,
        })
    }
}

impl TrainedModel {
    pub fn save(&self, dir: &Path) -> Result<ModelMetadata> {
        self.model.save(dir, Some(&self.history))
    }
}
