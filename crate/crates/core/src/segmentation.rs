//! Level-1 (salient-object background removal) and level-2 (skin region)
//! segmentation behind a coverage gate.
//!
//! Backends are pluggable. The built-in [`FcnBackend`] runs a small
//! fully-convolutional network whose weights and metadata live in a
//! safetensors file; anything else (an ONNX runtime wrapper, a remote
//! service) can implement [`SegmentationBackend`] directly.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{apply_mask, blackout_fraction, resize, BinaryMask, ScreeningImage, StageDecision, StageName, StageReason};
use crate::locator::{sha256_hex, WeightsLocator};
use crate::nn::{conv2d, relu, resize_plane, sigmoid, ConvShape, FeatureMap};

/// Soft outputs at or above this probability are foreground.
pub const MASK_PROBABILITY_THRESHOLD: f32 = 0.5;

const FCN_FORMAT: &str = "lesionscreen-fcn-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    SalientObject,
    SkinRegion,
}

impl BackendKind {
    pub fn stage(self) -> StageName {
        match self {
            BackendKind::SalientObject => StageName::BackgroundRemoval,
            BackendKind::SkinRegion => StageName::SkinSegmentation,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::SalientObject => "salient_object",
            BackendKind::SkinRegion => "skin_region",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "salient_object" => Ok(BackendKind::SalientObject),
            "skin_region" => Ok(BackendKind::SkinRegion),
            other => Err(Error::invalid(format!("unknown backend kind {other:?}"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A model that marks which pixels of an image to keep.
///
/// `predict` must return a mask with the image's dimensions; adapters
/// rescale internally from their own inference resolution. Implementations
/// must tolerate concurrent calls.
pub trait SegmentationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> BackendKind;
    fn input_size(&self) -> (u32, u32);
    fn predict(&self, image: &ScreeningImage) -> Result<BinaryMask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub blackout_threshold: f64,
}

impl GateConfig {
    pub fn new(blackout_threshold: f64) -> Result<Self> {
        if !(blackout_threshold > 0.0 && blackout_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "blackout threshold {blackout_threshold} must lie in (0, 1)"
            )));
        }
        Ok(Self { blackout_threshold })
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            blackout_threshold: 0.87,
        }
    }
}

/// Runs `backend` and applies its mask unless the mask would black out
/// strictly more than `cfg.blackout_threshold` of the image.
///
/// Never fails: a backend error, or a mask of the wrong shape, leaves the
/// image untouched with reason `backend_unavailable`.
pub fn gated_segment(
    image: &ScreeningImage,
    backend: &dyn SegmentationBackend,
    cfg: &GateConfig,
) -> (ScreeningImage, StageDecision) {
    let stage = backend.kind().stage();
    let unavailable = |detail: String| {
        tracing::warn!(backend = backend.name(), %detail, "segmentation backend failed; passing image through");
        (
            image.clone(),
            StageDecision::bypassed(stage, 0.0, StageReason::BackendUnavailable).with_note(detail),
        )
    };
    let mask = match backend.predict(image) {
        Ok(mask) => mask,
        Err(e) => return unavailable(e.to_string()),
    };
    if mask.dimensions() != image.dimensions() {
        return unavailable(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        ));
    }
    let fraction = match blackout_fraction(&mask) {
        Ok(f) => f,
        Err(e) => return unavailable(e.to_string()),
    };
    if fraction > cfg.blackout_threshold {
        return (
            image.clone(),
            StageDecision::bypassed(stage, fraction, StageReason::OverThreshold),
        );
    }
    match apply_mask(image, &mask) {
        Ok(out) => (out, StageDecision::applied(stage, fraction)),
        Err(e) => unavailable(e.to_string()),
    }
}

/// One same-padded, stride-1 convolution of an [`FcnBackend`].
#[derive(Debug, Clone, PartialEq)]
pub struct FcnLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FcnLayer {
    fn shape(&self) -> ConvShape {
        ConvShape {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: 1,
            groups: 1,
        }
    }
}

/// Fully-convolutional mask predictor: ReLU between layers, sigmoid on the
/// single-channel output, input scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FcnBackend {
    name: String,
    kind: BackendKind,
    input_size: (u32, u32),
    layers: Vec<FcnLayer>,
}

impl FcnBackend {
    pub fn new(
        name: impl Into<String>,
        kind: BackendKind,
        input_size: (u32, u32),
        layers: Vec<FcnLayer>,
    ) -> Result<Self> {
        if input_size.0 == 0 || input_size.1 == 0 {
            return Err(Error::invalid("backend input size must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("FCN needs at least one layer"));
        }
        let mut channels = 3;
        for (i, l) in layers.iter().enumerate() {
            if l.in_channels != channels || l.kernel % 2 == 0 || l.kernel == 0 {
                return Err(Error::invalid(format!(
                    "layer {i}: expected {channels} input channels and an odd kernel"
                )));
            }
            if l.weight.len() != l.shape().weight_len() || l.bias.len() != l.out_channels {
                return Err(Error::invalid(format!("layer {i}: parameter sizes do not match shape")));
            }
            channels = l.out_channels;
        }
        if channels != 1 {
            return Err(Error::invalid("FCN must end in a single output channel"));
        }
        Ok(Self {
            name: name.into(),
            kind,
            input_size,
            layers,
        })
    }

    /// Foreground probability per pixel at the backend's input resolution.
    pub fn soft_mask(&self, image: &ScreeningImage) -> Result<Vec<f32>> {
        let (iw, ih) = self.input_size;
        let resized = resize(image, iw, ih)?;
        let mut x = FeatureMap::from_image(&resized);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = conv2d(&x, layer.shape(), &layer.weight, &layer.bias);
            if i == last {
                x.map_inplace(sigmoid);
            } else {
                x.map_inplace(relu);
            }
        }
        Ok(x.data)
    }

    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let mut metadata = HashMap::new();
        metadata.insert("format".to_string(), FCN_FORMAT.to_string());
        metadata.insert("name".to_string(), self.name.clone());
        metadata.insert("kind".to_string(), self.kind.as_str().to_string());
        metadata.insert("input_width".to_string(), self.input_size.0.to_string());
        metadata.insert("input_height".to_string(), self.input_size.1.to_string());
        metadata.insert("layers".to_string(), self.layers.len().to_string());

        let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (
                        format!("layer{i}.weight"),
                        vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                        f32_bytes(&l.weight),
                    ),
                    (format!("layer{i}.bias"), vec![l.out_channels], f32_bytes(&l.bias)),
                ]
            })
            .collect();
        let views = blobs
            .iter()
            .map(|(name, shape, data)| {
                TensorView::new(Dtype::F32, shape.clone(), data)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(metadata)).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Parses a weights file, checking it declares `expected` kind.
    pub fn from_safetensors(bytes: &[u8], expected: BackendKind, locator: &str) -> Result<Self> {
        let load_err = |detail: String| Error::Load {
            what: "segmentation weights",
            locator: locator.to_string(),
            detail: format!("{detail} (sha256 {})", sha256_hex(bytes)),
        };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| load_err(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| load_err("missing metadata header".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| load_err(format!("missing metadata field {k}")))
        };
        if field("format")? != FCN_FORMAT {
            return Err(load_err(format!("unsupported format {}", field("format")?)));
        }
        let kind = BackendKind::parse(&field("kind")?).map_err(|e| load_err(e.to_string()))?;
        if kind != expected {
            return Err(load_err(format!("weights are for {kind}, expected {expected}")));
        }
        let parse_u = |k: &str| -> Result<usize> {
            field(k)?
                .parse::<usize>()
                .map_err(|e| load_err(format!("{k}: {e}")))
        };
        let input_size = (parse_u("input_width")? as u32, parse_u("input_height")? as u32);
        let n_layers = parse_u("layers")?;

        let tensors = SafeTensors::deserialize(bytes).map_err(|e| load_err(e.to_string()))?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let w = tensors
                .tensor(&format!("layer{i}.weight"))
                .map_err(|e| load_err(e.to_string()))?;
            let b = tensors
                .tensor(&format!("layer{i}.bias"))
                .map_err(|e| load_err(e.to_string()))?;
            if w.dtype() != Dtype::F32 || b.dtype() != Dtype::F32 || w.shape().len() != 4 {
                return Err(load_err(format!("layer{i}: expected f32 (out, in, k, k) weights")));
            }
            let shape = w.shape();
            if shape[2] != shape[3] {
                return Err(load_err(format!("layer{i}: kernel must be square")));
            }
            layers.push(FcnLayer {
                in_channels: shape[1],
                out_channels: shape[0],
                kernel: shape[2],
                weight: f32_from_bytes(w.data()),
                bias: f32_from_bytes(b.data()),
            });
        }
        Self::new(field("name")?, kind, input_size, layers).map_err(|e| load_err(e.to_string()))
    }
}

impl SegmentationBackend for FcnBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> BackendKind {
        self.kind
    }

    fn input_size(&self) -> (u32, u32) {
        self.input_size
    }

    fn predict(&self, image: &ScreeningImage) -> Result<BinaryMask> {
        let soft = self.soft_mask(image)?;
        let (iw, ih) = self.input_size;
        let (w, h) = image.dimensions();
        let full = resize_plane(&soft, iw as usize, ih as usize, w as usize, h as usize);
        BinaryMask::from_bits(
            w,
            h,
            full.iter().map(|&p| p >= MASK_PROBABILITY_THRESHOLD).collect(),
        )
    }
}

/// Loads built-in FCN weights of the given kind.
pub fn load_backend(kind: BackendKind, locator: &WeightsLocator) -> Result<Arc<dyn SegmentationBackend>> {
    let bytes = locator.fetch("segmentation weights")?;
    Ok(Arc::new(FcnBackend::from_safetensors(&bytes, kind, &locator.location)?))
}

pub(crate) fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Backends with fixed behaviour, for tests and dry runs.
pub mod stub {
    use super::*;

    /// Returns the same mask shape for every image: the first
    /// `round(blackout * area)` cells in row-major order are background.
    #[derive(Debug, Clone)]
    pub struct FixedBlackoutBackend {
        pub kind: BackendKind,
        pub blackout: f64,
    }

    impl SegmentationBackend for FixedBlackoutBackend {
        fn name(&self) -> &str {
            "fixed-blackout"
        }

        fn kind(&self) -> BackendKind {
            self.kind
        }

        fn input_size(&self) -> (u32, u32) {
            (1, 1)
        }

        fn predict(&self, image: &ScreeningImage) -> Result<BinaryMask> {
            let (w, h) = image.dimensions();
            let n = w as usize * h as usize;
            let background = (self.blackout * n as f64).round() as usize;
            BinaryMask::from_bits(w, h, (0..n).map(|i| i >= background).collect())
        }
    }

    /// Keeps every pixel.
    pub fn all_foreground(kind: BackendKind) -> FixedBlackoutBackend {
        FixedBlackoutBackend { kind, blackout: 0.0 }
    }

    /// Wraps a closure producing a mask.
    pub struct FnBackend<F> {
        pub kind: BackendKind,
        pub f: F,
    }

    impl<F> SegmentationBackend for FnBackend<F>
    where
        F: Fn(&ScreeningImage) -> Result<BinaryMask> + Send + Sync,
    {
        fn name(&self) -> &str {
            "fn"
        }

        fn kind(&self) -> BackendKind {
            self.kind
        }

        fn input_size(&self) -> (u32, u32) {
            (1, 1)
        }

        fn predict(&self, image: &ScreeningImage) -> Result<BinaryMask> {
            (self.f)(image)
        }
    }

    /// Always fails.
    #[derive(Debug, Clone)]
    pub struct FailingBackend(pub BackendKind);

    impl SegmentationBackend for FailingBackend {
        fn name(&self) -> &str {
            "failing"
        }

        fn kind(&self) -> BackendKind {
            self.0
        }

        fn input_size(&self) -> (u32, u32) {
            (1, 1)
        }

        fn predict(&self, _image: &ScreeningImage) -> Result<BinaryMask> {
            Err(Error::Backend {
                backend: "failing".into(),
                detail: "runtime unavailable".into(),
            })
        }
    }
}
