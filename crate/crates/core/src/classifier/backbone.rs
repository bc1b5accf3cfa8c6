//! Compound-scaled convolutional feature extractor.
//!
//! A reduced mobile inverted-bottleneck network: a strided stem, four
//! MBConv stages (expansion, depthwise convolution, squeeze-and-excitation,
//! linear projection) and a 1x1 head convolution followed by global average
//! pooling. Width and depth scale with the compound coefficient φ as
//! 1.1^φ and 1.2^φ. Batch normalisation is assumed folded into the
//! convolution biases, as in exported inference graphs.
//!
//! The backbone is frozen: training only updates the classification head.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize, ScreeningImage};
use crate::locator::sha256_hex;
use crate::nn::{conv2d, sigmoid, swish, ConvShape, FeatureMap};
use crate::segmentation::{f32_bytes, f32_from_bytes};

const FORMAT: &str = "lesionscreen-backbone-v1";
const WIDTH_COEFFICIENT: f64 = 1.1;
const DEPTH_COEFFICIENT: f64 = 1.2;
const BASE_STEM: usize = 8;
const BASE_HEAD: usize = 128;

struct StageArgs {
    expand: usize,
    kernel: usize,
    stride: usize,
    out: usize,
    repeats: usize,
}

const BASE_STAGES: [StageArgs; 4] = [
    StageArgs { expand: 1, kernel: 3, stride: 1, out: 8, repeats: 1 },
    StageArgs { expand: 4, kernel: 3, stride: 2, out: 16, repeats: 1 },
    StageArgs { expand: 4, kernel: 5, stride: 2, out: 24, repeats: 1 },
    StageArgs { expand: 4, kernel: 3, stride: 2, out: 40, repeats: 1 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub compound_coefficient: u32,
    pub input_size: u32,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            compound_coefficient: 0,
            input_size: crate::CLASSIFIER_INPUT_SIDE,
        }
    }
}

impl BackboneSpec {
    fn width_multiplier(&self) -> f64 {
        WIDTH_COEFFICIENT.powi(self.compound_coefficient as i32)
    }

    fn depth_multiplier(&self) -> f64 {
        DEPTH_COEFFICIENT.powi(self.compound_coefficient as i32)
    }

    /// Channel count rounded to a multiple of 8, never dropping more than
    /// 10% below the scaled value.
    fn round_filters(&self, base: usize) -> usize {
        let scaled = base as f64 * self.width_multiplier();
        let mut rounded = (((scaled + 4.0) / 8.0).floor() as usize * 8).max(8);
        if (rounded as f64) < 0.9 * scaled {
            rounded += 8;
        }
        rounded
    }

    fn round_repeats(&self, base: usize) -> usize {
        (base as f64 * self.depth_multiplier()).ceil() as usize
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.round_filters(BASE_HEAD)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    shape: ConvShape,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv {
    fn zeros(shape: ConvShape) -> Self {
        Self {
            weight: vec![0.0; shape.weight_len()],
            bias: vec![0.0; shape.out_channels],
            shape,
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        conv2d(x, self.shape, &self.weight, &self.bias)
    }
}

/// Fully connected layer, weight laid out (out, in).
#[derive(Debug, Clone, PartialEq)]
struct Linear {
    inputs: usize,
    outputs: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MbBlock {
    expand: Option<Conv>,
    depthwise: Conv,
    se_reduce: Linear,
    se_expand: Linear,
    project: Conv,
    residual: bool,
}

impl MbBlock {
    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let mut x = match &self.expand {
            Some(conv) => {
                let mut y = conv.forward(input);
                y.map_inplace(swish);
                y
            }
            None => input.clone(),
        };
        x = self.depthwise.forward(&x);
        x.map_inplace(swish);

        let squeezed: Vec<f32> = self
            .se_reduce
            .forward(&x.global_average_pool())
            .into_iter()
            .map(swish)
            .collect();
        let gates: Vec<f32> = self.se_expand.forward(&squeezed).into_iter().map(sigmoid).collect();
        let n = x.height * x.width;
        for (c, g) in gates.iter().enumerate() {
            for v in &mut x.data[c * n..(c + 1) * n] {
                *v *= g;
            }
        }

        let mut out = self.project.forward(&x);
        if self.residual {
            for (o, i) in out.data.iter_mut().zip(&input.data) {
                *o += i;
            }
        }
        out
    }
}

/// Frozen feature extractor. Forward passes are read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    stem: Conv,
    blocks: Vec<MbBlock>,
    head: Conv,
}

impl Backbone {
    /// Architecture for `spec` with all parameters zero.
    fn skeleton(spec: BackboneSpec) -> Self {
        let stem_out = spec.round_filters(BASE_STEM);
        let stem = Conv::zeros(ConvShape {
            in_channels: 3,
            out_channels: stem_out,
            kernel: 3,
            stride: 2,
            groups: 1,
        });
        let mut blocks = Vec::new();
        let mut channels = stem_out;
        for stage in &BASE_STAGES {
            let out = spec.round_filters(stage.out);
            for r in 0..spec.round_repeats(stage.repeats) {
                let stride = if r == 0 { stage.stride } else { 1 };
                let mid = channels * stage.expand;
                let expand = (stage.expand != 1).then(|| {
                    Conv::zeros(ConvShape {
                        in_channels: channels,
                        out_channels: mid,
                        kernel: 1,
                        stride: 1,
                        groups: 1,
                    })
                });
                let squeeze = (channels / 4).max(1);
                blocks.push(MbBlock {
                    expand,
                    depthwise: Conv::zeros(ConvShape {
                        in_channels: mid,
                        out_channels: mid,
                        kernel: stage.kernel,
                        stride,
                        groups: mid,
                    }),
                    se_reduce: Linear::zeros(mid, squeeze),
                    se_expand: Linear::zeros(squeeze, mid),
                    project: Conv::zeros(ConvShape {
                        in_channels: mid,
                        out_channels: out,
                        kernel: 1,
                        stride: 1,
                        groups: 1,
                    }),
                    residual: stride == 1 && channels == out,
                });
                channels = out;
            }
        }
        let head = Conv::zeros(ConvShape {
            in_channels: channels,
            out_channels: spec.feature_dim(),
            kernel: 1,
            stride: 1,
            groups: 1,
        });
        Self {
            spec,
            stem,
            blocks,
            head,
        }
    }

    /// Seeded He-normal initialisation (unit-gain for linear projections).
    pub fn random(spec: BackboneSpec, seed: u64) -> Self {
        let mut net = Self::skeleton(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [f32], fan_in: usize, gain: f64| {
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            for v in w {
                *v = normal.sample(&mut rng) as f32;
            }
        };
        fill(&mut net.stem.weight, net.stem.shape.fan_in(), 2.0);
        for b in &mut net.blocks {
            if let Some(e) = &mut b.expand {
                fill(&mut e.weight, e.shape.fan_in(), 2.0);
            }
            fill(&mut b.depthwise.weight, b.depthwise.shape.fan_in(), 2.0);
            fill(&mut b.se_reduce.weight, b.se_reduce.inputs, 1.0);
            fill(&mut b.se_expand.weight, b.se_expand.inputs, 1.0);
            fill(&mut b.project.weight, b.project.shape.fan_in(), 1.0);
        }
        fill(&mut net.head.weight, net.head.shape.fan_in(), 2.0);
        net
    }

    pub fn spec(&self) -> BackboneSpec {
        self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.head.shape.out_channels
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Pooled features of `image` after resizing it to the input size.
    pub fn features(&self, image: &ScreeningImage) -> Result<Vec<f32>> {
        let side = self.spec.input_size;
        let resized = resize(image, side, side)?;
        let mut x = self.stem.forward(&FeatureMap::from_image(&resized));
        x.map_inplace(swish);
        for block in &self.blocks {
            x = block.forward(&x);
        }
        x = self.head.forward(&x);
        x.map_inplace(swish);
        Ok(x.global_average_pool())
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        fn conv<'a>(name: String, c: &'a Conv, out: &mut Vec<(String, Vec<usize>, &'a [f32])>) {
            let s = c.shape;
            out.push((
                format!("{name}.weight"),
                vec![s.out_channels, s.in_channels / s.groups, s.kernel, s.kernel],
                &c.weight,
            ));
            out.push((format!("{name}.bias"), vec![s.out_channels], &c.bias));
        }
        let mut out = Vec::new();
        conv("stem".into(), &self.stem, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(e) = &b.expand {
                conv(format!("block{i}.expand"), e, &mut out);
            }
            conv(format!("block{i}.depthwise"), &b.depthwise, &mut out);
            for (n, l) in [("se_reduce", &b.se_reduce), ("se_expand", &b.se_expand)] {
                out.push((format!("block{i}.{n}.weight"), vec![l.outputs, l.inputs], &l.weight[..]));
                out.push((format!("block{i}.{n}.bias"), vec![l.outputs], &l.bias[..]));
            }
            conv(format!("block{i}.project"), &b.project, &mut out);
        }
        conv("head".into(), &self.head, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out = Vec::new();
        out.push(("stem.weight".to_string(), &mut self.stem.weight));
        out.push(("stem.bias".to_string(), &mut self.stem.bias));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(e) = &mut b.expand {
                out.push((format!("block{i}.expand.weight"), &mut e.weight));
                out.push((format!("block{i}.expand.bias"), &mut e.bias));
            }
            out.push((format!("block{i}.depthwise.weight"), &mut b.depthwise.weight));
            out.push((format!("block{i}.depthwise.bias"), &mut b.depthwise.bias));
            out.push((format!("block{i}.se_reduce.weight"), &mut b.se_reduce.weight));
            out.push((format!("block{i}.se_reduce.bias"), &mut b.se_reduce.bias));
            out.push((format!("block{i}.se_expand.weight"), &mut b.se_expand.weight));
            out.push((format!("block{i}.se_expand.bias"), &mut b.se_expand.bias));
            out.push((format!("block{i}.project.weight"), &mut b.project.weight));
            out.push((format!("block{i}.project.bias"), &mut b.project.bias));
        }
        out.push(("head.weight".to_string(), &mut self.head.weight));
        out.push(("head.bias".to_string(), &mut self.head.bias));
        out
    }

    /// Tensor name → (shape, little-endian f32 bytes), prefixed.
    pub(crate) fn export(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<u8>)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, s, d)| (format!("{prefix}{n}"), s, f32_bytes(d)))
            .collect()
    }

    pub(crate) fn import(spec: BackboneSpec, tensors: &SafeTensors<'_>, prefix: &str) -> Result<Self> {
        let mut net = Self::skeleton(spec);
        for (name, slot) in net.tensors_mut() {
            let full = format!("{prefix}{name}");
            let view = tensors
                .tensor(&full)
                .map_err(|e| Error::Model(format!("{full}: {e}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Model(format!("{full}: expected f32")));
            }
            let data = f32_from_bytes(view.data());
            if data.len() != slot.len() {
                return Err(Error::Model(format!(
                    "{full}: expected {} values, found {}",
                    slot.len(),
                    data.len()
                )));
            }
            *slot = data;
        }
        Ok(net)
    }

    /// Standalone backbone weights file.
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let blobs = self.export("");
        let views = blobs
            .iter()
            .map(|(n, s, d)| {
                TensorView::new(Dtype::F32, s.clone(), d)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Model(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert(
            "compound_coefficient".to_string(),
            self.spec.compound_coefficient.to_string(),
        );
        meta.insert("input_size".to_string(), self.spec.input_size.to_string());
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_safetensors(bytes: &[u8], locator: &str) -> Result<Self> {
        let load_err = |detail: String| Error::Load {
            what: "backbone weights",
            locator: locator.to_string(),
            detail: format!("{detail} (sha256 {})", sha256_hex(bytes)),
        };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| load_err(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| load_err("missing metadata header".into()))?;
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(load_err("not a backbone weights file".into()));
        }
        let num = |k: &str| -> Result<u32> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| load_err(format!("missing or invalid {k}")))
        };
        let spec = BackboneSpec {
            compound_coefficient: num("compound_coefficient")?,
            input_size: num("input_size")?,
        };
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| load_err(e.to_string()))?;
        Self::import(spec, &tensors, "").map_err(|e| load_err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compound_scaling_widens_and_deepens() {
        let b0 = BackboneSpec::default();
        let b3 = BackboneSpec {
            compound_coefficient: 3,
            ..b0
        };
        assert_eq!(b0.feature_dim(), 128);
        assert!(b3.feature_dim() > b0.feature_dim());
        assert_eq!(b0.round_repeats(1), 1);
        assert_eq!(b3.round_repeats(1), 2);
        assert_eq!(b0.round_filters(40), 40);
        assert_eq!(b3.round_filters(40), 56); // 40 * 1.331 = 53.2 -> 56
    }

    #[test]
    fn features_are_finite_and_deterministic() {
        let net = Backbone::random(BackboneSpec::default(), 1);
        let img = ScreeningImage::from_fn(50, 40, "f", |x, y| [(x * 5) as u8, (y * 6) as u8, 128]).unwrap();
        let a = net.features(&img).unwrap();
        assert_eq!(a.len(), 128);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, net.features(&img).unwrap());
        assert!(a.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn weights_round_trip() {
        let net = Backbone::random(BackboneSpec::default(), 9);
        let bytes = net.to_safetensors().unwrap();
        let back = Backbone::from_safetensors(&bytes, "mem").unwrap();
        assert_eq!(back, net);
        assert!(Backbone::from_safetensors(&bytes[..100], "mem").is_err());
    }
}
