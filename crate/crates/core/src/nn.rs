//! Minimal CPU tensor kernels for the convolutional models: channel-major
//! feature maps, same-padded grouped convolution, activations and pooling.

use crate::imaging::ScreeningImage;

/// Channel-major (C, H, W) activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// RGB image scaled to [0, 1].
    pub fn from_image(image: &ScreeningImage) -> Self {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (i, px) in image.as_raw().chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out.data[c * h * w + i] = f32::from(v) / 255.0;
            }
        }
        out
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Mean of every channel over all spatial positions.
    pub fn global_average_pool(&self) -> Vec<f32> {
        let n = (self.height * self.width) as f32;
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f32>() / n)
            .collect()
    }
}

/// Convolution geometry. Weights are laid out (out_c, in_c / groups, k, k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        (self.in_channels / self.groups) * self.kernel * self.kernel
    }
}

/// Same-padded 2-D convolution; output spatial size is `ceil(in / stride)`.
pub fn conv2d(input: &FeatureMap, shape: ConvShape, weight: &[f32], bias: &[f32]) -> FeatureMap {
    assert_eq!(input.channels, shape.in_channels, "conv input channels");
    assert_eq!(weight.len(), shape.weight_len(), "conv weight length");
    assert_eq!(bias.len(), shape.out_channels, "conv bias length");
    assert!(shape.in_channels.is_multiple_of(shape.groups) && shape.out_channels.is_multiple_of(shape.groups));

    let (h, w) = (input.height, input.width);
    let s = shape.stride;
    let k = shape.kernel;
    let pad = k / 2;
    let oh = h.div_ceil(s);
    let ow = w.div_ceil(s);
    let in_per_group = shape.in_channels / shape.groups;
    let out_per_group = shape.out_channels / shape.groups;
    let mut out = FeatureMap::zeros(shape.out_channels, oh, ow);

    for oc in 0..shape.out_channels {
        let group = oc / out_per_group;
        let plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(bias[oc]);
        for icg in 0..in_per_group {
            let ic = group * in_per_group + icg;
            let src = input.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((oc * in_per_group + icg) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        // valid ox range: 0 <= ox*s + kx - pad < w
                        let ox_lo = pad.saturating_sub(kx).div_ceil(s);
                        let ox_hi = ((w + pad).saturating_sub(kx)).div_ceil(s).min(ow);
                        if s == 1 {
                            let base = kx as isize - pad as isize;
                            for ox in ox_lo..ox_hi {
                                dst[ox] += wv * row[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] += wv * row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// Bilinear resampling of a single-channel map with pixel-centre alignment.
pub fn resize_plane(src: &[f32], w: usize, h: usize, tw: usize, th: usize) -> Vec<f32> {
    assert_eq!(src.len(), w * h);
    if (w, h) == (tw, th) {
        return src.to_vec();
    }
    let sx = w as f32 / tw as f32;
    let sy = h as f32 / th as f32;
    let mut out = vec![0.0; tw * th];
    for ty in 0..th {
        let fy = ((ty as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f32;
        for tx in 0..tw {
            let fx = ((tx as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - ax) + src[y0 * w + x1] * ax;
            let bot = src[y1 * w + x0] * (1.0 - ax) + src[y1 * w + x1] * ax;
            out[ty * tw + tx] = top * (1.0 - ay) + bot * ay;
        }
    }
    out
}
