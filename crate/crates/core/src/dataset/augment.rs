//! Geometric, noise and colour-shift augmentation. Photometric distortions
//! (blur, contrast, gamma) are deliberately absent.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ScreeningImage;

/// Kind-specific transform parameters.
///
/// Translation is a fraction of width/height; noise variance and channel
/// shifts are on the [0, 1] intensity scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "snake_case")]
pub enum TransformParams {
    Rotation { degrees: f64 },
    Translation { dx: f64, dy: f64 },
    NoiseInjection { variance: f64 },
    ColorSpaceShift { shift: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformDescriptor {
    #[serde(flatten)]
    pub params: TransformParams,
    pub seed: u64,
}

impl TransformDescriptor {
    pub fn rotation(degrees: f64, seed: u64) -> Self {
        Self {
            params: TransformParams::Rotation { degrees },
            seed,
        }
    }

    pub fn translation(dx: f64, dy: f64, seed: u64) -> Self {
        Self {
            params: TransformParams::Translation { dx, dy },
            seed,
        }
    }

    pub fn noise(variance: f64, seed: u64) -> Self {
        Self {
            params: TransformParams::NoiseInjection { variance },
            seed,
        }
    }

    pub fn color_shift(shift: [f64; 3], seed: u64) -> Self {
        Self {
            params: TransformParams::ColorSpaceShift { shift },
            seed,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.params {
            TransformParams::Rotation { .. } => "rotation",
            TransformParams::Translation { .. } => "translation",
            TransformParams::NoiseInjection { .. } => "noise_injection",
            TransformParams::ColorSpaceShift { .. } => "color_space_shift",
        }
    }

    /// Draws a kind uniformly, then parameters uniformly within `bounds`.
    pub fn sample(rng: &mut impl Rng, bounds: &TransformBounds) -> Self {
        let seed = rng.random::<u64>();
        let params = match rng.random_range(0..4u8) {
            0 => TransformParams::Rotation {
                degrees: rng.random_range(-bounds.max_rotation_degrees..=bounds.max_rotation_degrees),
            },
            1 => TransformParams::Translation {
                dx: rng.random_range(-bounds.max_translation..=bounds.max_translation),
                dy: rng.random_range(-bounds.max_translation..=bounds.max_translation),
            },
            2 => TransformParams::NoiseInjection {
                variance: rng.random_range(0.0..=bounds.max_noise_variance),
            },
            _ => {
                let m = bounds.max_channel_shift;
                TransformParams::ColorSpaceShift {
                    shift: [
                        rng.random_range(-m..=m),
                        rng.random_range(-m..=m),
                        rng.random_range(-m..=m),
                    ],
                }
            }
        };
        Self { params, seed }
    }
}

/// Admissible parameter ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformBounds {
    pub max_rotation_degrees: f64,
    pub max_translation: f64,
    pub max_noise_variance: f64,
    pub max_channel_shift: f64,
}

impl Default for TransformBounds {
    fn default() -> Self {
        Self {
            max_rotation_degrees: 40.0,
            max_translation: 0.2,
            max_noise_variance: 0.05,
            max_channel_shift: 20.0 / 255.0,
        }
    }
}

impl TransformBounds {
    pub fn check(&self, t: &TransformDescriptor) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTransform(msg));
        match &t.params {
            TransformParams::Rotation { degrees } => {
                if !degrees.is_finite() || degrees.abs() > self.max_rotation_degrees {
                    return bad(format!(
                        "rotation {degrees} outside ±{}°",
                        self.max_rotation_degrees
                    ));
                }
            }
            TransformParams::Translation { dx, dy } => {
                for v in [dx, dy] {
                    if !v.is_finite() || v.abs() > self.max_translation {
                        return bad(format!("translation {v} outside ±{}", self.max_translation));
                    }
                }
            }
            TransformParams::NoiseInjection { variance } => {
                if !variance.is_finite() || *variance < 0.0 || *variance > self.max_noise_variance
                {
                    return bad(format!(
                        "noise variance {variance} outside [0, {}]",
                        self.max_noise_variance
                    ));
                }
            }
            TransformParams::ColorSpaceShift { shift } => {
                for v in shift {
                    if !v.is_finite() || v.abs() > self.max_channel_shift + 1e-12 {
                        return bad(format!(
                            "channel shift {v} outside ±{}",
                            self.max_channel_shift
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies `t` within the default bounds. Output dimensions equal input
/// dimensions and the result is a pure function of `(image, t)`.
pub fn augment(image: &ScreeningImage, t: &TransformDescriptor) -> Result<ScreeningImage> {
    augment_within(image, t, &TransformBounds::default())
}

pub fn augment_within(
    image: &ScreeningImage,
    t: &TransformDescriptor,
    bounds: &TransformBounds,
) -> Result<ScreeningImage> {
    bounds.check(t)?;
    let src = image.pixels();
    let out = match &t.params {
        TransformParams::Rotation { degrees } => rotate(src, *degrees),
        TransformParams::Translation { dx, dy } => translate(src, *dx, *dy),
        TransformParams::NoiseInjection { variance } => add_noise(src, *variance, t.seed),
        TransformParams::ColorSpaceShift { shift } => shift_channels(src, shift),
    };
    image.replace_pixels(out)
}

/// Counter-clockwise rotation (as displayed) about the image centre with
/// bilinear sampling; uncovered corners become black.
fn rotate(src: &RgbImage, degrees: f64) -> RgbImage {
    if degrees == 0.0 {
        return src.clone();
    }
    let (w, h) = src.dimensions();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    RgbImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = snap(cx + dx * cos - dy * sin);
        let sy = snap(cy + dx * sin + dy * cos);
        sample_bilinear(src, sx, sy)
    })
}

fn sample_bilinear(src: &RgbImage, sx: f64, sy: f64) -> Rgb<u8> {
    let (w, h) = src.dimensions();
    if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
        return Rgb([0, 0, 0]);
    }
    let fx = sx.clamp(0.0, (w - 1) as f64);
    let fy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as u32;
    let y0 = fy.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let mut out = [0u8; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let p = |x, y| f64::from(src.get_pixel(x, y).0[c]);
        let top = p(x0, y0) * (1.0 - ax) + p(x1, y0) * ax;
        let bot = p(x0, y1) * (1.0 - ax) + p(x1, y1) * ax;
        *slot = (top * (1.0 - ay) + bot * ay).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

fn translate(src: &RgbImage, dx: f64, dy: f64) -> RgbImage {
    let (w, h) = src.dimensions();
    let px = (dx * w as f64).round() as i64;
    let py = (dy * h as f64).round() as i64;
    RgbImage::from_fn(w, h, |x, y| {
        let sx = x as i64 - px;
        let sy = y as i64 - py;
        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
            Rgb([0, 0, 0])
        } else {
            *src.get_pixel(sx as u32, sy as u32)
        }
    })
}

fn add_noise(src: &RgbImage, variance: f64, seed: u64) -> RgbImage {
    if variance == 0.0 {
        return src.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite non-negative std");
    let mut out = src.clone();
    for v in out.iter_mut() {
        let noisy = f64::from(*v) / 255.0 + normal.sample(&mut rng);
        *v = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

fn shift_channels(src: &RgbImage, shift: &[f64; 3]) -> RgbImage {
    let offsets = shift.map(|s| (s * 255.0).round() as i32);
    let mut out = src.clone();
    for px in out.pixels_mut() {
        for (v, off) in px.0.iter_mut().zip(offsets) {
            *v = (i32::from(*v) + off).clamp(0, 255) as u8;
        }
    }
    out
}
