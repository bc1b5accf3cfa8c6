//! Ingress normalisation: size check, decode, downscale, re-encode.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use lesionscreen_core::{resize, ScreeningImage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorPolicy {
    pub max_side: u32,
    pub max_upload_bytes: usize,
    pub re_encode_quality: u8,
}

impl Default for CompressorPolicy {
    fn default() -> Self {
        Self {
            max_side: 1024,
            max_upload_bytes: 10 * 1024 * 1024,
            re_encode_quality: 85,
        }
    }
}

impl CompressorPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_side < lesionscreen_core::CLASSIFIER_INPUT_SIDE {
            return Err(format!(
                "compressor max_side {} is below the classifier input side",
                self.max_side
            ));
        }
        if self.max_upload_bytes == 0 {
            return Err("max_upload_bytes must be positive".into());
        }
        if !(1..=100).contains(&self.re_encode_quality) {
            return Err("re_encode_quality must lie in 1..=100".into());
        }
        Ok(())
    }

    /// Size after capping the longer side at `max_side`; never larger
    /// than the input.
    pub fn target_size(&self, w: u32, h: u32) -> (u32, u32) {
        let longest = w.max(h);
        if longest <= self.max_side {
            return (w, h);
        }
        let scale = f64::from(self.max_side) / f64::from(longest);
        let fit = |v: u32| ((f64::from(v) * scale).round() as u32).clamp(1, self.max_side);
        if w >= h {
            (self.max_side, fit(h))
        } else {
            (fit(w), self.max_side)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngressError {
    #[error("upload of {size} bytes exceeds the {limit}-byte limit")]
    TooLarge { size: usize, limit: usize },
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub image: ScreeningImage,
    pub original_size: (u32, u32),
    pub downscaled: bool,
}

/// Decodes an upload and shrinks it so neither side exceeds
/// `policy.max_side`. Downscaled images are round-tripped through JPEG at
/// the configured quality; smaller ones pass through decoded as-is.
pub fn compress_ingress(bytes: &[u8], policy: &CompressorPolicy, source_id: &str) -> Result<Compressed, IngressError> {
    if bytes.len() > policy.max_upload_bytes {
        return Err(IngressError::TooLarge {
            size: bytes.len(),
            limit: policy.max_upload_bytes,
        });
    }
    let image = ScreeningImage::decode(bytes, source_id).map_err(|e| IngressError::Unsupported(e.to_string()))?;
    let original_size = image.dimensions();
    let (tw, th) = policy.target_size(original_size.0, original_size.1);
    if (tw, th) == original_size {
        return Ok(Compressed {
            image,
            original_size,
            downscaled: false,
        });
    }
    let small = resize(&image, tw, th).map_err(|e| IngressError::Unsupported(e.to_string()))?;
    let mut jpeg = Cursor::new(Vec::new());
    JpegEncoder::new_with_quality(&mut jpeg, policy.re_encode_quality)
        .encode_image(small.pixels())
        .map_err(|e| IngressError::Unsupported(e.to_string()))?;
    let image = ScreeningImage::decode(jpeg.get_ref(), source_id).map_err(|e| IngressError::Unsupported(e.to_string()))?;
    Ok(Compressed {
        image,
        original_size,
        downscaled: true,
    })
}
