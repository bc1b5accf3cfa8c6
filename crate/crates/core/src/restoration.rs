//! Inference-time resolution restoration for small captures.
//!
//! Images whose shorter side is below the trigger are upscaled by a
//! pluggable super-resolution backend, or by bicubic interpolation when no
//! backend is configured or the backend fails.

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_with, ScreeningImage, StageDecision, StageName, StageReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestorationPolicy {
    pub min_side_trigger: u32,
    pub upscale_factor: u32,
    pub max_output_side: u32,
}

impl Default for RestorationPolicy {
    fn default() -> Self {
        Self {
            min_side_trigger: 224,
            upscale_factor: 2,
            max_output_side: 2048,
        }
    }
}

impl RestorationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.upscale_factor < 1 || self.min_side_trigger < 1 || self.max_output_side < 1 {
            return Err(Error::invalid(format!("invalid restoration policy {self:?}")));
        }
        Ok(())
    }

    /// Output size for an image of `(w, h)`, or `None` when the policy
    /// leaves it alone.
    pub fn target_size(&self, w: u32, h: u32) -> Option<(u32, u32)> {
        if w.min(h) >= self.min_side_trigger || self.upscale_factor <= 1 {
            return None;
        }
        let longest = f64::from(w.max(h));
        let scale = f64::from(self.upscale_factor).min(f64::from(self.max_output_side) / longest);
        if scale <= 1.0 {
            return None;
        }
        let tw = (f64::from(w) * scale).round().max(1.0) as u32;
        let th = (f64::from(h) * scale).round().max(1.0) as u32;
        ((tw, th) != (w, h)).then_some((tw, th))
    }
}

/// A super-resolution model.
pub trait SuperResolver: Send + Sync {
    fn name(&self) -> &str;
    /// Produces an image of exactly `target_w` x `target_h`.
    fn upscale(&self, image: &ScreeningImage, target_w: u32, target_h: u32) -> Result<ScreeningImage>;
}

/// Deterministic bicubic (Catmull-Rom) upscaling.
#[derive(Debug, Clone, Copy, Default)]
pub struct BicubicUpscaler;

impl SuperResolver for BicubicUpscaler {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn upscale(&self, image: &ScreeningImage, target_w: u32, target_h: u32) -> Result<ScreeningImage> {
        resize_with(image, target_w, target_h, FilterType::CatmullRom)
    }
}

/// Upscales small images per `policy`. Never shrinks and never fails; a
/// failing backend falls back to bicubic and says so in the decision note.
pub fn restore(
    image: &ScreeningImage,
    policy: &RestorationPolicy,
    backend: Option<&dyn SuperResolver>,
) -> (ScreeningImage, StageDecision) {
    let Some((tw, th)) = policy.target_size(image.width(), image.height()) else {
        return (
            image.clone(),
            StageDecision::bypassed(StageName::Restoration, 0.0, StageReason::NotRequested),
        );
    };
    if let Some(backend) = backend {
        match backend.upscale(image, tw, th) {
            Ok(out) if out.dimensions() == (tw, th) => {
                return (
                    out,
                    StageDecision::applied(StageName::Restoration, 0.0).with_note(backend.name().to_string()),
                );
            }
            Ok(out) => tracing::warn!(
                backend = backend.name(),
                got = ?out.dimensions(),
                want = ?(tw, th),
                "restoration backend returned wrong size; using bicubic"
            ),
            Err(e) => tracing::warn!(backend = backend.name(), error = %e, "restoration backend failed; using bicubic"),
        }
        let out = BicubicUpscaler
            .upscale(image, tw, th)
            .expect("positive target size");
        return (
            out,
            StageDecision::applied(StageName::Restoration, 0.0).with_note("bicubic_fallback"),
        );
    }
    let out = BicubicUpscaler
        .upscale(image, tw, th)
        .expect("positive target size");
    (
        out,
        StageDecision::applied(StageName::Restoration, 0.0).with_note("bicubic"),
    )
}
