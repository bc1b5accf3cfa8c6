//! Image and mask types shared by every stage, plus the coverage arithmetic
//! the segmentation gates depend on.

use std::io::Cursor;

use image::imageops::{self, FilterType};
use image::{ImageFormat, ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Colour space of every [`ScreeningImage`]. Decoding normalises to this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Srgb,
}

/// A decoded 8-bit sRGB raster with at least one pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreeningImage {
    pixels: RgbImage,
    source_id: String,
}

impl ScreeningImage {
    pub fn new(pixels: RgbImage, source_id: impl Into<String>) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::invalid(format!(
                "image must be at least 1x1, got {}x{}",
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    /// Builds an image from packed RGB bytes, row-major.
    pub fn from_raw(
        width: u32,
        height: u32,
        data: Vec<u8>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} bytes for {width}x{height} RGB, got {}",
                data.len()
            )));
        }
        let pixels = RgbImage::from_raw(width, height, data)
            .ok_or_else(|| Error::invalid("raw buffer does not match dimensions"))?;
        Self::new(pixels, source_id)
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        source_id: impl Into<String>,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self> {
        Self::new(
            RgbImage::from_fn(width, height, |x, y| Rgb(f(x, y))),
            source_id,
        )
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::from_fn(width, height, "constant", |_, _| rgb)
    }

    /// Decodes PNG or JPEG bytes, converting whatever the file holds to
    /// 8-bit RGB.
    pub fn decode(bytes: &[u8], source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        let decode_err = |detail: String| Error::Decode {
            source_id: source_id.clone(),
            detail,
        };
        let format = image::guess_format(bytes).map_err(|e| decode_err(e.to_string()))?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
            return Err(decode_err(format!("unsupported format {format:?}")));
        }
        let decoded = ImageReader::with_format(Cursor::new(bytes), format)
            .decode()
            .map_err(|e| decode_err(e.to_string()))?;
        Self::new(decoded.to_rgb8(), source_id)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.pixels
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn color_space(&self) -> ColorSpace {
        ColorSpace::Srgb
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels.get_pixel(x, y).0
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn as_raw(&self) -> &[u8] {
        self.pixels.as_raw()
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    /// Rebuilds an image with the same provenance around new pixels.
    pub(crate) fn replace_pixels(&self, pixels: RgbImage) -> Result<Self> {
        Self::new(pixels, self.source_id.clone())
    }
}

/// Per-pixel keep/remove grid; `true` marks foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "mask of {width}x{height} needs {} cells, got {}",
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn background_count(&self) -> usize {
        self.bits.len() - self.foreground_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Restoration,
    BackgroundRemoval,
    SkinSegmentation,
}

impl StageName {
    pub const PIPELINE_ORDER: [StageName; 3] = [
        StageName::Restoration,
        StageName::BackgroundRemoval,
        StageName::SkinSegmentation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Restoration => "restoration",
            StageName::BackgroundRemoval => "background_removal",
            StageName::SkinSegmentation => "skin_segmentation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageReason {
    Ok,
    OverThreshold,
    BackendUnavailable,
    NotRequested,
}

/// What one pipeline stage did to the image.
///
/// `applied == false` always carries a reason other than `Ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDecision {
    pub stage_name: StageName,
    pub applied: bool,
    pub blackout_fraction: f64,
    pub reason: StageReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl StageDecision {
    pub fn applied(stage_name: StageName, blackout_fraction: f64) -> Self {
        Self {
            stage_name,
            applied: true,
            blackout_fraction,
            reason: StageReason::Ok,
            note: None,
        }
    }

    /// # Panics
    /// If `reason` is [`StageReason::Ok`].
    pub fn bypassed(stage_name: StageName, blackout_fraction: f64, reason: StageReason) -> Self {
        assert_ne!(reason, StageReason::Ok, "a bypassed stage needs a reason");
        Self {
            stage_name,
            applied: false,
            blackout_fraction,
            reason,
            note: None,
        }
    }

    pub fn not_requested(stage_name: StageName) -> Self {
        Self::bypassed(stage_name, 0.0, StageReason::NotRequested)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Fraction of mask cells that are background (would be blacked out).
pub fn blackout_fraction(mask: &BinaryMask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("blackout fraction of a zero-area mask"));
    }
    Ok(mask.background_count() as f64 / mask.len() as f64)
}

/// Keeps pixels under foreground cells and blacks out the rest.
pub fn apply_mask(image: &ScreeningImage, mask: &BinaryMask) -> Result<ScreeningImage> {
    if image.dimensions() != mask.dimensions() {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let mut out = image.pixels().clone();
    for (px, &keep) in out.pixels_mut().zip(mask.bits()) {
        if !keep {
            *px = Rgb([0, 0, 0]);
        }
    }
    image.replace_pixels(out)
}

/// Bilinear resize. Same-size requests return the input untouched.
pub fn resize(image: &ScreeningImage, target_w: u32, target_h: u32) -> Result<ScreeningImage> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid(format!(
            "resize target must be positive, got {target_w}x{target_h}"
        )));
    }
    if image.dimensions() == (target_w, target_h) {
        return Ok(image.clone());
    }
    let out = imageops::resize(image.pixels(), target_w, target_h, FilterType::Triangle);
    image.replace_pixels(out)
}

/// Resize with a caller-chosen filter; used by restoration's bicubic path.
pub(crate) fn resize_with(
    image: &ScreeningImage,
    target_w: u32,
    target_h: u32,
    filter: FilterType,
) -> Result<ScreeningImage> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let out = imageops::resize(image.pixels(), target_w, target_h, filter);
    image.replace_pixels(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> ScreeningImage {
        ScreeningImage::from_fn(w, h, "g", |x, y| {
            [(x * 37 % 256) as u8, (y * 53 % 256) as u8, ((x + y) * 11 % 256) as u8]
        })
        .unwrap()
    }

    #[test]
    fn rejects_zero_area_images() {
        assert!(ScreeningImage::new(RgbImage::new(0, 4), "z").is_err());
        assert!(ScreeningImage::from_raw(2, 2, vec![0; 11], "z").is_err());
    }

    #[test]
    fn blackout_of_uniform_masks() {
        assert_eq!(blackout_fraction(&BinaryMask::filled(10, 10, true)).unwrap(), 0.0);
        assert_eq!(blackout_fraction(&BinaryMask::filled(10, 10, false)).unwrap(), 1.0);
    }

    #[test]
    fn blackout_counts_false_cells() {
        // 90 false cells out of 100, placed in the first 9 rows.
        let mask = BinaryMask::from_fn(10, 10, |_, y| y >= 9);
        let direct = mask.bits().iter().filter(|b| !**b).count() as f64 / 100.0;
        assert_eq!(direct, 0.90);
        assert_eq!(blackout_fraction(&mask).unwrap(), direct);
    }

    #[test]
    fn blackout_of_empty_mask_is_an_error() {
        let err = blackout_fraction(&BinaryMask::filled(0, 0, true)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn apply_all_true_is_identity() {
        let img = gradient(7, 5);
        let out = apply_mask(&img, &BinaryMask::filled(7, 5, true)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn apply_all_false_is_black() {
        let img = gradient(7, 5);
        let out = apply_mask(&img, &BinaryMask::filled(7, 5, false)).unwrap();
        assert!(out.as_raw().iter().all(|&v| v == 0));
    }

    #[test]
    fn apply_single_foreground_pixel() {
        let img = ScreeningImage::from_raw(
            2,
            2,
            vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120],
            "p",
        )
        .unwrap();
        let mask = BinaryMask::from_bits(2, 2, vec![true, false, false, false]).unwrap();
        let out = apply_mask(&img, &mask).unwrap();
        assert_eq!(out.as_raw(), &[10, 20, 30, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let img = gradient(4, 4);
        assert!(apply_mask(&img, &BinaryMask::filled(4, 3, true)).is_err());
    }

    #[test]
    fn resize_same_size_is_noop() {
        let img = gradient(224, 224);
        assert_eq!(resize(&img, 224, 224).unwrap(), img);
    }

    #[test]
    fn resize_uniform_stays_uniform() {
        let img = ScreeningImage::filled(448, 448, [128, 128, 128]).unwrap();
        let out = resize(&img, 224, 224).unwrap();
        assert_eq!(out.dimensions(), (224, 224));
        assert!(out.as_raw().iter().all(|&v| v == 128));
    }

    #[test]
    fn resize_hits_target_shape() {
        let out = resize(&gradient(100, 80), 224, 224).unwrap();
        assert_eq!(out.dimensions(), (224, 224));
        assert!(resize(&gradient(4, 4), 0, 3).is_err());
    }

    #[test]
    fn decode_round_trips_png_and_rejects_text() {
        let img = gradient(9, 6);
        let png = img.encode_png().unwrap();
        let back = ScreeningImage::decode(&png, "rt").unwrap();
        assert_eq!(back.as_raw(), img.as_raw());
        assert!(ScreeningImage::decode(b"hello, not an image", "txt").is_err());
    }

    #[test]
    #[should_panic]
    fn bypassed_with_ok_reason_panics() {
        StageDecision::bypassed(StageName::Restoration, 0.0, StageReason::Ok);
    }
}
