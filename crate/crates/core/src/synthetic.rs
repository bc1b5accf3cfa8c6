//! Generated images for smoke tests, demos and count checks.
//!
//! The texture task has two classes that differ only in texture: a plain
//! skin tone for `others`, the same tone sprinkled with dark dots for
//! `monkeypox`. The dots shift the mean channel values, so the classes are
//! linearly separable on simple colour statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ImageStore, Label, ManifestRecord, Split};
use crate::error::Result;
use crate::imaging::ScreeningImage;

/// One texture image. Same `(label, seed, side)` gives the same pixels.
pub fn texture_image(label: Label, seed: u64, side: u32) -> Result<ScreeningImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tone = [
        rng.random_range(200..216u8),
        rng.random_range(140..160u8),
        rng.random_range(115..135u8),
    ];
    let mut img = image::RgbImage::from_fn(side, side, |_, _| {
        let j: i16 = rng.random_range(-6..=6);
        image::Rgb(tone.map(|c| (c as i16 + j).clamp(0, 255) as u8))
    });
    if label == Label::Monkeypox {
        let radius = (side / 32).max(2) as i64;
        // about a quarter of the area, before overlaps
        let dots = ((side * side) as f64 * 0.25 / (std::f64::consts::PI * (radius * radius) as f64)).ceil() as usize;
        for _ in 0..dots {
            let cx = rng.random_range(0..side) as i64;
            let cy = rng.random_range(0..side) as i64;
            for y in (cy - radius).max(0)..(cy + radius + 1).min(side as i64) {
                for x in (cx - radius).max(0)..(cx + radius + 1).min(side as i64) {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= radius * radius {
                        img.put_pixel(x as u32, y as u32, image::Rgb([95, 35, 30]));
                    }
                }
            }
        }
    }
    ScreeningImage::new(img, format!("texture-{seed}"))
}

/// `n` texture records alternating monkeypox / others, written to `store`
/// as PNGs under `synthetic/`.
pub fn texture_records(
    store: &mut dyn ImageStore,
    prefix: &str,
    split: Split,
    n: usize,
    seed: u64,
    side: u32,
) -> Result<Vec<ManifestRecord>> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Monkeypox } else { Label::Others };
            let id = format!("{prefix}{i:04}");
            let path = format!("synthetic/{id}.png");
            let img = texture_image(label, seed.wrapping_mul(1_000_003).wrapping_add(i as u64), side)?;
            store
                .write(&path, &img.encode_png()?)
                .map_err(|e| crate::error::Error::io(&path, e))?;
            Ok(ManifestRecord::original(id, path, label, split).with_source_tag("synthetic-texture"))
        })
        .collect()
}

/// `n` tiny distinct PNG records of one class, for count arithmetic.
pub fn placeholder_records(
    store: &mut dyn ImageStore,
    prefix: &str,
    label: Label,
    split: Split,
    n: usize,
) -> Result<Vec<ManifestRecord>> {
    (0..n)
        .map(|i| {
            let id = format!("{prefix}{i:04}");
            let path = format!("img/{id}.png");
            let seed = id.bytes().fold(7u32, |a, b| a.wrapping_mul(31).wrapping_add(b as u32));
            let img = ScreeningImage::from_fn(6, 5, &id, |x, y| {
                let v = seed.wrapping_add(x * 17 + y * 29);
                [v as u8, (v >> 8) as u8, (v >> 16) as u8]
            })?;
            store
                .write(&path, &img.encode_png()?)
                .map_err(|e| crate::error::Error::io(&path, e))?;
            Ok(ManifestRecord::original(id, path, label, split))
        })
        .collect()
}
