use std::path::Path;

use anyhow::{Context, Result};
use image::GrayImage;
use sfas_core::CHIP;

/// Writes an 80x80 chip with values in `[0, 1]` as 8-bit grayscale.
pub fn save_chip(values: &[f64], path: &Path) -> Result<()> {
    let bytes = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    save_gray(bytes, path)
}

/// Writes a binary mask as black/white.
pub fn save_mask(mask: &[u8], path: &Path) -> Result<()> {
    save_gray(mask.iter().map(|&m| if m == 0 { 0 } else { 255 }).collect(), path)
}

fn save_gray(bytes: Vec<u8>, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(CHIP as u32, CHIP as u32, bytes).context("chip has the wrong pixel count")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
