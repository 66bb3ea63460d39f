//! 8-bit grayscale PNG rendering of per-pixel maps.

use crate::error::{Error, Result};

/// Gray level for `v`: `round(255 * clip(v / vmax, 0, 1))`.
pub fn gray_level(v: f64, vmax: f64) -> u8 {
    (255.0 * (v / vmax).clamp(0.0, 1.0)).round() as u8
}

pub fn render_heatmap_png(map: &[f64], height: usize, width: usize, vmax: f64) -> Result<Vec<u8>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDims(vec![height, width]));
    }
    if map.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "map has {} values, expected {height}x{width}",
            map.len()
        )));
    }
    if !(vmax.is_finite() && vmax > 0.0) {
        return Err(Error::InvalidInput(format!("vmax must be finite and > 0, got {vmax}")));
    }
    if let Some(index) = map.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let pixels: Vec<u8> = map.iter().map(|&v| gray_level(v, vmax)).collect();
    let w = u32::try_from(width).map_err(|_| Error::InvalidDims(vec![height, width]))?;
    let h = u32::try_from(height).map_err(|_| Error::InvalidDims(vec![height, width]))?;

    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}
