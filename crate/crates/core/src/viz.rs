//! Prototype attention maps: the noise-free soft assignment probability of
//! one prototype over the patch grid, rendered as a heat overlay.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::ImageTensor;
use crate::model::ProtoModel;

pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGrid {
    pub prototype: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major probabilities in `[0, 1]`.
    pub values: Vec<Vec<f32>>,
}

impl AttentionGrid {
    /// Row and column of the largest value (first in row-major order).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0, f32::NEG_INFINITY);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        (best.0, best.1)
    }
}

/// Soft assignment probability of `prototype` at every patch token.
pub fn attention_map(model: &ProtoModel, image: &ImageTensor, prototype: usize) -> Result<AttentionGrid> {
    let k = model.num_prototypes();
    if prototype >= k {
        return Err(Error::PrototypeOutOfRange { id: prototype, k });
    }
    let (rows, cols) = model.spec.patch.grid();
    let probs = model.soft_probabilities(image)?;
    let values = (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| probs[1 + i * cols + j][prototype])
                .collect()
        })
        .collect();
    Ok(AttentionGrid {
        prototype,
        rows,
        cols,
        values,
    })
}

/// "Hot" colormap: black → red → yellow → white.
pub fn hot(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (v * 3.0).min(1.0),
        (v * 3.0 - 1.0).clamp(0.0, 1.0),
        (v * 3.0 - 2.0).clamp(0.0, 1.0),
    ]
}

/// Bilinear upsampling of the grid to the image size, normalized by the
/// map maximum, blended over the image with [`OVERLAY_ALPHA`].
pub fn render_overlay(image: &ImageTensor, grid: &AttentionGrid) -> Result<image::RgbImage> {
    let mut heat = ImageTensor::zeros(1, grid.rows, grid.cols);
    for (i, row) in grid.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            *heat.at_mut(0, i, j) = v;
        }
    }
    let heat = heat.resize(image.height, image.width);
    let max = heat.data.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let rgb = if image.channels == 3 {
        image.clone()
    } else if image.channels == 1 {
        let mut c = ImageTensor::zeros(3, image.height, image.width);
        for ch in 0..3 {
            for y in 0..image.height {
                for x in 0..image.width {
                    *c.at_mut(ch, y, x) = image.at(0, y, x);
                }
            }
        }
        c
    } else {
        return Err(Error::InvalidArgument(format!(
            "cannot overlay a {}-channel image",
            image.channels
        )));
    };
    let mut out = ImageTensor::zeros(3, image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            let c = hot(heat.at(0, y, x) * scale);
            for ch in 0..3 {
                *out.at_mut(ch, y, x) =
                    (1.0 - OVERLAY_ALPHA) * rgb.at(ch, y, x) + OVERLAY_ALPHA * c[ch];
            }
        }
    }
    Ok(out.to_rgb8())
}

pub fn png_bytes(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes `<stem>.png` and `<stem>.json` (the raw grid).
pub fn write_attention(dir: &Path, stem: &str, overlay: &image::RgbImage, grid: &AttentionGrid) -> Result<()> {
    use crate::checkpoint::write_atomic;
    write_atomic(&dir.join(format!("{stem}.png")), &png_bytes(overlay)?)?;
    let mut json = serde_json::to_string_pretty(grid)?;
    json.push('\n');
    write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hot_endpoints() {
        assert_eq!(hot(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(hot(1.0), [1.0, 1.0, 1.0]);
        assert_eq!(hot(1.0 / 3.0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn overlay_peaks_where_the_grid_peaks() {
        let img = ImageTensor::zeros(3, 32, 32);
        let mut values = vec![vec![0.1f32; 4]; 4];
        values[2][1] = 1.0;
        values[0][3] = 0.5;
        let grid = AttentionGrid {
            prototype: 0,
            rows: 4,
            cols: 4,
            values,
        };
        let out = render_overlay(&img, &grid).unwrap();
        // Brightest pixel must fall inside cell (2, 1).
        let (mut bx, mut by, mut bv) = (0, 0, 0u16);
        for (x, y, p) in out.enumerate_pixels() {
            let v = p.0.iter().map(|&c| c as u16).sum::<u16>();
            if v > bv {
                (bx, by, bv) = (x, y, v);
            }
        }
        assert_eq!((by / 8, bx / 8), (2, 1));
    }
}
