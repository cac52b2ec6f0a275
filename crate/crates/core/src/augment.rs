//! Multi-crop augmentation: two global views and `V` local views per image,
//! each resized to the backbone's native input size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::{CropBox, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Blur probability for the first global, second global and local crops.
    pub blur_prob: (f64, f64, f64),
    /// Gaussian sigma range as a fraction of the output side.
    pub blur_sigma: (f64, f64),
    /// Solarization probability, second global crop only.
    pub solarize_prob: f64,
    pub min_image_side: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            blur_prob: (1.0, 0.1, 0.5),
            blur_sigma: (0.1 / 224.0, 2.0 / 224.0),
            solarize_prob: 0.2,
            min_image_side: 8,
        }
    }
}

/// Views of one source image.
#[derive(Debug, Clone)]
pub struct MultiCropBatch {
    pub source_image_id: String,
    pub global_crops: [ImageTensor; 2],
    pub local_crops: Vec<ImageTensor>,
    /// Crop geometry, globals first.
    pub boxes: Vec<CropBox>,
}

impl MultiCropBatch {
    pub fn num_crops(&self) -> usize {
        2 + self.local_crops.len()
    }
}

/// Random-resized-crop geometry: area fraction in `scale`, aspect ratio in
/// `[3/4, 4/3]` (log-uniform); falls back to the full image.
pub fn random_resized_box(
    height: usize,
    width: usize,
    scale: (f64, f64),
    rng: &mut impl Rng,
) -> CropBox {
    let area = (height * width) as f64;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lo..=hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropBox {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    CropBox {
        top: 0,
        left: 0,
        height,
        width,
    }
}

fn view(
    image: &ImageTensor,
    scale: (f64, f64),
    blur_prob: f64,
    solarize_prob: f64,
    out: (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, CropBox)> {
    let b = random_resized_box(image.height, image.width, scale, rng);
    let mut v = image.crop(b)?.resize(out.0, out.1);
    if rng.random_bool(cfg.flip_prob) {
        v = v.flip_horizontal();
    }
    if rng.random_bool(cfg.jitter_prob) {
        let f = |s: f64, rng: &mut dyn rand::RngCore| {
            if s > 0.0 {
                rng.random_range(1.0 - s..=1.0 + s) as f32
            } else {
                1.0
            }
        };
        let (br, co, sa) = (f(cfg.brightness, rng), f(cfg.contrast, rng), f(cfg.saturation, rng));
        v = v.color_jitter(br, co, sa);
    }
    if rng.random_bool(blur_prob) {
        let side = out.0.max(out.1) as f64;
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) * side;
        v = v.gaussian_blur(sigma as f32);
    }
    if rng.random_bool(solarize_prob) {
        v = v.solarize(0.5);
    }
    Ok((v, b))
}

/// Two global and `local_crops` local views, resized to `out` (H, W).
pub fn multi_crop(
    image_id: &str,
    image: &ImageTensor,
    cfg: &AugmentConfig,
    local_crops: usize,
    out: (usize, usize),
    rng: &mut impl Rng,
) -> Result<MultiCropBatch> {
    if image.height < cfg.min_image_side || image.width < cfg.min_image_side {
        return Err(Error::InvalidArgument(format!(
            "image `{image_id}` is {}x{}, below the minimum side {}",
            image.height, image.width, cfg.min_image_side
        )));
    }
    let (g1, b1) = view(image, cfg.global_scale, cfg.blur_prob.0, 0.0, out, cfg, rng)?;
    let (g2, b2) = view(
        image,
        cfg.global_scale,
        cfg.blur_prob.1,
        cfg.solarize_prob,
        out,
        cfg,
        rng,
    )?;
    let mut boxes = vec![b1, b2];
    let mut locals = Vec::with_capacity(local_crops);
    for _ in 0..local_crops {
        let (l, b) = view(image, cfg.local_scale, cfg.blur_prob.2, 0.0, out, cfg, rng)?;
        locals.push(l);
        boxes.push(b);
    }
    Ok(MultiCropBatch {
        source_image_id: image_id.to_string(),
        global_crops: [g1, g2],
        local_crops: locals,
        boxes,
    })
}
