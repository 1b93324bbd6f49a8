use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::rng::{self, tag, Stream};

/// Augmentation procedure producing the query and key views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Additive brightness shift drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Gaussian pixel noise, truncated at six standard deviations.
    pub noise_std: f64,
    /// Crop area range of the extra small crops.
    pub small_crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.3, 1.0),
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            noise_std: 0.02,
            small_crop_scale: (0.1, 0.4),
        }
    }
}

impl AugmentConfig {
    /// Augmentation that returns the input unchanged.
    pub fn identity() -> Self {
        Self { crop_scale: (1.0, 1.0), flip_prob: 0.0, brightness: 0.0, contrast: 0.0, noise_std: 0.0, small_crop_scale: (1.0, 1.0) }
    }
}

/// Two augmented views of the same source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub x_q: Image,
    pub x_k: Image,
    pub aug_seed: u64,
}

/// Draws both views from independent streams derived from `aug_seed`.
pub fn make_views(image: &Image, aug_seed: u64, aug: &AugmentConfig) -> ViewPair {
    let side = image.height().min(image.width());
    let x_q = augment_view(image, side, aug.crop_scale, aug, &mut rng::stream(&[aug_seed, tag::VIEW_Q]));
    let x_k = augment_view(image, side, aug.crop_scale, aug, &mut rng::stream(&[aug_seed, tag::VIEW_K]));
    ViewPair { x_q, x_k, aug_seed }
}

/// `count` small crops at `side` pixels for distillation students.
pub fn make_small_crops(image: &Image, aug_seed: u64, count: usize, side: usize, aug: &AugmentConfig) -> Vec<Image> {
    (0..count)
        .map(|i| augment_view(image, side, aug.small_crop_scale, aug, &mut rng::stream(&[aug_seed, tag::SMALL_CROP, i as u64])))
        .collect()
}

/// One augmented view drawn from `r`: random resized square crop, flip, jitter, noise.
pub fn augment_view(image: &Image, out_side: usize, scale: (f64, f64), aug: &AugmentConfig, r: &mut Stream) -> Image {
    let (h, w) = (image.height(), image.width());
    let area: f64 = if scale.1 > scale.0 { r.random_range(scale.0..=scale.1) } else { scale.0 };
    let crop = ((area * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
    let y0 = r.random_range(0..=h - crop);
    let x0 = r.random_range(0..=w - crop);
    let flip = r.random_bool(aug.flip_prob.clamp(0.0, 1.0));
    let mut out = resize_region(image, y0, x0, crop, crop, out_side, out_side);
    if flip {
        hflip(&mut out);
    }
    if aug.brightness > 0.0 || aug.contrast > 0.0 {
        let b = if aug.brightness > 0.0 { r.random_range(-aug.brightness..=aug.brightness) } else { 0.0 };
        let c = if aug.contrast > 0.0 { r.random_range(1.0 - aug.contrast..=1.0 + aug.contrast) } else { 1.0 };
        for ch in 0..out.channels() {
            let plane_len = out.height() * out.width();
            let start = ch * plane_len;
            let plane = &mut out.data_mut()[start..start + plane_len];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane_len as f64;
            for v in plane {
                *v = (((*v as f64 - mean) * c + mean + b).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    if aug.noise_std > 0.0 {
        let n = Normal::new(0.0, aug.noise_std).expect("finite noise std");
        let cap = 6.0 * aug.noise_std;
        for v in out.data_mut() {
            *v += n.sample(r).clamp(-cap, cap) as f32;
        }
    }
    out
}

fn hflip(img: &mut Image) {
    let (h, w) = (img.height(), img.width());
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w / 2 {
                let a = img.get(c, y, x);
                let b = img.get(c, y, w - 1 - x);
                img.set(c, y, x, b);
                img.set(c, y, w - 1 - x, a);
            }
        }
    }
}

/// Bilinear resize (half-pixel centres, clamped edges) of a rectangular region.
pub fn resize_region(img: &Image, y0: usize, x0: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = x.floor() as usize;
                (i0, (i0 + 1).min(src - 1), (x - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Image::zeros(out_h, out_w, img.channels());
    for c in 0..img.channels() {
        for (oy, &(y_a, y_b, fy)) in ty.iter().enumerate() {
            for (ox, &(x_a, x_b, fx)) in tx.iter().enumerate() {
                let p = |y: usize, x: usize| img.get(c, y0 + y, x0 + x);
                let top = p(y_a, x_a) * (1.0 - fx) + p(y_a, x_b) * fx;
                let bottom = p(y_b, x_a) * (1.0 - fx) + p(y_b, x_b) * fx;
                out.set(c, oy, ox, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}
