use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{DataSource, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Parameters of the procedural texture dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_classes: 10, n_per_class: 100, side: 64, channels: 3, noise: 0.1 }
    }
}

/// Generating parameters of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    /// Grating frequency in cycles per image side.
    pub frequency: f64,
    /// Grating orientation in radians (0 or π/2).
    pub orientation: f64,
    pub phase: f64,
    /// Blob centre in pixels.
    pub centre: (f64, f64),
}

const FREQUENCIES: [f64; 5] = [2.0, 3.5, 5.0, 6.5, 8.0];

/// Five frequencies times two flip-invariant orientations.
pub const MAX_CLASSES: usize = 10;

/// Class `c` uses frequency `c mod 5` and orientation `⌊c/5⌋ mod 2`; nuisance
/// factors are phase, blob position, per-channel colour and noise.
pub fn class_texture(class: usize, r: &mut impl Rng, side: usize) -> TextureParams {
    let jitter = side as f64 * 0.15;
    let mid = side as f64 / 2.0;
    TextureParams {
        frequency: FREQUENCIES[class % FREQUENCIES.len()],
        orientation: if (class / FREQUENCIES.len()).is_multiple_of(2) { 0.0 } else { PI / 2.0 },
        phase: r.random_range(0.0..2.0 * PI),
        centre: (mid + r.random_range(-jitter..=jitter), mid + r.random_range(-jitter..=jitter)),
    }
}

fn render(t: &TextureParams, side: usize, channels: usize, noise: f64, r: &mut impl Rng) -> Image {
    let tint: Vec<f64> = (0..channels).map(|_| r.random_range(0.6..=1.0)).collect();
    let sigma = side as f64 / 3.0;
    let (ct, st) = (t.orientation.cos(), t.orientation.sin());
    let noise_dist = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut img = Image::zeros(side, side, channels);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = (fx * ct + fy * st) / side as f64;
            let wave = (2.0 * PI * t.frequency * u + t.phase).sin();
            let d2 = (fx - t.centre.1).powi(2) + (fy - t.centre.0).powi(2);
            let env = (-d2 / (2.0 * sigma * sigma)).exp();
            for (c, tint) in tint.iter().enumerate() {
                let n = if noise > 0.0 { noise_dist.sample(r) } else { 0.0 };
                img.set(c, y, x, (0.5 + 0.45 * tint * env * wave + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Class-conditional procedural textures, fully determined by `seed`.
///
/// Samples are ordered class-major.
pub fn generate_synthetic(seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.side < 32 {
        return Err(Error::invalid(format!("synthetic side {} below 32", spec.side)));
    }
    if !(2..=MAX_CLASSES).contains(&spec.n_classes) {
        return Err(Error::invalid(format!("synthetic data supports 2 to {MAX_CLASSES} classes, got {}", spec.n_classes)));
    }
    if spec.channels == 0 {
        return Err(Error::invalid("synthetic data needs at least one channel"));
    }
    let mut images = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut params = Vec::with_capacity(images.capacity());
    for c in 0..spec.n_classes {
        for i in 0..spec.n_per_class {
            let mut r = rng::stream(&[seed, tag::DATA, c as u64, i as u64]);
            let t = class_texture(c, &mut r, spec.side);
            images.push(render(&t, spec.side, spec.channels, spec.noise, &mut r));
            labels.push(c);
            params.push(t);
        }
    }
    let mut ds = Dataset::new(images, labels, spec.n_classes, DataSource::Synthetic { seed, spec: spec.clone() })?;
    ds.texture_params = Some(params);
    Ok(ds)
}
