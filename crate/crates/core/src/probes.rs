//! Frozen-feature evaluation: 1-NN cosine accuracy and a linear probe.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::vit::{patchify, Encoder, ViTParams};

static COMPRESSION_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of compression operator calls in this process, across threads.
pub fn compression_calls() -> usize {
    COMPRESSION_CALLS.load(Ordering::Relaxed)
}

pub(crate) fn note_compression_call() {
    COMPRESSION_CALLS.fetch_add(1, Ordering::Relaxed);
}

/// Class-token backbone features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// L2-normalized copies for cosine search.
    normalized: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::invalid(format!("{} features but {} labels", features.len(), labels.len())));
        }
        let dim = features.first().map_or(0, |f| f.len());
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("features differ in dimension"));
        }
        let normalized = features
            .iter()
            .map(|f| {
                let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    f.iter().map(|v| v / n).collect()
                } else {
                    f.clone()
                }
            })
            .collect();
        Ok(Self { features, labels, normalized })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Encodes every image uncompressed at the base patch size and keeps the
/// class-token output of the final norm. No augmentation is applied.
pub fn extract_features<F: Real>(encoder: &Encoder<F>, params: &ViTParams<F>, dataset: &Dataset) -> Result<FeatureBank> {
    let cfg = encoder.config();
    let features = dataset
        .images
        .par_iter()
        .map(|img| {
            if img.height() != cfg.image_side || img.width() != cfg.image_side {
                return Err(Error::invalid(format!("image {}x{} does not match model side {}", img.height(), img.width(), cfg.image_side)));
            }
            let tokens = patchify(img, cfg.base_patch)?;
            let view = crate::compression::CompressedView { indices: (0..tokens.rows()).collect(), tokens, patch: cfg.base_patch, grid: cfg.base_grid() };
            let out = encoder.encode(params, &view)?;
            Ok(out.feature.data().iter().map(|v| v.as_f64()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    FeatureBank::new(features, dataset.labels.clone())
}

/// 1-nearest-neighbour accuracy by cosine similarity. With `exclude_self`
/// the banks hold the same samples and test `i` never matches train `i`.
pub fn nn_accuracy(train: &FeatureBank, test: &FeatureBank, exclude_self: bool) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("feature banks must be non-empty"));
    }
    if train.dim() != test.dim() {
        return Err(Error::invalid(format!("feature dimension {} vs {}", train.dim(), test.dim())));
    }
    if exclude_self && (train.len() != test.len() || train.len() < 2) {
        return Err(Error::invalid("self-exclusion needs two identical banks of at least two samples"));
    }
    let mut correct = 0usize;
    for (i, q) in test.normalized.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, t) in train.normalized.iter().enumerate() {
            if exclude_self && i == j {
                continue;
            }
            let s: f64 = q.iter().zip(t).map(|(a, b)| a * b).sum();
            if s > best.0 {
                best = (s, j);
            }
        }
        if train.labels[best.1] == test.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Outcome of a linear probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 5000;

/// Multinomial logistic regression on standardized features.
///
/// Objective: mean cross-entropy plus `reg/2·‖W‖²` (bias unregularized),
/// minimized from zero by L-BFGS with a backtracking line search.
#[derive(Clone, Debug)]
pub struct Softmax {
    pub dim: usize,
    pub classes: usize,
    /// `(dim + 1) x classes`, last row is the bias.
    pub weights: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Softmax {
    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    pub fn predict(&self, f: &[f64]) -> usize {
        let x = self.standardize(f);
        let logits = logits(&self.weights, &x, self.dim, self.classes);
        logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i)
    }

    pub fn accuracy(&self, bank: &FeatureBank) -> f64 {
        let hits = bank.features.iter().zip(&bank.labels).filter(|(f, &l)| self.predict(f) == l).count();
        hits as f64 / bank.len().max(1) as f64
    }
}

fn logits(w: &[f64], x: &[f64], dim: usize, classes: usize) -> Vec<f64> {
    let mut z = w[dim * classes..].to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (zc, wc) in z.iter_mut().zip(&w[i * classes..(i + 1) * classes]) {
                *zc += xi * wc;
            }
        }
    }
    z
}

/// Objective value and gradient of the regularized mean cross-entropy.
pub fn softmax_objective(w: &[f64], xs: &[Vec<f64>], ys: &[usize], dim: usize, classes: usize, reg: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    let n = xs.len() as f64;
    for (x, &y) in xs.iter().zip(ys) {
        let z = logits(w, x, dim, classes);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        loss += m + sum.ln() - z[y];
        let p: Vec<f64> = z.iter().enumerate().map(|(c, v)| (v - m).exp() / sum - if c == y { 1.0 } else { 0.0 }).collect();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (g, pc) in grad[i * classes..(i + 1) * classes].iter_mut().zip(&p) {
                    *g += xi * pc;
                }
            }
        }
        for (g, pc) in grad[dim * classes..].iter_mut().zip(&p) {
            *g += pc;
        }
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    let wr = &w[..dim * classes];
    loss += 0.5 * reg * wr.iter().map(|v| v * v).sum::<f64>();
    for (g, v) in grad[..dim * classes].iter_mut().zip(wr) {
        *g += reg * v;
    }
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the probe on `train`; returns the model and whether the gradient
/// tolerance was reached.
pub fn fit_softmax(train: &FeatureBank, classes: usize, reg: f64) -> Result<(Softmax, bool, usize, f64)> {
    if classes < 2 {
        return Err(Error::invalid("linear probe needs at least two classes"));
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training bank"));
    }
    if !(reg >= 0.0) {
        return Err(Error::invalid(format!("regularization {reg} must be non-negative")));
    }
    let dim = train.dim();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|i| train.features.iter().map(|f| f[i]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|i| {
            let var = train.features.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut model = Softmax { dim, classes, weights: vec![0.0; (dim + 1) * classes], mean, scale };
    let xs: Vec<Vec<f64>> = train.features.iter().map(|f| model.standardize(f)).collect();
    let ys = &train.labels;
    if ys.iter().any(|&y| y >= classes) {
        return Err(Error::invalid("label outside the class range"));
    }
    let f = |w: &[f64]| softmax_objective(w, &xs, ys, dim, classes, reg);

    const HISTORY: usize = 10;
    let mut w = model.weights.clone();
    let (mut loss, mut g) = f(&w);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iters = 0;
    let mut gnorm = dot(&g, &g).sqrt();
    while gnorm > PROBE_GRAD_TOL && iters < PROBE_MAX_ITERS {
        iters += 1;
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let a = dot(s, &q) / dot(y, s);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), a) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let b = dot(y, &q) / dot(y, s);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let (new_w, new_loss, new_g) = loop {
            let cand: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (l, gr) = f(&cand);
            if l <= loss + 1e-4 * step * slope || step < 1e-12 {
                break (cand, l, gr);
            }
            step *= 0.5;
        };
        let s: Vec<f64> = new_w.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let improved = new_loss < loss;
        if dot(&s, &y) > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        w = new_w;
        loss = new_loss;
        g = new_g;
        gnorm = dot(&g, &g).sqrt();
        if !improved && step < 1e-12 {
            break;
        }
    }
    model.weights = w;
    Ok((model, gnorm <= PROBE_GRAD_TOL, iters, gnorm))
}

/// Trains the probe on `train` and reports accuracy on `test`.
///
/// Non-convergence is reported through `converged` and logged.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, reg: f64) -> Result<ProbeResult> {
    if train.dim() != test.dim() {
        return Err(Error::invalid(format!("feature dimension {} vs {}", train.dim(), test.dim())));
    }
    let classes = train.n_classes().max(test.n_classes());
    let (model, converged, iterations, grad_norm) = fit_softmax(train, classes, reg)?;
    if !converged {
        log::warn!("linear probe stopped after {iterations} iterations with gradient norm {grad_norm:.3e}");
    }
    Ok(ProbeResult { accuracy: model.accuracy(test), converged, iterations, grad_norm })
}
