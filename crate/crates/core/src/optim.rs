//! AdamW optimizer over ViT parameter layouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::vit::ViTParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrix weights only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<F: Real> {
    pub config: AdamWConfig,
    pub steps: u64,
    pub m: ViTParams<F>,
    pub v: ViTParams<F>,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ViTParams<F>, config: AdamWConfig) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape().to_vec()));
        Self { config, steps: 0, m: zeros.clone(), v: zeros }
    }

    /// Layer weights decay; biases, norm gains, class token and positional
    /// table do not.
    pub fn decays(name: &str) -> bool {
        name.ends_with(".w")
    }

    pub fn step(&mut self, params: &mut ViTParams<F>, grad: &ViTParams<F>, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and non-negative")));
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let step = F::from_f64(lr / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(c.eps);
        let decay = F::from_f64(1.0 - lr * c.weight_decay);
        let slots = params.slots_mut().into_iter().zip(grad.slots()).zip(self.m.slots_mut()).zip(self.v.slots_mut());
        for ((((p, g), m), v), name) in slots.zip(&names) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let wd = if Self::decays(name) { decay } else { F::one() };
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((x, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *x = *x * wd - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
