//! Hardware-independent sample costs and budget accounting.
//!
//! A token costs one unit per forward pass and two per backward pass; costs
//! are normalized by one forward pass over `L_base` tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compression::{grid_tokens, Algorithm, CompressionStrategy};
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

/// Reference sequence length: a 14x14 grid plus the class token.
pub const DEFAULT_L_BASE: usize = 197;

/// Cost of one training sample with the default `L_base = 197`.
///
/// Lengths are total sequence lengths including the class token.
pub fn sample_cost(algorithm: Algorithm, l_q: usize, l_k: usize, k_small: usize, l_q_small: usize) -> Result<f64> {
    CostModel::default().sample_cost(algorithm, l_q, l_k, k_small, l_q_small)
}

/// Sample-cost formulas with a configurable normalization length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub l_base: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { l_base: DEFAULT_L_BASE }
    }
}

impl CostModel {
    pub fn new(l_base: usize) -> Result<Self> {
        if l_base == 0 {
            return Err(Error::invalid("L_base must be positive"));
        }
        Ok(Self { l_base })
    }

    /// Normalizes by the uncompressed length of `cfg`.
    pub fn for_config(cfg: &ViTConfig) -> Self {
        Self { l_base: cfg.base_seq_len() }
    }

    /// * SimCLR: `3(L_q + L_k) / L_base`
    /// * MoCo: `(3 L_q + L_k) / L_base`
    /// * DINO: `(3 L_q + 3 K L_q_small + L_k) / L_base`
    pub fn sample_cost(&self, algorithm: Algorithm, l_q: usize, l_k: usize, k_small: usize, l_q_small: usize) -> Result<f64> {
        if l_q == 0 || l_k == 0 {
            return Err(Error::invalid("sequence lengths must be at least 1"));
        }
        if self.l_base == 0 {
            return Err(Error::invalid("L_base must be positive"));
        }
        let (l_q, l_k, k, l_s) = (l_q as f64, l_k as f64, k_small as f64, l_q_small as f64);
        let tokens = match algorithm {
            Algorithm::Simclr => 3.0 * (l_q + l_k),
            Algorithm::Moco => 3.0 * l_q + l_k,
            Algorithm::Dino => {
                if k_small > 0 && l_q_small == 0 {
                    return Err(Error::invalid("small-crop length must be at least 1"));
                }
                3.0 * l_q + 3.0 * k * l_s + l_k
            }
        };
        Ok(tokens / self.l_base as f64)
    }

    /// Cost of one sample trained with `strategy`.
    ///
    /// Small crops (distillation only) are `small_side` pixels at the base patch
    /// size and share the query keep fraction when the strategy compresses them.
    pub fn strategy_cost(&self, algorithm: Algorithm, strategy: &CompressionStrategy, cfg: &ViTConfig, k_small: usize, small_side: usize) -> Result<f64> {
        let (l_q, l_k) = strategy.seq_lens();
        let k_small = if algorithm == Algorithm::Dino { k_small } else { 0 };
        let l_small = if k_small > 0 {
            let n = grid_tokens(small_side, cfg.base_patch);
            let kept = if strategy.compress_small_crops {
                let ratio = strategy.q_keep as f64 / grid_tokens(cfg.image_side, strategy.q_patch) as f64;
                ((ratio * n as f64).floor() as usize).clamp(1, n.max(1))
            } else {
                n
            };
            kept + 1
        } else {
            0
        };
        self.sample_cost(algorithm, l_q, l_k, k_small, l_small)
    }
}

/// Training budget in sample-cost units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: f64,
    pub spent: f64,
    /// Units spent per named phase.
    pub phases: BTreeMap<String, f64>,
}

/// Relative slack absorbing floating-point accumulation error.
const SLACK: f64 = 1e-9;

impl BudgetLedger {
    pub fn new(total: f64) -> Result<Self> {
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid(format!("budget must be positive and finite, got {total}")));
        }
        Ok(Self { total, spent: 0.0, phases: BTreeMap::new() })
    }

    pub fn remaining(&self) -> f64 {
        (self.total - self.spent).max(0.0)
    }

    /// Fraction of the budget spent, in `[0, 1]`.
    pub fn progress(&self) -> f64 {
        (self.spent / self.total).clamp(0.0, 1.0)
    }

    pub fn can_afford(&self, cost: f64) -> bool {
        self.spent + cost <= self.total * (1.0 + SLACK)
    }

    pub fn is_exhausted(&self) -> bool {
        self.spent >= self.total * (1.0 - SLACK)
    }

    /// Charges the summed per-sample costs of one batch to `phase`.
    ///
    /// A charge that would exceed the total budget is rejected and leaves the
    /// ledger untouched.
    pub fn charge(&mut self, phase: &str, costs: &[f64]) -> Result<f64> {
        if let Some(c) = costs.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::invalid(format!("invalid sample cost {c}")));
        }
        let batch: f64 = costs.iter().sum();
        if !self.can_afford(batch) {
            return Err(Error::Overdraw { spent: self.spent, charge: batch, total: self.total });
        }
        if costs.is_empty() {
            return Ok(0.0);
        }
        self.spent += batch;
        *self.phases.entry(phase.to_string()).or_insert(0.0) += batch;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_four() {
        assert_eq!(sample_cost(Algorithm::Moco, 197, 197, 0, 0).unwrap(), 4.0);
        assert_eq!(sample_cost(Algorithm::Simclr, 197, 197, 0, 0).unwrap(), 6.0);
        assert_eq!(sample_cost(Algorithm::Dino, 197, 197, 0, 0).unwrap(), 4.0);
        assert!(sample_cost(Algorithm::Moco, 0, 197, 0, 0).is_err());
        assert!(sample_cost(Algorithm::Dino, 197, 197, 2, 0).is_err());
    }

    #[test]
    fn desk_identity_is_four() {
        let cfg = ViTConfig::default();
        let m = CostModel::for_config(&cfg);
        assert_eq!(m.l_base, 65);
        let c = m.strategy_cost(Algorithm::Moco, &CompressionStrategy::identity(&cfg), &cfg, 0, 0).unwrap();
        assert_eq!(c, 4.0);
        // two 32px small crops: 16 tokens + class each
        let c = m.strategy_cost(Algorithm::Dino, &CompressionStrategy::identity(&cfg), &cfg, 2, 32).unwrap();
        assert!((c - (4.0 * 65.0 + 6.0 * 17.0) / 65.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_accounting() {
        let mut l = BudgetLedger::new(100.0).unwrap();
        assert_eq!(l.charge("train", &[4.0; 10]).unwrap(), 40.0);
        assert_eq!(l.spent, 40.0);
        l.charge("train", &[]).unwrap();
        assert_eq!(l.spent, 40.0);
        assert!(matches!(l.charge("train", &[4.0; 16]), Err(Error::Overdraw { .. })));
        assert_eq!(l.spent, 40.0);
        l.charge("train", &[4.0; 15]).unwrap();
        assert!(l.is_exhausted());
        assert_eq!(l.phases["train"], 100.0);
    }
}
