//! Shared fixtures for the benchmarks.

use seqcomp::data::{generate_synthetic, Dataset, SyntheticSpec};
use seqcomp::ViTConfig;

/// Desk-scale model at reduced width, as used by the acceptance suite.
pub fn small_config() -> ViTConfig {
    ViTConfig { image_side: 32, base_patch: 4, embed_dim: 32, depth: 2, heads: 2, mlp_ratio: 2, head_hidden: 64, rep_dim: 32, ..ViTConfig::default() }
}

pub fn small_dataset(n_per_class: usize) -> Dataset {
    generate_synthetic(7, &SyntheticSpec { n_per_class, side: 32, ..SyntheticSpec::default() }).expect("valid synthetic spec")
}
