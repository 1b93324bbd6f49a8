use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the encoder and its heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Square image side in pixels.
    pub image_side: usize,
    /// Base patch size `p` the embedding weights are defined for.
    pub base_patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the transformer MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Hidden width of the projection and prediction heads.
    pub head_hidden: usize,
    /// Output representation dimension `n`.
    pub rep_dim: usize,
}

impl Default for ViTConfig {
    /// Desk-scale recipe: 64x64 images, 8x8 patches (8x8 grid), 4 blocks of width 128.
    fn default() -> Self {
        Self {
            image_side: 64,
            base_patch: 8,
            channels: 3,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 256,
            rep_dim: 64,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_patch == 0 || self.image_side == 0 || self.channels == 0 {
            return fail("image_side, base_patch and channels must be positive".into());
        }
        if !self.image_side.is_multiple_of(self.base_patch) {
            return fail(format!("image_side {} not divisible by base_patch {}", self.image_side, self.base_patch));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.rep_dim == 0 || self.head_hidden == 0 || self.mlp_ratio == 0 {
            return fail("head and MLP widths must be positive".into());
        }
        Ok(())
    }

    /// Grid side at the base patch size.
    pub fn base_grid(&self) -> usize {
        self.image_side / self.base_patch
    }

    /// Grid side when tokenizing at `patch` (remainder cropped).
    pub fn grid_for(&self, patch: usize) -> usize {
        self.image_side / patch
    }

    /// Uncompressed sequence length including the class token.
    pub fn base_seq_len(&self) -> usize {
        self.base_grid() * self.base_grid() + 1
    }

    pub fn patch_dim(&self, patch: usize) -> usize {
        patch * patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}
