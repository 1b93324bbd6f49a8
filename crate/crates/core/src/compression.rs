//! Sequence compression: randomized token dropout and patch scaling.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{self, tag, Stream};
use crate::vit::{patchify, ViTConfig};

/// Self-supervised algorithm family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Query encoder with prediction head against a momentum key encoder.
    Moco,
    /// One shared encoder, gradients through both views.
    Simclr,
    /// Momentum teacher with softmax distillation and extra small crops.
    Dino,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Moco, Algorithm::Simclr, Algorithm::Dino];

    /// Whether the key encoder is a momentum copy (no key gradients).
    pub fn uses_momentum_encoder(self) -> bool {
        !matches!(self, Algorithm::Simclr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Moco => "moco",
            Algorithm::Simclr => "simclr",
            Algorithm::Dino => "dino",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "moco" => Ok(Algorithm::Moco),
            "simclr" => Ok(Algorithm::Simclr),
            "dino" => Ok(Algorithm::Dino),
            other => Err(Error::invalid(format!("unknown algorithm '{other}' (expected moco, simclr or dino)"))),
        }
    }
}

/// Patch sizes and kept grid-token counts for the query and key views.
///
/// Keep counts are absolute and refer to the grid at the view's own patch
/// size. Literal form: `q<patch>k<patch>:dq<keep>:dk<keep>`, where a keep may
/// be `full`; the whole literal `full` is the identity strategy. A trailing
/// `:small` enables compression of extra small crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressionStrategy {
    pub q_patch: usize,
    pub k_patch: usize,
    pub q_keep: usize,
    pub k_keep: usize,
    #[serde(default)]
    pub compress_small_crops: bool,
}

impl CompressionStrategy {
    pub fn identity(cfg: &ViTConfig) -> Self {
        let n = grid_tokens(cfg.image_side, cfg.base_patch);
        Self { q_patch: cfg.base_patch, k_patch: cfg.base_patch, q_keep: n, k_keep: n, compress_small_crops: false }
    }

    /// Strategy from patch sizes and dropout ratios.
    pub fn from_dropout(cfg: &ViTConfig, q_patch: usize, k_patch: usize, d_q: f64, d_k: f64) -> Result<Self> {
        let s = Self {
            q_patch,
            k_patch,
            q_keep: compressed_length(cfg.image_side, cfg.image_side, q_patch, d_q)?,
            k_keep: compressed_length(cfg.image_side, cfg.image_side, k_patch, d_k)?,
            compress_small_crops: false,
        };
        s.validate(cfg)?;
        Ok(s)
    }

    pub fn is_identity(&self, cfg: &ViTConfig) -> bool {
        *self == Self::identity(cfg)
    }

    /// Total query/key sequence lengths including the class token.
    pub fn seq_lens(&self) -> (usize, usize) {
        (self.q_keep + 1, self.k_keep + 1)
    }

    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        for (side, patch, keep) in [("query", self.q_patch, self.q_keep), ("key", self.k_patch, self.k_keep)] {
            if patch < cfg.base_patch {
                return Err(Error::invalid(format!("{side} patch {patch} below base patch {}", cfg.base_patch)));
            }
            if patch > cfg.image_side {
                return Err(Error::invalid(format!("{side} patch {patch} larger than image side {}", cfg.image_side)));
            }
            let n = grid_tokens(cfg.image_side, patch);
            if keep == 0 || keep > n {
                return Err(Error::invalid(format!("{side} keep {keep} outside [1, {n}] for patch {patch}")));
            }
        }
        Ok(())
    }

    /// Parses a strategy literal against the geometry in `cfg`.
    pub fn parse(literal: &str, cfg: &ViTConfig) -> Result<Self> {
        let bad = |why: &str| Error::invalid(format!("bad strategy literal '{literal}': {why}"));
        let s = literal.trim();
        if s.eq_ignore_ascii_case("full") || s.eq_ignore_ascii_case("identity") {
            return Ok(Self::identity(cfg));
        }
        let mut parts = s.split(':');
        let patches = parts.next().ok_or_else(|| bad("empty"))?;
        let rest = patches.strip_prefix('q').ok_or_else(|| bad("expected 'q<patch>k<patch>'"))?;
        let (qp, kp) = rest.split_once('k').ok_or_else(|| bad("expected 'q<patch>k<patch>'"))?;
        let q_patch: usize = qp.parse().map_err(|_| bad("query patch is not an integer"))?;
        let k_patch: usize = kp.parse().map_err(|_| bad("key patch is not an integer"))?;
        let keep = |part: Option<&str>, prefix: &str, patch: usize| -> Result<usize> {
            let part = part.ok_or_else(|| bad(&format!("missing '{prefix}<keep>'")))?;
            let v = part.strip_prefix(prefix).ok_or_else(|| bad(&format!("expected '{prefix}<keep>'")))?;
            if v == "full" {
                Ok(grid_tokens(cfg.image_side, patch))
            } else {
                v.parse().map_err(|_| bad(&format!("{prefix} keep is not an integer")))
            }
        };
        let q_keep = keep(parts.next(), "dq", q_patch)?;
        let k_keep = keep(parts.next(), "dk", k_patch)?;
        let compress_small_crops = match parts.next() {
            None => false,
            Some("small") => true,
            Some(_) => return Err(bad("unexpected trailing field")),
        };
        if parts.next().is_some() {
            return Err(bad("too many fields"));
        }
        let out = Self { q_patch, k_patch, q_keep, k_keep, compress_small_crops };
        out.validate(cfg)?;
        Ok(out)
    }
}

impl fmt::Display for CompressionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}k{}:dq{}:dk{}", self.q_patch, self.k_patch, self.q_keep, self.k_keep)?;
        if self.compress_small_crops {
            f.write_str(":small")?;
        }
        Ok(())
    }
}

/// Grid token count `⌊H/q⌋·⌊W/q⌋` for a square image.
pub fn grid_tokens(side: usize, patch: usize) -> usize {
    if patch == 0 {
        return 0;
    }
    (side / patch) * (side / patch)
}

/// Grid tokens left after tokenizing at patch `q` and dropping a fraction `d`:
/// `⌊(1 − d)·⌊H/q⌋·⌊W/q⌋⌋`. The class token is not counted.
pub fn compressed_length(h: usize, w: usize, q: usize, d: f64) -> Result<usize> {
    if q == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if !(0.0..1.0).contains(&d) {
        return Err(Error::invalid(format!("dropout ratio {d} outside [0, 1)")));
    }
    let n = (h / q) * (w / q);
    // Nudge by a few ulps so products like 0.1 * 10 floor to the intended integer.
    let l = ((1.0 - d) * n as f64 * (1.0 + 4.0 * f64::EPSILON)).floor() as usize;
    if l == 0 {
        return Err(Error::invalid(format!("dropout {d} at patch {q} leaves no tokens")));
    }
    Ok(l.min(n))
}

/// A tokenized view: kept patch vectors and their grid indices.
///
/// Positional rows are implied by the indices: grid token `i` uses row
/// `i + 1` of the (possibly interpolated) positional table, row 0 belongs to
/// the class token which every view carries implicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedView {
    /// `len x (patch²·channels)` flattened patch vectors.
    pub tokens: crate::numerics::Tensor<f32>,
    /// Grid indices of the kept tokens, strictly increasing.
    pub indices: Vec<usize>,
    /// Patch size the view was tokenized at.
    pub patch: usize,
    /// Side of the square token grid before dropout.
    pub grid: usize,
}

impl CompressedView {
    /// Kept grid tokens (class token excluded).
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Total sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.len() + 1
    }

    /// Positional-table rows used by the sequence, class row first.
    pub fn pos_rows(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.indices.iter().map(|i| i + 1)).collect()
    }
}

/// Tokenizes an image at `patch`, keeping every grid token.
pub fn full_view(image: &Image, patch: usize) -> Result<CompressedView> {
    if image.height() != image.width() {
        return Err(Error::invalid(format!("square images required, got {}x{}", image.height(), image.width())));
    }
    let tokens = patchify(image, patch)?;
    let grid = image.height() / patch;
    Ok(CompressedView { indices: (0..tokens.rows()).collect(), tokens, patch, grid })
}

/// Keeps a uniformly random subset of `keep` grid tokens, in original order.
pub fn token_dropout(view: &CompressedView, keep: usize, rng: &mut Stream) -> Result<CompressedView> {
    crate::probes::note_compression_call();
    let n = view.len();
    if keep == 0 || keep > n {
        return Err(Error::invalid(format!("keep count {keep} outside [1, {n}]")));
    }
    if keep == n {
        return Ok(view.clone());
    }
    let mut picked = index::sample(rng, n, keep).into_vec();
    picked.sort_unstable();
    let cols = view.tokens.cols();
    let mut data = Vec::with_capacity(keep * cols);
    for &i in &picked {
        data.extend_from_slice(view.tokens.row(i));
    }
    Ok(CompressedView {
        tokens: crate::numerics::Tensor::new([keep, cols], data)?,
        indices: picked.iter().map(|&i| view.indices[i]).collect(),
        patch: view.patch,
        grid: view.grid,
    })
}

/// Tokenizes at the coarser patch `q`.
///
/// The encoder embeds such a view with PI-resized patch weights and a
/// positional table interpolated to the coarser grid.
pub fn patch_scale_view(image: &Image, q: usize, base_patch: usize) -> Result<CompressedView> {
    crate::probes::note_compression_call();
    if q < base_patch {
        return Err(Error::invalid(format!("patch {q} below base patch {base_patch}; only upscaling is supported")));
    }
    full_view(image, q)
}

/// Compressed inputs for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedPair {
    pub query: CompressedView,
    pub key: CompressedView,
    /// Extra student crops (distillation only).
    pub small: Vec<CompressedView>,
}

/// Applies `strategy` to one sample's views: patch scaling first, then token
/// dropout on the resulting grid.
///
/// `seed` keys the per-view dropout streams; callers derive it from
/// `(global seed, epoch, sample index)` so masks are fresh every step.
/// Key-side dropout under a momentum-encoder algorithm is applied as requested
/// but logged, since the default grids keep the key uncompressed there.
pub fn apply_strategy(
    x_q: &Image,
    x_k: &Image,
    small: &[Image],
    strategy: &CompressionStrategy,
    algorithm: Algorithm,
    cfg: &ViTConfig,
    seed: u64,
) -> Result<CompressedPair> {
    strategy.validate(cfg)?;
    if algorithm.uses_momentum_encoder() && strategy.k_keep < grid_tokens(cfg.image_side, strategy.k_patch) {
        log::warn!("{algorithm}: key-view dropout requested ({strategy}); the momentum key is normally left uncompressed");
    }
    if !small.is_empty() && algorithm != Algorithm::Dino {
        return Err(Error::invalid(format!("{algorithm} does not use small crops")));
    }
    let query = patch_scale_view(x_q, strategy.q_patch, cfg.base_patch)?;
    let query = token_dropout(&query, strategy.q_keep, &mut rng::stream(&[seed, tag::DROP_Q]))?;
    let key = patch_scale_view(x_k, strategy.k_patch, cfg.base_patch)?;
    let key = token_dropout(&key, strategy.k_keep, &mut rng::stream(&[seed, tag::DROP_K]))?;
    let q_ratio = strategy.q_keep as f64 / grid_tokens(cfg.image_side, strategy.q_patch) as f64;
    let small = small
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let v = full_view(img, cfg.base_patch)?;
            if !strategy.compress_small_crops {
                return Ok(v);
            }
            let keep = ((q_ratio * v.len() as f64).floor() as usize).clamp(1, v.len());
            token_dropout(&v, keep, &mut rng::stream(&[seed, tag::DROP_SMALL, i as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedPair { query, key, small })
}

/// Default dropout ratios of the sweep grid.
pub const DEFAULT_DROPOUTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.9];

/// Cross product of patch sizes and dropout ratios under the per-algorithm
/// rules: symmetric patch scaling, query-only dropout for momentum-encoder
/// algorithms and dropout on both views for the shared encoder.
///
/// Combinations that leave no tokens are skipped; duplicates are removed.
pub fn strategy_grid(algorithm: Algorithm, cfg: &ViTConfig, patches: &[usize], dropouts: &[f64]) -> Result<Vec<CompressionStrategy>> {
    let mut out: Vec<CompressionStrategy> = Vec::new();
    for &d in dropouts {
        for &p in patches {
            let d_k = if algorithm.uses_momentum_encoder() { 0.0 } else { d };
            let s = match CompressionStrategy::from_dropout(cfg, p, p, d, d_k) {
                Ok(s) => s,
                Err(e) => {
                    log::debug!("skipping grid cell p={p} d={d}: {e}");
                    continue;
                }
            };
            if !out.contains(&s) {
                out.push(s);
            }
        }
    }
    let id = CompressionStrategy::identity(cfg);
    if !out.contains(&id) {
        out.insert(0, id);
    }
    Ok(out)
}

/// Patch sizes `p, 1.5p, 2p` used by the desk-scale grids.
pub fn desk_patches(cfg: &ViTConfig) -> Vec<usize> {
    let p = cfg.base_patch;
    let mut v = vec![p, p + p / 2, 2 * p];
    v.retain(|&q| q <= cfg.image_side);
    v.dedup();
    v
}
