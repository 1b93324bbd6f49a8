//! Linear resize operators: bilinear patch resize `B`, its pseudo-inverse
//! projection `P = B (BᵀB)⁻¹` for patch-embedding weights, and positional
//! table interpolation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// 1-D bilinear interpolation weights from `src` to `dst` samples, `dst x src`.
///
/// Half-pixel centres with edge clamping: output sample `i` reads the source
/// coordinate `(i + 0.5) * src / dst - 0.5`.
pub fn bilinear_weights(src: usize, dst: usize) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; src]; dst];
    let scale = src as f64 / dst as f64;
    for (i, row) in w.iter_mut().enumerate() {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let frac = x - i0 as f64;
        row[i0] += 1.0 - frac;
        row[i1] += frac;
    }
    w
}

/// 2-D separable bilinear operator for one channel, `dst² x src²`.
fn bilinear_2d(src: usize, dst: usize) -> DMatrix<f64> {
    let w = bilinear_weights(src, dst);
    DMatrix::from_fn(dst * dst, src * src, |r, c| w[r / dst][c / src] * w[r % dst][c % src])
}

/// Exact linear operator of bilinearly resizing a channel-major flattened
/// `p x p x channels` patch to `q x q`; shape `(q²·ch) x (p²·ch)`,
/// block-diagonal over channels.
pub fn build_resize_matrix(p: usize, q: usize, channels: usize) -> Result<Tensor<f64>> {
    if p == 0 || q < p {
        return Err(Error::invalid(format!("resize requires q >= p >= 1, got p={p}, q={q}")));
    }
    Ok(block_diag(&bilinear_2d(p, q), channels))
}

fn block_diag(block: &DMatrix<f64>, copies: usize) -> Tensor<f64> {
    let (r, c) = block.shape();
    let cols = c * copies;
    let mut out = Tensor::zeros([r * copies, cols]);
    let data = out.data_mut();
    for k in 0..copies {
        for i in 0..r {
            for j in 0..c {
                data[(k * r + i) * cols + k * c + j] = block[(i, j)];
            }
        }
    }
    out
}

/// Bilinear resize `B` from base patch `p` to patch `q` and the projection
/// `P = B (BᵀB)⁻¹` that preserves `⟨x, w⟩ = ⟨Bx, Pw⟩`.
#[derive(Clone, Debug)]
pub struct ResizeProjection {
    pub source_patch: usize,
    pub target_patch: usize,
    pub channels: usize,
    pub resize: Tensor<f64>,
    pub projection: Tensor<f64>,
}

impl ResizeProjection {
    pub fn new(p: usize, q: usize, channels: usize) -> Result<Self> {
        if p == 0 || q < p {
            return Err(Error::invalid(format!("resize requires q >= p >= 1, got p={p}, q={q}")));
        }
        let b = bilinear_2d(p, q);
        let btb = b.transpose() * &b;
        let chol = btb.cholesky().ok_or(Error::RankDeficient { p, q })?;
        // Reject near-singular Gram matrices as well as outright failures.
        let diag_min = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if diag_min < 1e-8 {
            return Err(Error::RankDeficient { p, q });
        }
        let inv = chol.inverse();
        let proj = &b * inv;
        Ok(Self {
            source_patch: p,
            target_patch: q,
            channels,
            resize: block_diag(&b, channels),
            projection: block_diag(&proj, channels),
        })
    }
}

/// PI-resize of patch-embedding weights: `W_patch` is `(p²·ch) x d`; every
/// output dimension's weight vector `w_p` becomes `P w_p`, giving `(q²·ch) x d`.
pub fn pi_resize_weights<F: Real>(w_patch: &Tensor<F>, proj: &ResizeProjection) -> Result<Tensor<F>> {
    let in_dim = proj.source_patch * proj.source_patch * proj.channels;
    if w_patch.rank() != 2 || w_patch.shape()[0] != in_dim {
        return Err(Error::shape("pi_resize_weights", format!("weights {:?}, expected {in_dim} rows", w_patch.shape())));
    }
    if proj.source_patch == proj.target_patch {
        return Ok(w_patch.clone());
    }
    proj.projection.cast::<F>().matmul(w_patch)
}

/// Interpolation matrix mapping a `(1 + from²)`-row positional table to
/// `(1 + to²)` rows: class-token row copied, grid rows bilinear as a 2-D field.
pub fn pos_resize_matrix(from_grid: usize, to_grid: usize) -> Result<Tensor<f64>> {
    if from_grid == 0 || to_grid == 0 {
        return Err(Error::invalid("positional grids must be non-empty"));
    }
    let grid = bilinear_2d(from_grid, to_grid);
    let (r, c) = (to_grid * to_grid + 1, from_grid * from_grid + 1);
    let mut out = Tensor::zeros([r, c]);
    let data = out.data_mut();
    data[0] = 1.0;
    for i in 0..r - 1 {
        for j in 0..c - 1 {
            data[(i + 1) * c + j + 1] = grid[(i, j)];
        }
    }
    Ok(out)
}

/// Positional table for a `to_grid x to_grid` token grid.
pub fn adapt_pos_embed<F: Real>(pos: &Tensor<F>, from_grid: usize, to_grid: usize) -> Result<Tensor<F>> {
    if pos.rank() != 2 || pos.shape()[0] != from_grid * from_grid + 1 {
        return Err(Error::shape(
            "adapt_pos_embed",
            format!("table {:?} is not a class row plus a square {from_grid}x{from_grid} grid", pos.shape()),
        ));
    }
    if from_grid == to_grid {
        return Ok(pos.clone());
    }
    pos_resize_matrix(from_grid, to_grid)?.cast::<F>().matmul(pos)
}
