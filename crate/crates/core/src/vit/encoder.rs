use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::config::ViTConfig;
use super::params::{Block, Head, ViTParams, Weights};
use super::resize::{pos_resize_matrix, ResizeProjection};
use crate::compression::CompressedView;
use crate::error::{Error, Result};
use crate::numerics::{Bindings, Graph, Real, Tensor, Var, LAYER_NORM_EPS};

/// Graph variables produced by encoding one view.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// Class-token backbone output after the final norm, `1 x d`.
    pub feature: Var,
    /// Projection-head output, `1 x rep_dim`.
    pub projection: Var,
    /// Prediction-head output when the weights carry a predictor.
    pub prediction: Option<Var>,
}

impl EncodedVars {
    /// Representation `z` used by the objectives: the prediction when
    /// present, the projection otherwise.
    pub fn representation(&self) -> Var {
        self.prediction.unwrap_or(self.projection)
    }
}

/// Forward-only encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<F: Real> {
    pub feature: Tensor<F>,
    pub projection: Tensor<F>,
    pub prediction: Option<Tensor<F>>,
}

/// Adds one leaf per parameter tensor and binds it.
pub fn bind_params<'a, F: Real>(graph: &mut Graph<F>, bindings: &mut Bindings<'a, F>, params: &'a ViTParams<F>) -> Weights<Var> {
    let vars = params.map(|t| graph.leaf(t.shape().to_vec()));
    for (v, t) in vars.slots().into_iter().zip(params.slots()) {
        bindings.bind(*v, t);
    }
    vars
}

/// ViT encoder builder with cached resize operators.
pub struct Encoder<F: Real> {
    config: ViTConfig,
    projections: Mutex<HashMap<usize, Arc<Tensor<F>>>>,
    pos_tables: Mutex<HashMap<usize, Arc<Tensor<F>>>>,
}

impl<F: Real> Encoder<F> {
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, projections: Mutex::default(), pos_tables: Mutex::default() })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    fn projection(&self, patch: usize) -> Result<Arc<Tensor<F>>> {
        let mut cache = self.projections.lock().expect("projection cache poisoned");
        if let Some(p) = cache.get(&patch) {
            return Ok(p.clone());
        }
        let proj = ResizeProjection::new(self.config.base_patch, patch, self.config.channels)?;
        let p = Arc::new(proj.projection.cast::<F>());
        cache.insert(patch, p.clone());
        Ok(p)
    }

    fn pos_table(&self, grid: usize) -> Result<Arc<Tensor<F>>> {
        let mut cache = self.pos_tables.lock().expect("pos cache poisoned");
        if let Some(p) = cache.get(&grid) {
            return Ok(p.clone());
        }
        let m = Arc::new(pos_resize_matrix(self.config.base_grid(), grid)?.cast::<F>());
        cache.insert(grid, m.clone());
        Ok(m)
    }

    /// Builds the encoder graph for `view` on top of bound weights `w`.
    pub fn encode_graph(&self, g: &mut Graph<F>, w: &Weights<Var>, view: &CompressedView) -> Result<EncodedVars> {
        let cfg = &self.config;
        let n = view.len();
        if n == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if view.patch < cfg.base_patch {
            return Err(Error::invalid(format!("patch {} below base patch {}", view.patch, cfg.base_patch)));
        }
        if view.tokens.cols() != cfg.patch_dim(view.patch) {
            return Err(Error::shape("encode", format!("token width {} for patch {}", view.tokens.cols(), view.patch)));
        }
        let d = cfg.embed_dim;

        // Patch embedding with PI-resized weights: x·(P w) evaluated as (x P)·w.
        let tokens = view.tokens.cast::<F>();
        let tokens = if view.patch == cfg.base_patch { tokens } else { tokens.matmul(&*self.projection(view.patch)?)? };
        let tok = g.constant(tokens);
        let emb = g.matmul(tok, w.patch.w)?;
        let emb = g.add_row(emb, w.patch.b)?;

        // Positional rows: class slot followed by the kept grid positions.
        let rows: Vec<usize> = std::iter::once(0).chain(view.indices.iter().map(|i| i + 1)).collect();
        let pos = if view.grid == cfg.base_grid() {
            g.gather_rows(w.pos, rows)?
        } else {
            let table = self.pos_table(view.grid)?;
            let cols = table.cols();
            let mut sel = Vec::with_capacity(rows.len() * cols);
            for &r in &rows {
                sel.extend_from_slice(table.row(r));
            }
            let sel = g.constant(Tensor::new([rows.len(), cols], sel)?);
            g.matmul(sel, w.pos)?
        };

        let x = g.concat_rows(&[w.cls, emb])?;
        let mut x = g.add(x, pos)?;
        for block in &w.blocks {
            x = self.block(g, x, block)?;
        }
        let x = g.layer_norm_affine(x, w.norm_g, w.norm_b, LAYER_NORM_EPS)?;
        let feature = g.gather_rows(x, vec![0])?;
        debug_assert_eq!(g.shape(feature), &[1, d]);
        let projection = head(g, feature, &w.projector)?;
        let prediction = match &w.predictor {
            Some(p) => Some(head(g, projection, p)?),
            None => None,
        };
        Ok(EncodedVars { feature, projection, prediction })
    }

    fn block(&self, g: &mut Graph<F>, x: Var, b: &Block<Var>) -> Result<Var> {
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let h = g.layer_norm_affine(x, b.ln1_g, b.ln1_b, LAYER_NORM_EPS)?;
        let qkv = g.matmul(h, b.qkv.w)?;
        let qkv = g.add_row(qkv, b.qkv.b)?;
        let mut outs = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let q = g.slice_cols(qkv, i * dh, dh)?;
            let k = g.slice_cols(qkv, d + i * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + i * dh, dh)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(s);
            outs.push(g.matmul(a, v)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let o = g.matmul(o, b.attn_out.w)?;
        let o = g.add_row(o, b.attn_out.b)?;
        let x = g.add(x, o)?;
        let h = g.layer_norm_affine(x, b.ln2_g, b.ln2_b, LAYER_NORM_EPS)?;
        let m = g.matmul(h, b.fc1.w)?;
        let m = g.add_row(m, b.fc1.b)?;
        let m = g.gelu(m);
        let m = g.matmul(m, b.fc2.w)?;
        let m = g.add_row(m, b.fc2.b)?;
        g.add(x, m)
    }

    /// Forward pass of one view.
    pub fn encode(&self, params: &ViTParams<F>, view: &CompressedView) -> Result<EncoderOutput<F>> {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let w = bind_params(&mut g, &mut b, params);
        let out = self.encode_graph(&mut g, &w, view)?;
        let values = g.forward(&b)?;
        let flat = |v: Var| values.get(v).clone().reshape([g.shape(v)[1]]);
        Ok(EncoderOutput {
            feature: flat(out.feature)?,
            projection: flat(out.projection)?,
            prediction: out.prediction.map(flat).transpose()?,
        })
    }
}

fn head<F: Real>(g: &mut Graph<F>, x: Var, h: &Head<Var>) -> Result<Var> {
    let y = g.matmul(x, h.fc1.w)?;
    let y = g.add_row(y, h.fc1.b)?;
    let y = g.gelu(y);
    let y = g.matmul(y, h.fc2.w)?;
    g.add_row(y, h.fc2.b)
}

/// Momentum update `θ_k ← m·θ_k + (1 − m)·θ_q` over the key encoder's slots.
///
/// The query side may carry extra trailing slots (its prediction head).
pub fn ema_update<F: Real>(key: &mut ViTParams<F>, query: &ViTParams<F>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum {momentum} outside [0, 1]")));
    }
    let q_named = query.named();
    let k_names: Vec<String> = key.named().into_iter().map(|(n, _)| n).collect();
    if k_names.len() > q_named.len() {
        return Err(Error::invalid("key encoder has more parameters than the query encoder"));
    }
    let m = F::from_f64(momentum);
    let one_minus = F::from_f64(1.0 - momentum);
    for ((kt, name), (qname, qt)) in key.slots_mut().into_iter().zip(&k_names).zip(q_named) {
        if *name != qname || kt.shape() != qt.shape() {
            return Err(Error::shape("ema_update", format!("{name} {:?} vs {qname} {:?}", kt.shape(), qt.shape())));
        }
        for (k, &q) in kt.data_mut().iter_mut().zip(qt.data()) {
            *k = m * *k + one_minus * q;
        }
    }
    Ok(())
}
