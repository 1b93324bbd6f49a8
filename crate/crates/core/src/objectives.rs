//! Augmentation-invariance objectives and per-algorithm step assembly.
//!
//! A training step is differentiated in two stages. Every view is encoded in
//! its own graph; the batch loss is a small graph over the stacked
//! representations; the loss cotangent of each representation row is then
//! pushed back through that view's encoder graph. The sum of those
//! contributions is the batch gradient, and `B` times the contribution of
//! sample `i` is its per-sample gradient `g_i`, so `mean_i g_i` equals the
//! batch gradient exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{Algorithm, CompressedPair, CompressedView};
use crate::error::{Error, Result};
use crate::numerics::{Bindings, Graph, Real, Tensor, Values, Var};
use crate::vit::{bind_params, Encoder, ViTParams, Weights};

/// Temperatures and distillation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Student temperature.
    pub tau_s: f64,
    /// Teacher temperature.
    pub tau_t: f64,
    /// Teacher centering; an addition to the plain distillation loss that
    /// prevents collapse at small scale.
    pub centering: bool,
    /// EMA rate of the teacher center.
    pub center_momentum: f64,
    /// Extra small crops per sample for distillation.
    pub small_crops: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.2, tau_s: 0.1, tau_t: 0.04, centering: true, center_momentum: 0.9, small_crops: 2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_s > 0.0 && self.tau_t > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::Config("center_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// InfoNCE with in-batch negatives over `B x n` representations:
/// `−mean_i log softmax_j(cos(z_q[i], z_k[j]) / τ)[i]`.
pub fn info_nce<F: Real>(g: &mut Graph<F>, z_q: Var, z_k: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let b = g.shape(z_q).first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::invalid("InfoNCE needs a batch of at least two (one negative)"));
    }
    let s = g.cosine_similarity(z_q, z_k)?;
    if g.shape(s) != [b, b] {
        return Err(Error::shape("info_nce", format!("z_q {:?} vs z_k {:?}", g.shape(z_q), g.shape(z_k))));
    }
    let s = g.scale(s, 1.0 / tau);
    let ls = g.log_softmax(s);
    let pos = g.pick_per_row(ls, (0..b).collect())?;
    let m = g.mean(pos);
    Ok(g.neg(m))
}

/// Cross-entropy between the detached teacher distribution
/// `softmax((z_k − center)/τ_t)` and the student `softmax(z_q/τ_s)`,
/// averaged over the batch.
pub fn distillation_loss<F: Real>(g: &mut Graph<F>, z_q: Var, z_k: Var, tau_s: f64, tau_t: f64, center: Option<&Tensor<F>>) -> Result<Var> {
    if tau_s <= 0.0 || tau_t <= 0.0 {
        return Err(Error::invalid("temperatures must be positive"));
    }
    if g.shape(z_q) != g.shape(z_k) || g.shape(z_q).len() != 2 {
        return Err(Error::shape("distillation_loss", format!("{:?} vs {:?}", g.shape(z_q), g.shape(z_k))));
    }
    let b = g.shape(z_q)[0];
    let mut t = g.detach(z_k);
    if let Some(c) = center {
        let neg = g.constant(c.map(|v| -v));
        t = g.add_row(t, neg)?;
    }
    let t = g.scale(t, 1.0 / tau_t);
    let p_k = g.softmax(t);
    let s = g.scale(z_q, 1.0 / tau_s);
    let log_p_q = g.log_softmax(s);
    let prod = g.mul(p_k, log_p_q)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// `center ← m·center + (1 − m)·batch_mean`.
pub fn update_center<F: Real>(center: &mut Tensor<F>, batch_mean: &Tensor<F>, momentum: f64) -> Result<()> {
    if center.shape() != batch_mean.shape() {
        return Err(Error::shape("update_center", format!("{:?} vs {:?}", center.shape(), batch_mean.shape())));
    }
    let (m, r) = (F::from_f64(momentum), F::from_f64(1.0 - momentum));
    for (c, &b) in center.data_mut().iter_mut().zip(batch_mean.data()) {
        *c = m * *c + r * b;
    }
    Ok(())
}

/// Parameters taking part in one step.
pub struct StepParams<'p, F: Real> {
    /// Online encoder (with prediction head for MoCo).
    pub query: &'p ViTParams<F>,
    /// Momentum encoder; required for MoCo and DINO, ignored by SimCLR.
    pub key: Option<&'p ViTParams<F>>,
    /// Teacher center for distillation.
    pub center: Option<&'p Tensor<F>>,
}

/// Result of one assembled step.
#[derive(Clone, Debug)]
pub struct StepOutput<F: Real> {
    pub loss: f64,
    /// Gradient of the batch loss with respect to the query parameters.
    pub grad: ViTParams<F>,
    /// Per-sample gradients `g_i`, when requested.
    pub per_sample: Option<Vec<ViTParams<F>>>,
    /// Batch mean of teacher outputs (distillation only).
    pub teacher_mean: Option<Tensor<F>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Query,
    Key,
    Small(usize),
}

struct ViewGraph<'p, F: Real> {
    sample: usize,
    role: Role,
    graph: Graph<F>,
    bindings: Bindings<'p, F>,
    weights: Weights<Var>,
    out: Var,
}

fn build<'p, F: Real>(encoder: &Encoder<F>, params: &'p ViTParams<F>, view: &CompressedView, sample: usize, role: Role) -> Result<ViewGraph<'p, F>> {
    let mut graph = Graph::new();
    let mut bindings = Bindings::new();
    let weights = bind_params(&mut graph, &mut bindings, params);
    let out = encoder.encode_graph(&mut graph, &weights, view)?.representation();
    Ok(ViewGraph { sample, role, graph, bindings, weights, out })
}

fn stack<F: Real>(rows: &[Tensor<F>]) -> Result<Tensor<F>> {
    let n = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * n);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new([rows.len(), n], data)
}

/// Forward-only representations of `views` under `params`.
fn encode_frozen<F: Real>(encoder: &Encoder<F>, params: &ViTParams<F>, views: &[&CompressedView]) -> Result<Vec<Tensor<F>>> {
    views
        .par_iter()
        .map(|v| {
            let o = encoder.encode(params, v)?;
            Ok(o.prediction.unwrap_or(o.projection))
        })
        .collect()
}

/// Loss and gradients of one batch of compressed pairs.
///
/// * MoCo: online encoder with prediction head on the query view against the
///   momentum encoder on the key view, InfoNCE in one direction.
/// * SimCLR: shared encoder on both views, InfoNCE averaged over both
///   directions, gradients through both views.
/// * DINO: momentum teacher on the key view; the student sees the query view
///   and every small crop; the distillation loss is averaged over student views.
pub fn assemble_step<F: Real>(
    encoder: &Encoder<F>,
    algorithm: Algorithm,
    loss_cfg: &LossConfig,
    params: &StepParams<'_, F>,
    batch: &[CompressedPair],
    per_sample: bool,
) -> Result<StepOutput<F>> {
    loss_cfg.validate()?;
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let n_small = batch[0].small.len();
    if batch.iter().any(|p| p.small.len() != n_small) {
        return Err(Error::invalid("samples carry different numbers of small crops"));
    }
    if n_small > 0 && algorithm != Algorithm::Dino {
        return Err(Error::invalid(format!("{algorithm} does not use small crops")));
    }
    let key_params = match algorithm {
        Algorithm::Simclr => None,
        _ => Some(params.key.ok_or_else(|| Error::invalid(format!("{algorithm} needs a momentum key encoder")))?),
    };

    // Stage 1: per-view encoder graphs for every trainable view.
    let mut specs: Vec<(usize, Role, &CompressedView)> = Vec::new();
    for (i, p) in batch.iter().enumerate() {
        specs.push((i, Role::Query, &p.query));
        if key_params.is_none() {
            specs.push((i, Role::Key, &p.key));
        }
        for (j, s) in p.small.iter().enumerate() {
            specs.push((i, Role::Small(j), s));
        }
    }
    let graphs: Vec<ViewGraph<'_, F>> = specs
        .par_iter()
        .map(|&(i, role, v)| build(encoder, params.query, v, i, role))
        .collect::<Result<_>>()?;
    let values: Vec<Values<'_, F>> = graphs.par_iter().map(|vg| vg.graph.forward(&vg.bindings)).collect::<Result<_>>()?;
    let rep = |role: Role| -> Result<Tensor<F>> {
        let rows: Vec<Tensor<F>> =
            graphs.iter().zip(&values).filter(|(vg, _)| vg.role == role).map(|(vg, v)| v.get(vg.out).clone()).collect();
        stack(&rows)
    };
    let z_q = rep(Role::Query)?;
    let z_k = match key_params {
        None => rep(Role::Key)?,
        Some(kp) => stack(&encode_frozen(encoder, kp, &batch.iter().map(|p| &p.key).collect::<Vec<_>>())?)?,
    };
    let z_s: Vec<Tensor<F>> = (0..n_small).map(|j| rep(Role::Small(j))).collect::<Result<_>>()?;

    // Stage 2: batch loss over stacked representations.
    let mut lg = Graph::new();
    let mut lb = Bindings::new();
    let vq = lg.leaf(z_q.shape().to_vec());
    let vk = lg.leaf(z_k.shape().to_vec());
    lb.bind(vq, &z_q).bind(vk, &z_k);
    let vs: Vec<Var> = z_s
        .iter()
        .map(|t| {
            let v = lg.leaf(t.shape().to_vec());
            lb.bind(v, t);
            v
        })
        .collect();
    let loss = match algorithm {
        Algorithm::Moco => info_nce(&mut lg, vq, vk, loss_cfg.tau)?,
        Algorithm::Simclr => {
            let a = info_nce(&mut lg, vq, vk, loss_cfg.tau)?;
            let c = info_nce(&mut lg, vk, vq, loss_cfg.tau)?;
            let s = lg.add(a, c)?;
            lg.scale(s, 0.5)
        }
        Algorithm::Dino => {
            let center = if loss_cfg.centering { params.center } else { None };
            let mut terms = vec![distillation_loss(&mut lg, vq, vk, loss_cfg.tau_s, loss_cfg.tau_t, center)?];
            for &v in &vs {
                terms.push(distillation_loss(&mut lg, v, vk, loss_cfg.tau_s, loss_cfg.tau_t, center)?);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = lg.add(acc, t)?;
            }
            lg.scale(acc, 1.0 / terms.len() as f64)
        }
    };
    let lvals = lg.forward(&lb)?;
    let loss_value = lvals.get(loss).item().as_f64();
    let mut wrt = vec![vq, vk];
    wrt.extend(&vs);
    let dz = lg.backward(&lvals, loss, Tensor::scalar(F::one()), &wrt)?;
    let cotangent = |role: Role| -> &Tensor<F> {
        match role {
            Role::Query => &dz[0],
            Role::Key => &dz[1],
            Role::Small(j) => &dz[2 + j],
        }
    };

    // Stage 3: push each representation row back through its view graph.
    let contributions: Vec<Vec<Tensor<F>>> = graphs
        .par_iter()
        .zip(values.par_iter())
        .map(|(vg, v)| {
            let seed = Tensor::new([1, cotangent(vg.role).cols()], cotangent(vg.role).row(vg.sample).to_vec())?;
            let wrt: Vec<Var> = vg.weights.slots().into_iter().copied().collect();
            vg.graph.backward(v, vg.out, seed, &wrt)
        })
        .collect::<Result<_>>()?;

    let zero = || params.query.map(|t| Tensor::zeros(t.shape().to_vec()));
    let mut samples: Vec<Vec<Tensor<F>>> = (0..b).map(|_| zero().slots().into_iter().cloned().collect()).collect();
    for (vg, c) in graphs.iter().zip(contributions) {
        for (acc, g) in samples[vg.sample].iter_mut().zip(&c) {
            acc.add_assign(g);
        }
    }
    let mut total: Vec<Tensor<F>> = zero().slots().into_iter().cloned().collect();
    for s in &samples {
        for (acc, g) in total.iter_mut().zip(s) {
            acc.add_assign(g);
        }
    }
    let grad = Weights::from_slots(params.query, total)?;
    let per_sample = if per_sample {
        let scale = F::from_f64(b as f64);
        Some(
            samples
                .into_iter()
                .map(|mut s| {
                    s.iter_mut().for_each(|t| t.scale(scale));
                    Weights::from_slots(params.query, s)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let teacher_mean = (algorithm == Algorithm::Dino).then(|| {
        let n = z_k.cols();
        let mut m = Tensor::zeros([n]);
        for r in 0..b {
            for (a, &v) in m.data_mut().iter_mut().zip(z_k.row(r)) {
                *a += v;
            }
        }
        m.scale(F::from_f64(1.0 / b as f64));
        m
    });
    Ok(StepOutput { loss: loss_value, grad, per_sample, teacher_mean })
}
