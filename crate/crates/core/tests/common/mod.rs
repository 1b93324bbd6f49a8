#![allow(dead_code)]

pub mod cost_tables;

use rand::Rng;
use seqcomp::compression::{CompressedPair, CompressedView};
use seqcomp::data::Image;
use seqcomp::numerics::{Bindings, Graph, Tensor, Var};
use seqcomp::objectives::{distillation_loss, info_nce, LossConfig, StepParams};
use seqcomp::rng;
use seqcomp::vit::{bind_params, Encoder};
use seqcomp::{Algorithm, ViTConfig, ViTParams};

/// Depth-2, width-16 encoder over a 3x3 grid of 4-pixel patches.
pub fn tiny_config() -> ViTConfig {
    ViTConfig { image_side: 12, base_patch: 4, channels: 3, embed_dim: 16, depth: 2, heads: 2, mlp_ratio: 2, head_hidden: 16, rep_dim: 8 }
}

pub fn random_image(side: usize, channels: usize, seed: u64) -> Image {
    let mut r = rng::stream(&[seed, 0x696d_6167]);
    let data = (0..side * side * channels).map(|_| r.random::<f32>()).collect();
    Image::new(side, side, channels, data).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = rng::stream(&[seed, 0x7465_6e73]);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-scale..scale))
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(&[seed, 0x7665_6374]);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Source weights of half-pixel-centred bilinear sampling with edge clamping,
/// evaluated straight from the definition.
pub fn bilinear_sample(src: &[f64], side: usize, out_side: usize, oy: usize, ox: usize) -> f64 {
    let coord = |o: usize| ((o as f64 + 0.5) * side as f64 / out_side as f64 - 0.5).clamp(0.0, (side - 1) as f64);
    let (y, x) = (coord(oy), coord(ox));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(side - 1), (x0 + 1).min(side - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| src[yy * side + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// The batch loss built as one graph over every view, with its gradient
/// taken by a single backward pass. Independent of the per-view assembly
/// used in training.
pub struct WholeBatch<'a> {
    pub graph: Graph<f64>,
    pub bindings: Bindings<'a, f64>,
    pub root: Var,
    pub leaves: Vec<Var>,
}

pub fn whole_batch<'a>(
    enc: &Encoder<f64>,
    alg: Algorithm,
    loss: &LossConfig,
    params: &StepParams<'a, f64>,
    batch: &[CompressedPair],
) -> WholeBatch<'a> {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let w = bind_params(&mut g, &mut b, params.query);
    let online = |g: &mut Graph<f64>, views: Vec<&CompressedView>| {
        let rows: Vec<Var> = views.iter().map(|v| enc.encode_graph(g, &w, v).unwrap().representation()).collect();
        g.concat_rows(&rows).unwrap()
    };
    let zq = online(&mut g, batch.iter().map(|p| &p.query).collect());
    let frozen = |key: &ViTParams<f64>| -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = batch.iter().map(|p| { let o = enc.encode(key, &p.key).unwrap(); o.prediction.unwrap_or(o.projection).data().to_vec() }).collect();
        Tensor::new([rows.len(), rows[0].len()], rows.concat()).unwrap()
    };
    let root = match alg {
        Algorithm::Moco => {
            let zk = g.constant(frozen(params.key.unwrap()));
            info_nce(&mut g, zq, zk, loss.tau).unwrap()
        }
        Algorithm::Simclr => {
            let zk = online(&mut g, batch.iter().map(|p| &p.key).collect());
            let a = info_nce(&mut g, zq, zk, loss.tau).unwrap();
            let c = info_nce(&mut g, zk, zq, loss.tau).unwrap();
            let s = g.add(a, c).unwrap();
            g.scale(s, 0.5)
        }
        Algorithm::Dino => {
            let zk = g.constant(frozen(params.key.unwrap()));
            let center = if loss.centering { params.center } else { None };
            let mut acc = distillation_loss(&mut g, zq, zk, loss.tau_s, loss.tau_t, center).unwrap();
            let n_small = batch[0].small.len();
            for j in 0..n_small {
                let zs = online(&mut g, batch.iter().map(|p| &p.small[j]).collect());
                let t = distillation_loss(&mut g, zs, zk, loss.tau_s, loss.tau_t, center).unwrap();
                acc = g.add(acc, t).unwrap();
            }
            g.scale(acc, 1.0 / (1 + n_small) as f64)
        }
    };
    let leaves = w.slots().into_iter().copied().collect();
    WholeBatch { graph: g, bindings: b, root, leaves }
}

impl WholeBatch<'_> {
    pub fn gradient(&self) -> Vec<f64> {
        self.graph.gradient(&self.bindings, self.root, &self.leaves).unwrap().iter().flat_map(|t| t.data().to_vec()).collect()
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

use seqcomp::experiment::RunConfig;

/// Short MoCo run on small synthetic images; `eval` toggles probes at checkpoints.
pub fn small_run(dir: &std::path::Path, budget: f64, eval: bool) -> RunConfig {
    let mut cfg = RunConfig { budget, batch_size: 8, output_dir: dir.to_path_buf(), ..RunConfig::default() };
    cfg.model = ViTConfig { image_side: 32, base_patch: 8, channels: 3, embed_dim: 16, depth: 1, heads: 2, mlp_ratio: 2, head_hidden: 16, rep_dim: 8 };
    cfg.data.synthetic.side = 32;
    cfg.data.synthetic.n_classes = 3;
    cfg.data.synthetic.n_per_class = 16;
    cfg.eval.at_checkpoints = eval;
    cfg
}
