mod common;

use common::*;
use proptest::prelude::*;
use seqcomp::compression::{apply_strategy, CompressedPair};
use seqcomp::numerics::{finite_difference_gradient, max_relative_error, Bindings, Graph, Tensor, Var};
use seqcomp::objectives::{assemble_step, distillation_loss, info_nce, LossConfig, StepParams};
use seqcomp::vit::Encoder;
use seqcomp::{Algorithm, CompressionStrategy, ViTParams};

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// InfoNCE straight from its definition.
fn info_nce_oracle(zq: &[Vec<f64>], zk: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (norm(a) * norm(b));
    let b = zq.len();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|j| cos(&zq[i], &zk[j]) / tau).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / b as f64
}

fn softmax(v: &[f64], t: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Batch-mean cross-entropy of the student against the centred teacher.
fn distill_oracle(zq: &[Vec<f64>], zk: &[Vec<f64>], ts: f64, tt: f64, center: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for (q, k) in zq.iter().zip(zk) {
        let k: Vec<f64> = k.iter().enumerate().map(|(i, v)| v - center.map_or(0.0, |c| c[i])).collect();
        let pk = softmax(&k, tt);
        let pq = softmax(q, ts);
        total -= pk.iter().zip(&pq).map(|(a, b)| a * b.ln()).sum::<f64>();
    }
    total / zq.len() as f64
}

fn loss_graph(kind: u8, b: usize, n: usize, center: Option<&Tensor<f64>>) -> (Graph<f64>, Var, Var, Var) {
    let mut g = Graph::new();
    let q = g.leaf([b, n]);
    let k = g.leaf([b, n]);
    let root = match kind {
        0 => info_nce(&mut g, q, k, 0.2).unwrap(),
        _ => distillation_loss(&mut g, q, k, 0.1, 0.04, center).unwrap(),
    };
    (g, q, k, root)
}

fn eval(g: &Graph<f64>, root: Var, leaves: &[(Var, &Tensor<f64>)]) -> f64 {
    let mut b = Bindings::new();
    for (v, t) in leaves {
        b.bind(*v, t);
    }
    g.evaluate(&b, root).unwrap().item()
}

/// Richardson-extrapolated central differences, fourth order in eps.
///
/// Sharp teacher temperatures make plain central differences at 1e-5 carry
/// truncation errors near the tolerance.
fn richardson(g: &Graph<f64>, b: &Bindings<'_, f64>, root: Var, leaf: Var) -> Tensor<f64> {
    let coarse = finite_difference_gradient(g, b, root, leaf, 2e-5, None).unwrap();
    let fine = finite_difference_gradient(g, b, root, leaf, 1e-5, None).unwrap();
    fine.zip_map(&coarse, |f, c| (4.0 * f - c) / 3.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn info_nce_matches_definition_and_is_scale_invariant(seed in any::<u64>(), b in 2usize..6, s in 0.1f64..10.0) {
        let (g, q, k, root) = loss_graph(0, b, 4, None);
        let zq = random_tensor(&[b, 4], seed, 1.0);
        let zk = random_tensor(&[b, 4], seed ^ 3, 1.0);
        let l = eval(&g, root, &[(q, &zq), (k, &zk)]);
        prop_assert!((l - info_nce_oracle(&rows(&zq), &rows(&zk), 0.2)).abs() < 1e-12);
        prop_assert!(l > 0.0);
        let scaled = zq.map(|v| v * s);
        prop_assert!((eval(&g, root, &[(q, &scaled), (k, &zk)]) - l).abs() < 1e-12);
    }

    #[test]
    fn distillation_matches_definition(seed in any::<u64>(), b in 1usize..5) {
        let c = random_tensor(&[5], seed ^ 9, 0.5);
        let (g, q, k, root) = loss_graph(1, b, 5, Some(&c));
        let zq = random_tensor(&[b, 5], seed, 1.0);
        let zk = random_tensor(&[b, 5], seed ^ 3, 1.0);
        let l = eval(&g, root, &[(q, &zq), (k, &zk)]);
        prop_assert!((l - distill_oracle(&rows(&zq), &rows(&zk), 0.1, 0.04, Some(c.data()))).abs() < 1e-10);
    }

    #[test]
    fn loss_gradients_match_finite_differences(seed in any::<u64>(), kind in 0u8..2) {
        let (g, q, k, root) = loss_graph(kind, 3, 4, None);
        let zq = random_tensor(&[3, 4], seed, 1.0);
        let zk = random_tensor(&[3, 4], seed ^ 3, 1.0);
        let mut bind = Bindings::new();
        bind.bind(q, &zq).bind(k, &zk);
        let grads = g.gradient(&bind, root, &[q, k]).unwrap();
        let coords: Vec<usize> = (0..12).collect();
        // Round-off leaves about 1e-10 absolute error in the differences, so
        // only coordinates above 1e-4 can be resolved to 1e-5 relative.
        let numeric = richardson(&g, &bind, root, q);
        let err = max_relative_error(&grads[0], &numeric, &coords, 1e-4);
        prop_assert!(err <= 1e-5, "{err:e}");
        prop_assert!(grads[0].data().iter().zip(numeric.data()).all(|(a, n)| (a - n).abs() <= 1e-8));
        if kind == 0 {
            let numeric = richardson(&g, &bind, root, k);
            prop_assert!(max_relative_error(&grads[1], &numeric, &coords, 1e-4) <= 1e-5);
        } else {
            prop_assert!(grads[1].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn symmetric_gradient_is_mean_of_directed_gradients(seed in any::<u64>()) {
        let mut g = Graph::<f64>::new();
        let q = g.leaf([4, 3]);
        let k = g.leaf([4, 3]);
        let fwd = info_nce(&mut g, q, k, 0.2).unwrap();
        let bwd = info_nce(&mut g, k, q, 0.2).unwrap();
        let s = g.add(fwd, bwd).unwrap();
        let sym = g.scale(s, 0.5);
        let zq = random_tensor(&[4, 3], seed, 1.0);
        let zk = random_tensor(&[4, 3], seed ^ 1, 1.0);
        let mut bind = Bindings::new();
        bind.bind(q, &zq).bind(k, &zk);
        let gs = g.gradient(&bind, sym, &[q, k]).unwrap();
        let gf = g.gradient(&bind, fwd, &[q, k]).unwrap();
        let gb = g.gradient(&bind, bwd, &[q, k]).unwrap();
        for i in 0..2 {
            for j in 0..12 {
                let want = 0.5 * (gf[i].data()[j] + gb[i].data()[j]);
                prop_assert!((gs[i].data()[j] - want).abs() <= 1e-14 * (1.0 + want.abs()));
            }
        }
    }
}

#[test]
fn distillation_closed_forms() {
    let n = 6;
    let (g, q, k, root) = loss_graph(1, 1, n, None);
    // Uniform teacher and student: log n.
    let flat = Tensor::full([1, n], 0.3);
    assert!((eval(&g, root, &[(q, &flat), (k, &flat)]) - (n as f64).ln()).abs() < 1e-12);
    // Identical inputs at equal temperatures give the teacher entropy.
    let mut g2 = Graph::new();
    let (q2, k2) = (g2.leaf([1, n]), g2.leaf([1, n]));
    let r2 = distillation_loss(&mut g2, q2, k2, 0.5, 0.5, None).unwrap();
    let z = random_tensor(&[1, n], 4, 1.0);
    let p = softmax(z.data(), 0.5);
    let entropy = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    assert!((eval(&g2, r2, &[(q2, &z), (k2, &z)]) - entropy).abs() < 1e-12);
    // A sharp teacher picks out one student log-probability.
    let mut sharp = vec![0.0; n];
    sharp[2] = 1.0;
    let target = Tensor::new([1, n], sharp).unwrap();
    let want = -softmax(z.data(), 0.1)[2].ln();
    assert!((eval(&g, root, &[(q, &z), (k, &target)]) - want).abs() < 1e-6);
}

fn batch(alg: Algorithm, b: usize, small: usize, seed: u64) -> Vec<CompressedPair> {
    let cfg = tiny_config();
    let id = CompressionStrategy::identity(&cfg);
    (0..b)
        .map(|i| {
            let s: Vec<_> = (0..small).map(|j| random_image(8, 3, seed + 100 + j as u64 * 7 + i as u64)).collect();
            apply_strategy(&random_image(12, 3, seed + i as u64), &random_image(12, 3, seed + 50 + i as u64), &s, &id, alg, &cfg, i as u64)
                .unwrap()
        })
        .collect()
}

fn rep(enc: &Encoder<f64>, p: &ViTParams<f64>, v: &seqcomp::compression::CompressedView) -> Vec<f64> {
    let o = enc.encode(p, v).unwrap();
    o.prediction.unwrap_or(o.projection).data().to_vec()
}

#[test]
fn moco_step_is_info_nce_of_encoded_views() {
    let cfg = tiny_config();
    let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
    let query = ViTParams::<f64>::init(&cfg, true, 1).unwrap();
    let key = query.without_predictor();
    let pairs = batch(Algorithm::Moco, 2, 0, 3);
    let loss = LossConfig::default();
    let out = assemble_step(&enc, Algorithm::Moco, &loss, &StepParams { query: &query, key: Some(&key), center: None }, &pairs, false).unwrap();
    let zq: Vec<_> = pairs.iter().map(|p| rep(&enc, &query, &p.query)).collect();
    let zk: Vec<_> = pairs.iter().map(|p| rep(&enc, &key, &p.key)).collect();
    assert!((out.loss - info_nce_oracle(&zq, &zk, loss.tau)).abs() < 1e-12);
}

#[test]
fn dino_without_small_crops_is_single_pair_distillation() {
    let cfg = tiny_config();
    let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
    let student = ViTParams::<f64>::init(&cfg, false, 1).unwrap();
    let teacher = ViTParams::<f64>::init(&cfg, false, 2).unwrap();
    let center = random_tensor(&[cfg.rep_dim], 5, 0.1);
    let pairs = batch(Algorithm::Dino, 3, 0, 7);
    let loss = LossConfig { small_crops: 0, ..LossConfig::default() };
    let params = StepParams { query: &student, key: Some(&teacher), center: Some(&center) };
    let out = assemble_step(&enc, Algorithm::Dino, &loss, &params, &pairs, false).unwrap();
    let zq: Vec<_> = pairs.iter().map(|p| rep(&enc, &student, &p.query)).collect();
    let zk: Vec<_> = pairs.iter().map(|p| rep(&enc, &teacher, &p.key)).collect();
    assert!((out.loss - distill_oracle(&zq, &zk, loss.tau_s, loss.tau_t, Some(center.data()))).abs() < 1e-10);

    // With small crops the loss averages over every student view.
    let pairs = batch(Algorithm::Dino, 3, 2, 7);
    let out = assemble_step(&enc, Algorithm::Dino, &loss, &params, &pairs, false).unwrap();
    let zk: Vec<_> = pairs.iter().map(|p| rep(&enc, &teacher, &p.key)).collect();
    let mut want = distill_oracle(&pairs.iter().map(|p| rep(&enc, &student, &p.query)).collect::<Vec<_>>(), &zk, 0.1, 0.04, Some(center.data()));
    for j in 0..2 {
        let zs: Vec<_> = pairs.iter().map(|p| rep(&enc, &student, &p.small[j])).collect();
        want += distill_oracle(&zs, &zk, 0.1, 0.04, Some(center.data()));
    }
    assert!((out.loss - want / 3.0).abs() < 1e-10);
    assert!(out.teacher_mean.is_some());
}

#[test]
fn simclr_loss_is_symmetric_in_the_views() {
    let cfg = tiny_config();
    let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
    let params = ViTParams::<f64>::init(&cfg, false, 4).unwrap();
    let pairs = batch(Algorithm::Simclr, 3, 0, 11);
    let swapped: Vec<_> = pairs.iter().map(|p| CompressedPair { query: p.key.clone(), key: p.query.clone(), small: vec![] }).collect();
    let sp = StepParams { query: &params, key: None, center: None };
    let a = assemble_step(&enc, Algorithm::Simclr, &LossConfig::default(), &sp, &pairs, false).unwrap();
    let b = assemble_step(&enc, Algorithm::Simclr, &LossConfig::default(), &sp, &swapped, false).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for (x, y) in a.grad.flatten().iter().zip(b.grad.flatten()) {
        assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
    }
}

#[test]
fn momentum_algorithms_need_a_key_encoder() {
    let cfg = tiny_config();
    let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
    let params = ViTParams::<f64>::init(&cfg, true, 4).unwrap();
    let pairs = batch(Algorithm::Moco, 2, 0, 1);
    let sp = StepParams { query: &params, key: None, center: None };
    assert!(assemble_step(&enc, Algorithm::Moco, &LossConfig::default(), &sp, &pairs, false).is_err());
    assert!(assemble_step(&enc, Algorithm::Moco, &LossConfig::default(), &sp, &[], false).is_err());
}
