use proptest::prelude::*;
use rand::Rng;
use seqcomp::numerics::{finite_difference_gradient, max_relative_error, Bindings, Graph, Tensor, Var, DEFAULT_EPSILON};
use seqcomp::rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = rng::stream(&[seed]);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-scale..scale))
}

fn check_all_leaves(g: &Graph<f64>, b: &Bindings<'_, f64>, root: Var, leaves: &[Var], tol: f64) {
    let analytic = g.gradient(b, root, leaves).unwrap();
    for (leaf, a) in leaves.iter().zip(&analytic) {
        let numeric = finite_difference_gradient(g, b, root, *leaf, DEFAULT_EPSILON, None).unwrap();
        let coords: Vec<usize> = (0..a.len()).collect();
        let err = max_relative_error(a, &numeric, &coords, 1e-8);
        assert!(err <= tol, "leaf {} relative error {err:e}", leaf.index());
    }
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    // Softmax classifier over a GELU hidden layer.
    let mut g = Graph::<f64>::new();
    let x = g.leaf([6, 5]);
    let w1 = g.leaf([5, 7]);
    let b1 = g.leaf([7]);
    let w2 = g.leaf([7, 3]);
    let h = g.matmul(x, w1).unwrap();
    let h = g.add_row(h, b1).unwrap();
    let h = g.gelu(h);
    let logits = g.matmul(h, w2).unwrap();
    let lp = g.log_softmax(logits);
    let picked = g.pick_per_row(lp, vec![0, 1, 2, 0, 1, 2]).unwrap();
    let m = g.mean(picked);
    let loss = g.neg(m);
    let vals = [random(&[6, 5], 1, 1.0), random(&[5, 7], 2, 0.7), random(&[7], 3, 0.3), random(&[7, 3], 4, 0.7)];
    let mut b = Bindings::new();
    for (leaf, v) in [x, w1, b1, w2].into_iter().zip(&vals) {
        b.bind(leaf, v);
    }
    check_all_leaves(&g, &b, loss, &[x, w1, b1, w2], 1e-6);
}

/// Scalar loss touching every primitive the encoder and losses use.
fn kitchen_sink(g: &mut Graph<f64>) -> (Var, Vec<Var>) {
    let a = g.leaf([4, 6]);
    let w = g.leaf([6, 6]);
    let gain = g.leaf([6]);
    let bias = g.leaf([6]);
    let c = g.leaf([3, 6]);
    let h = g.matmul(a, w).unwrap();
    let h = g.layer_norm_affine(h, gain, bias, 1e-6).unwrap();
    let h = g.gelu(h);
    let hc = g.concat_rows(&[h, c]).unwrap();
    let picked = g.gather_rows(hc, vec![0, 4, 2, 6, 1]).unwrap();
    let left = g.slice_cols(picked, 0, 3).unwrap();
    let right = g.slice_cols(picked, 3, 3).unwrap();
    let joined = g.concat_cols(&[right, left]).unwrap();
    let t = g.transpose(joined).unwrap();
    let tt = g.matmul_tn(t, t).unwrap();
    let sims = g.cosine_similarity(joined, picked).unwrap();
    let scaled = g.scale(sims, 2.5);
    let sm = g.softmax(scaled);
    let e = g.exp(tt);
    let s = g.mean(e);
    let ls = g.log(s);
    let p = g.mul(sm, sm).unwrap();
    let ps = g.sum(p);
    let n = g.l2_normalize(h);
    let sq = g.mul(n, n).unwrap();
    let nsum = g.mean(sq);
    let lsm = g.log_softmax(h);
    let lsum = g.mean(lsm);
    let r = g.reshape(ls, [1]).unwrap();
    let r2 = g.reshape(ps, [1]).unwrap();
    let r3 = g.reshape(lsum, [1]).unwrap();
    let r4 = g.reshape(nsum, [1]).unwrap();
    let sub = g.sub(r, r2).unwrap();
    let add = g.add(sub, r3).unwrap();
    let add = g.add(add, r4).unwrap();
    let root = g.sum(add);
    (root, vec![a, w, gain, bias, c])
}

fn bind_kitchen_sink<'a>(leaves: &[Var], vals: &'a [Tensor<f64>]) -> Bindings<'a, f64> {
    let mut b = Bindings::new();
    for (leaf, v) in leaves.iter().zip(vals) {
        b.bind(*leaf, v);
    }
    b
}

fn kitchen_values(seed: u64) -> Vec<Tensor<f64>> {
    vec![
        random(&[4, 6], seed, 1.0),
        random(&[6, 6], seed + 1, 0.5),
        random(&[6], seed + 2, 1.0).map(|v| 1.0 + 0.5 * v),
        random(&[6], seed + 3, 0.2),
        random(&[3, 6], seed + 4, 1.0),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in 0u64..1_000_000) {
        let mut g = Graph::new();
        let (root, leaves) = kitchen_sink(&mut g);
        let vals = kitchen_values(seed);
        let b = bind_kitchen_sink(&leaves, &vals);
        let analytic = g.gradient(&b, root, &leaves).unwrap();
        for (leaf, a) in leaves.iter().zip(&analytic) {
            let numeric = finite_difference_gradient(&g, &b, root, *leaf, DEFAULT_EPSILON, None).unwrap();
            let coords: Vec<usize> = (0..a.len()).collect();
            let err = max_relative_error(a, &numeric, &coords, 1e-8);
            // Central differences with eps 1e-5 carry O(eps^2) truncation error.
            prop_assert!(err <= 1e-5, "leaf {} relative error {err:e}", leaf.index());
        }
    }

    #[test]
    fn gradient_is_linear_in_the_root(seed in 0u64..1_000_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut g = Graph::new();
        let (f, leaves) = kitchen_sink(&mut g);
        let sq = g.mul(leaves[0], leaves[0]).unwrap();
        let h = g.sum(sq);
        let af = g.scale(f, alpha);
        let bh = g.scale(h, beta);
        let combo = g.add(af, bh).unwrap();
        let vals = kitchen_values(seed);
        let b = bind_kitchen_sink(&leaves, &vals);
        let gf = g.gradient(&b, f, &leaves).unwrap();
        let gh = g.gradient(&b, h, &leaves).unwrap();
        let gc = g.gradient(&b, combo, &leaves).unwrap();
        for i in 0..leaves.len() {
            for j in 0..gc[i].len() {
                let want = alpha * gf[i].data()[j] + beta * gh[i].data()[j];
                let got = gc[i].data()[j];
                prop_assert!((want - got).abs() <= 1e-12 * (1.0 + want.abs()), "{want} vs {got}");
            }
        }
    }
}

#[test]
fn evaluation_and_gradients_are_bitwise_repeatable() {
    let mut g = Graph::new();
    let (root, leaves) = kitchen_sink(&mut g);
    let vals = kitchen_values(42);
    let b = bind_kitchen_sink(&leaves, &vals);
    let v1 = g.evaluate(&b, root).unwrap();
    let v2 = g.evaluate(&b, root).unwrap();
    assert_eq!(v1.item().to_bits(), v2.item().to_bits());
    let g1 = g.gradient(&b, root, &leaves).unwrap();
    let g2 = g.gradient(&b, root, &leaves).unwrap();
    for (a, c) in g1.iter().zip(&g2) {
        assert!(a.data().iter().zip(c.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf([1, 8]);
    let y = g.layer_norm(x, 1e-6);
    let v = random(&[1, 8], 9, 3.0);
    let mut b = Bindings::new();
    b.bind(x, &v);
    let out = g.evaluate(&b, y).unwrap();
    let mean = out.data().iter().sum::<f64>() / 8.0;
    let var = out.data().iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / 8.0;
    // Direct computation from the input.
    let m_in = v.data().iter().sum::<f64>() / 8.0;
    let v_in = v.data().iter().map(|o| (o - m_in) * (o - m_in)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - v_in / (v_in + 1e-6)).abs() < 1e-12);
    for (o, i) in out.data().iter().zip(v.data()) {
        assert!((o - (i - m_in) / (v_in + 1e-6).sqrt()).abs() < 1e-12);
    }
}
