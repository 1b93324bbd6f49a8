use super::graph::{Bindings, Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_EPSILON: f64 = 1e-5;

fn perturbed_value<F: Real>(
    graph: &Graph<F>,
    bindings: &Bindings<'_, F>,
    leaf: Var,
    base: &Tensor<F>,
    coord: usize,
    delta: F,
    root: Var,
) -> Result<F> {
    let mut moved = base.clone();
    moved.data_mut()[coord] += delta;
    let mut b = bindings.clone();
    b.bind_owned(leaf, moved);
    Ok(graph.evaluate(&b, root)?.item())
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` of a scalar root for the
/// selected coordinates of `leaf` (all coordinates when `coords` is `None`).
/// Unselected coordinates are left at zero.
pub fn finite_difference_gradient<F: Real>(
    graph: &Graph<F>,
    bindings: &Bindings<'_, F>,
    root: Var,
    leaf: Var,
    epsilon: f64,
    coords: Option<&[usize]>,
) -> Result<Tensor<F>> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if graph.shape(root).iter().product::<usize>() != 1 {
        return Err(Error::NonScalarRoot(graph.shape(root).to_vec()));
    }
    let base = bindings.get(leaf).ok_or(Error::Unbound(leaf.index()))?.clone();
    let eps = F::from_f64(epsilon);
    let mut out = Tensor::zeros(base.shape().to_vec());
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    for &i in coords {
        let plus = perturbed_value(graph, bindings, leaf, &base, i, eps, root)?;
        let minus = perturbed_value(graph, bindings, leaf, &base, i, -eps, root)?;
        out.data_mut()[i] = (plus - minus) / (eps + eps);
    }
    Ok(out)
}

/// Largest relative deviation `|a − n| / max(|a|, |n|)` over the given
/// coordinates, skipping those where `|a| < floor`.
pub fn max_relative_error<F: Real>(analytic: &Tensor<F>, numeric: &Tensor<F>, coords: &[usize], floor: f64) -> f64 {
    coords
        .iter()
        .filter_map(|&i| {
            let a = analytic.data()[i].as_f64();
            let n = numeric.data()[i].as_f64();
            (a.abs() >= floor).then(|| (a - n).abs() / a.abs().max(n.abs()))
        })
        .fold(0.0, f64::max)
}
