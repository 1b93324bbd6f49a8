//! Reverse-mode differentiable expression graph.
//!
//! A [`Graph`] is built symbolically: every builder call checks shapes and
//! appends a node, so node order is a topological order. Leaves are bound to
//! concrete tensors through [`Bindings`] at evaluation time, which lets the
//! same graph be re-evaluated with perturbed inputs (finite differences).

use std::borrow::Cow;

use super::real::{gemm, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    Const(Tensor<F>),
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale(F),
    Exp,
    Log,
    Gelu,
    Softmax,
    LogSoftmax,
    LayerNorm(F),
    L2Normalize,
    Reshape,
    Transpose,
    GatherRows(Vec<usize>),
    ConcatRows,
    SliceCols { start: usize },
    ConcatCols,
    Sum,
    Mean,
    PickPerRow(Vec<usize>),
    Detach,
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const(_) => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Gelu => "gelu",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::L2Normalize => "l2_normalize",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::GatherRows(_) => "gather_rows",
            Op::ConcatRows => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::PickPerRow(_) => "pick_per_row",
            Op::Detach => "detach",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<F: Real> {
    op: Op<F>,
    inputs: Vec<Var>,
    shape: Vec<usize>,
}

/// Leaf-to-tensor assignment for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a, F: Real> {
    slots: Vec<Option<Cow<'a, Tensor<F>>>>,
}

impl<'a, F: Real> Bindings<'a, F> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    fn slot(&mut self, leaf: Var) -> &mut Option<Cow<'a, Tensor<F>>> {
        if self.slots.len() <= leaf.0 {
            self.slots.resize(leaf.0 + 1, None);
        }
        &mut self.slots[leaf.0]
    }

    pub fn bind(&mut self, leaf: Var, value: &'a Tensor<F>) -> &mut Self {
        *self.slot(leaf) = Some(Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, leaf: Var, value: Tensor<F>) -> &mut Self {
        *self.slot(leaf) = Some(Cow::Owned(value));
        self
    }

    pub fn get(&self, leaf: Var) -> Option<&Tensor<F>> {
        self.slots.get(leaf.0).and_then(|s| s.as_deref())
    }
}

/// Node values of one forward pass.
pub struct Values<'a, F: Real> {
    values: Vec<Cow<'a, Tensor<F>>>,
}

impl<'a, F: Real> Values<'a, F> {
    pub fn get(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }
}

/// Directed acyclic graph of tensor primitives.
#[derive(Clone, Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&c, rest)) => (rest.iter().product(), c),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<Var>, shape: Vec<usize>) -> Var {
        self.nodes.push(Node { op, inputs, shape });
        Var(self.nodes.len() - 1)
    }

    // ---- builders -------------------------------------------------------

    pub fn leaf(&mut self, shape: impl Into<Vec<usize>>) -> Var {
        self.push(Op::Leaf, vec![], shape.into())
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), vec![], shape)
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("rank-2 operands required: {sa:?}, {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})")));
        }
        Ok(self.push(Op::MatMul { ta, tb }, vec![a, b], vec![m, n]))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, true, false)
    }

    fn binary(&mut self, op: Op<F>, a: Var, b: Var) -> Result<Var> {
        same_shape(op.name(), self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b)
    }

    fn row_broadcast(&mut self, op: Op<F>, x: Var, v: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.shape(v).iter().product::<usize>() != c {
            return Err(Error::shape(op.name(), format!("{:?} with row {:?}", self.shape(x), self.shape(v))));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(op, vec![x, v], shape))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(Op::AddRow, x, v)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(Op::MulRow, x, v)
    }

    fn unary(&mut self, op: Op<F>, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        self.push(op, vec![x], shape)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(Op::Scale(F::from_f64(s)), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Op::Gelu, x)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.unary(Op::Softmax, x)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.unary(Op::LogSoftmax, x)
    }

    /// Row-wise normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        self.unary(Op::LayerNorm(F::from_f64(eps)), x)
    }

    /// Layer norm followed by the per-column gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm(x, eps);
        let n = self.mul_row(n, gain)?;
        self.add_row(n, bias)
    }

    /// Row-wise division by the Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        self.unary(Op::L2Normalize, x)
    }

    /// Pairwise cosine similarities between the rows of `a` (`m x d`) and
    /// `b` (`n x d`), shape `m x n`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize(a);
        let bn = self.l2_normalize(b);
        self.matmul_nt(an, bn)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.shape(x).iter().product::<usize>() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        Ok(self.push(Op::Reshape, vec![x], shape))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose, vec![x], shape))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("{s:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {} rows", s[0])));
        }
        let shape = vec![indices.len(), s[1]];
        Ok(self.push(Op::GatherRows(indices), vec![x], shape))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => rows_cols(self.shape(p)).1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", format!("{s:?} with {cols} columns")));
            }
            rows += s[0];
        }
        Ok(self.push(Op::ConcatRows, parts.to_vec(), vec![rows, cols]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::shape("slice_cols", format!("{s:?}[.., {start}..{}]", start + len)));
        }
        let shape = vec![s[0], len];
        Ok(self.push(Op::SliceCols { start }, vec![x], shape))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).first().copied().unwrap_or(1),
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("{s:?} with {rows} rows")));
            }
            cols += s[1];
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![rows, cols]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum, vec![x], vec![])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean, vec![x], vec![])
    }

    /// Selects element `indices[r]` of every row `r`, giving a `rows` vector.
    pub fn pick_per_row(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if indices.len() != r || indices.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick_per_row", format!("{} indices into {r}x{c}", indices.len())));
        }
        Ok(self.push(Op::PickPerRow(indices), vec![x], vec![r]))
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        self.unary(Op::Detach, x)
    }

    // ---- evaluation -----------------------------------------------------

    /// Computes every node value.
    pub fn forward<'a>(&'a self, bindings: &'a Bindings<'_, F>) -> Result<Values<'a, F>> {
        let mut values: Vec<Cow<'a, Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Leaf => {
                    let t = bindings.get(Var(i)).ok_or(Error::Unbound(i))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            "bind",
                            format!("leaf {i} declared {:?}, bound {:?}", node.shape, t.shape()),
                        ));
                    }
                    Cow::Borrowed(t)
                }
                Op::Const(t) => Cow::Borrowed(t),
                op => {
                    let inputs: Vec<&Tensor<F>> = node.inputs.iter().map(|v| values[v.0].as_ref()).collect();
                    Cow::Owned(compute(op, &inputs, &node.shape)?)
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite { node: i, op: node.op.name() });
            }
            values.push(value);
        }
        Ok(Values { values })
    }

    /// Value of `root` under `bindings`.
    pub fn evaluate(&self, bindings: &Bindings<'_, F>, root: Var) -> Result<Tensor<F>> {
        let values = self.forward(bindings)?;
        Ok(values.get(root).clone())
    }

    /// Reverse-mode accumulation of `seed` (the cotangent of `root`) back to
    /// the `wrt` nodes. Nodes that do not reach `root` get zero gradients.
    pub fn backward(&self, values: &Values<'_, F>, root: Var, seed: Tensor<F>, wrt: &[Var]) -> Result<Vec<Tensor<F>>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::shape("backward", format!("seed {:?} for root {:?}", seed.shape(), self.shape(root))));
        }
        let n = root.0 + 1;
        let mut wanted = vec![false; n];
        for w in wrt {
            if w.0 < n {
                wanted[w.0] = true;
            }
        }
        // needs[i]: node i lies on a path from a wrt node.
        let mut needs = wanted.clone();
        for i in 0..n {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Detach | Op::Leaf | Op::Const(_)) {
                continue;
            }
            needs[i] = node.inputs.iter().any(|v| needs[v.0]);
        }

        let mut grads: Vec<Option<Tensor<F>>> = vec![None; n];
        grads[root.0] = Some(seed);
        for i in (0..n).rev() {
            if !needs[i] || (wanted[i] && matches!(self.nodes[i].op, Op::Leaf | Op::Const(_))) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let input_grads = vjp(node, &g, values, Var(i), |v| needs[v.0])?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    match &mut grads[inp.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            // Keep the gradient if this node itself was requested.
            if wanted[i] {
                grads[i] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*w).to_vec()))
            })
            .collect())
    }

    /// Gradient of a scalar `root` with respect to each of `wrt`.
    pub fn gradient(&self, bindings: &Bindings<'_, F>, root: Var, wrt: &[Var]) -> Result<Vec<Tensor<F>>> {
        if self.shape(root).iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        for w in wrt {
            if self.is_leaf(*w) && bindings.get(*w).is_none() {
                return Err(Error::Unbound(w.0));
            }
        }
        let values = self.forward(bindings)?;
        let seed = Tensor::full(self.shape(root).to_vec(), F::one());
        self.backward(&values, root, seed, wrt)
    }
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let one = F::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + F::from_f64(3.0) * a * x * x);
    (y, dy)
}

fn compute<F: Real>(op: &Op<F>, inp: &[&Tensor<F>], shape: &[usize]) -> Result<Tensor<F>> {
    let out = match op {
        Op::Leaf | Op::Const(_) => unreachable!("leaves are bound, not computed"),
        Op::MatMul { ta, tb } => {
            let (a, b) = (inp[0], inp[1]);
            let (m, n) = (shape[0], shape[1]);
            let k = if *ta { a.shape()[0] } else { a.shape()[1] };
            let mut out = Tensor::zeros(shape.to_vec());
            gemm(m, k, n, a.data(), *ta, b.data(), *tb, F::zero(), out.data_mut());
            out
        }
        Op::Add => inp[0].zip_map(inp[1], |a, b| a + b),
        Op::Sub => inp[0].zip_map(inp[1], |a, b| a - b),
        Op::Mul => inp[0].zip_map(inp[1], |a, b| a * b),
        Op::AddRow | Op::MulRow => {
            let mut out = inp[0].clone();
            let v = inp[1].data();
            let add = matches!(op, Op::AddRow);
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(v) {
                    if add {
                        *o += b
                    } else {
                        *o *= b
                    }
                }
            }
            out
        }
        Op::Scale(s) => inp[0].map(|v| v * *s),
        Op::Exp => inp[0].map(F::exp),
        Op::Log => inp[0].map(F::ln),
        Op::Gelu => inp[0].map(|v| gelu_parts(v).0),
        Op::Softmax | Op::LogSoftmax => {
            let mut out = inp[0].clone();
            let log = matches!(op, Op::LogSoftmax);
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let mut z = F::zero();
                for v in row.iter_mut() {
                    *v -= max;
                    z += v.exp();
                }
                let lz = z.ln();
                for v in row.iter_mut() {
                    *v = if log { *v - lz } else { (*v - lz).exp() };
                }
            }
            out
        }
        Op::LayerNorm(eps) => {
            let mut out = inp[0].clone();
            let c = F::from_f64(out.cols() as f64);
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let mean = row.iter().copied().sum::<F>() / c;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / c;
                let inv = (var + *eps).sqrt().recip();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            out
        }
        Op::L2Normalize => {
            let mut out = inp[0].clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                if norm <= F::min_positive_value() {
                    return Err(Error::ZeroNorm("l2_normalize"));
                }
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            out
        }
        Op::Reshape | Op::Detach => Tensor::new(shape.to_vec(), inp[0].data().to_vec())?,
        Op::Transpose => inp[0].transpose()?,
        Op::GatherRows(idx) => {
            let x = inp[0];
            let mut data = Vec::with_capacity(idx.len() * x.cols());
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(shape.to_vec(), data)?
        }
        Op::ConcatRows => {
            let mut data = Vec::with_capacity(shape.iter().product());
            for t in inp {
                data.extend_from_slice(t.data());
            }
            Tensor::new(shape.to_vec(), data)?
        }
        Op::SliceCols { start } => {
            let x = inp[0];
            let len = shape[1];
            let mut data = Vec::with_capacity(shape[0] * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            Tensor::new(shape.to_vec(), data)?
        }
        Op::ConcatCols => {
            let mut data = Vec::with_capacity(shape.iter().product());
            for r in 0..shape[0] {
                for t in inp {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::new(shape.to_vec(), data)?
        }
        Op::Sum => Tensor::scalar(inp[0].sum()),
        Op::Mean => Tensor::scalar(inp[0].sum() / F::from_f64(inp[0].len() as f64)),
        Op::PickPerRow(idx) => {
            let x = inp[0];
            Tensor::new(shape.to_vec(), idx.iter().enumerate().map(|(r, &i)| x.row(r)[i]).collect())?
        }
    };
    Ok(out)
}

fn colsum<F: Real>(g: &Tensor<F>) -> Vec<F> {
    let mut acc = vec![F::zero(); g.cols()];
    for r in 0..g.rows() {
        for (a, &v) in acc.iter_mut().zip(g.row(r)) {
            *a += v;
        }
    }
    acc
}

/// Vector-Jacobian products of one node, one entry per input (`None` when the
/// input does not need a gradient).
fn vjp<F: Real>(
    node: &Node<F>,
    g: &Tensor<F>,
    values: &Values<'_, F>,
    me: Var,
    needs: impl Fn(Var) -> bool,
) -> Result<Vec<Option<Tensor<F>>>> {
    let inputs = &node.inputs;
    let val = |v: Var| values.get(v);
    let need = |k: usize| needs(inputs[k]);
    let mut out: Vec<Option<Tensor<F>>> = vec![None; inputs.len()];
    match &node.op {
        Op::Leaf | Op::Const(_) | Op::Detach => {}
        Op::MatMul { ta, tb } => {
            let (a, b) = (val(inputs[0]), val(inputs[1]));
            let (m, n) = (node.shape[0], node.shape[1]);
            let k = if *ta { a.shape()[0] } else { a.shape()[1] };
            if need(0) {
                let mut da = Tensor::zeros(a.shape().to_vec());
                if *ta {
                    // a: k x m, da = b · gᵀ (op(b) as k x n)
                    gemm(k, n, m, b.data(), *tb, g.data(), true, F::zero(), da.data_mut());
                } else {
                    // da = g · op(b)ᵀ
                    gemm(m, n, k, g.data(), false, b.data(), !*tb, F::zero(), da.data_mut());
                }
                out[0] = Some(da);
            }
            if need(1) {
                let mut db = Tensor::zeros(b.shape().to_vec());
                if *tb {
                    // b: n x k, db = gᵀ · op(a)
                    gemm(n, m, k, g.data(), true, a.data(), *ta, F::zero(), db.data_mut());
                } else {
                    // db = op(a)ᵀ · g
                    gemm(k, m, n, a.data(), !*ta, g.data(), false, F::zero(), db.data_mut());
                }
                out[1] = Some(db);
            }
        }
        Op::Add => {
            if need(0) {
                out[0] = Some(g.clone());
            }
            if need(1) {
                out[1] = Some(g.clone());
            }
        }
        Op::Sub => {
            if need(0) {
                out[0] = Some(g.clone());
            }
            if need(1) {
                out[1] = Some(g.map(|v| -v));
            }
        }
        Op::Mul => {
            let (a, b) = (val(inputs[0]), val(inputs[1]));
            if need(0) {
                out[0] = Some(g.zip_map(b, |x, y| x * y));
            }
            if need(1) {
                out[1] = Some(g.zip_map(a, |x, y| x * y));
            }
        }
        Op::AddRow => {
            if need(0) {
                out[0] = Some(g.clone());
            }
            if need(1) {
                let v = val(inputs[1]);
                out[1] = Some(Tensor::new(v.shape().to_vec(), colsum(g))?);
            }
        }
        Op::MulRow => {
            let (x, v) = (val(inputs[0]), val(inputs[1]));
            if need(0) {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    for (d, &s) in dx.row_mut(r).iter_mut().zip(v.data()) {
                        *d *= s;
                    }
                }
                out[0] = Some(dx);
            }
            if need(1) {
                out[1] = Some(Tensor::new(v.shape().to_vec(), colsum(&g.zip_map(x, |a, b| a * b)))?);
            }
        }
        Op::Scale(s) => out[0] = Some(g.map(|v| v * *s)),
        Op::Exp => out[0] = Some(g.zip_map(val(me), |a, y| a * y)),
        Op::Log => out[0] = Some(g.zip_map(val(inputs[0]), |a, x| a / x)),
        Op::Gelu => out[0] = Some(g.zip_map(val(inputs[0]), |a, x| a * gelu_parts(x).1)),
        Op::Softmax => {
            let y = val(me);
            let mut dx = g.clone();
            for r in 0..dx.rows() {
                let yr = y.row(r);
                let dot: F = g.row(r).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                    *d = yv * (*d - dot);
                }
            }
            out[0] = Some(dx);
        }
        Op::LogSoftmax => {
            let y = val(me);
            let mut dx = g.clone();
            for r in 0..dx.rows() {
                let gs: F = g.row(r).iter().copied().sum();
                for (d, &ly) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                    *d -= ly.exp() * gs;
                }
            }
            out[0] = Some(dx);
        }
        Op::LayerNorm(eps) => {
            let (x, y) = (val(inputs[0]), val(me));
            let c = F::from_f64(x.cols() as f64);
            let mut dx = g.clone();
            for r in 0..dx.rows() {
                let xr = x.row(r);
                let mean = xr.iter().copied().sum::<F>() / c;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / c;
                let inv = (var + *eps).sqrt().recip();
                let (gr, yr) = (g.row(r), y.row(r));
                let gmean = gr.iter().copied().sum::<F>() / c;
                let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / c;
                for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                    *d = inv * (gr[j] - gmean - yr[j] * gy);
                }
            }
            out[0] = Some(dx);
        }
        Op::L2Normalize => {
            let (x, y) = (val(inputs[0]), val(me));
            let mut dx = g.clone();
            for r in 0..dx.rows() {
                let norm = x.row(r).iter().map(|&v| v * v).sum::<F>().sqrt();
                let (gr, yr) = (g.row(r), y.row(r));
                let gy: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                    *d = (gr[j] - yr[j] * gy) / norm;
                }
            }
            out[0] = Some(dx);
        }
        Op::Reshape => {
            let x = val(inputs[0]);
            out[0] = Some(Tensor::new(x.shape().to_vec(), g.data().to_vec())?);
        }
        Op::Transpose => out[0] = Some(g.transpose()?),
        Op::GatherRows(idx) => {
            let x = val(inputs[0]);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (k, &i) in idx.iter().enumerate() {
                for (d, &v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                    *d += v;
                }
            }
            out[0] = Some(dx);
        }
        Op::ConcatRows => {
            let mut offset = 0;
            for (k, inp) in inputs.iter().enumerate() {
                let n = val(*inp).len();
                if need(k) {
                    out[k] = Some(Tensor::new(val(*inp).shape().to_vec(), g.data()[offset..offset + n].to_vec())?);
                }
                offset += n;
            }
        }
        Op::SliceCols { start } => {
            let x = val(inputs[0]);
            let len = node.shape[1];
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for r in 0..x.rows() {
                dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
            }
            out[0] = Some(dx);
        }
        Op::ConcatCols => {
            let mut offset = 0;
            for (k, inp) in inputs.iter().enumerate() {
                let x = val(*inp);
                let c = x.cols();
                if need(k) {
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    for r in 0..x.rows() {
                        dx.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    out[k] = Some(dx);
                }
                offset += c;
            }
        }
        Op::Sum | Op::Mean => {
            let x = val(inputs[0]);
            let mut s = g.item();
            if matches!(node.op, Op::Mean) {
                s /= F::from_f64(x.len() as f64);
            }
            out[0] = Some(Tensor::full(x.shape().to_vec(), s));
        }
        Op::PickPerRow(idx) => {
            let x = val(inputs[0]);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (r, &i) in idx.iter().enumerate() {
                dx.row_mut(r)[i] = g.data()[r];
            }
            out[0] = Some(dx);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([2, 2]);
        let b = g.leaf([2, 2]);
        let c = g.matmul(a, b).unwrap();
        let (av, bv) = (t(&[2, 2], &[1., 0., 0., 1.]), t(&[2, 2], &[2., 3., 4., 5.]));
        let mut bind = Bindings::new();
        bind.bind(a, &av).bind(b, &bv);
        assert_eq!(g.evaluate(&bind, c).unwrap().data(), &[2., 3., 4., 5.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let s = g.softmax(x);
        let v = g.evaluate(&Bindings::new(), s).unwrap();
        for p in v.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let data: Vec<f64> = (0..8).map(|i| ((i * 7919) % 13) as f64 * 0.37 - 1.1).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[8], &data));
        let y = g.layer_norm(x, 1e-6);
        let v = g.evaluate(&Bindings::new(), y).unwrap();
        let mean = v.data().iter().sum::<f64>() / 8.0;
        let var = v.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
        let raw_mean = data.iter().sum::<f64>() / 8.0;
        let raw_var = data.iter().map(|a| (a - raw_mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        // eps slightly shrinks the variance below 1.
        assert!((var - raw_var / (raw_var + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([2, 2]);
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq);
        let av = t(&[2, 2], &[1., 2., 3., 4.]);
        let mut bind = Bindings::new();
        bind.bind(a, &av);
        let grads = g.gradient(&bind, s, &[a]).unwrap();
        assert_eq!(grads[0].data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn constant_root_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([3]);
        let c = g.constant(Tensor::scalar(5.0));
        let av = t(&[3], &[1., 2., 3.]);
        let mut bind = Bindings::new();
        bind.bind(a, &av);
        let grads = g.gradient(&bind, c, &[a]).unwrap();
        assert_eq!(grads[0].data(), &[0., 0., 0.]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([3]);
        let e = g.exp(a);
        let av = t(&[3], &[0., 0., 0.]);
        let mut bind = Bindings::new();
        bind.bind(a, &av);
        assert!(matches!(g.gradient(&bind, e, &[a]), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unbound_leaf_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([1]);
        let s = g.sum(a);
        assert!(matches!(g.evaluate(&Bindings::new(), s), Err(Error::Unbound(0))));
        assert!(matches!(g.gradient(&Bindings::new(), s, &[a]), Err(Error::Unbound(0))));
    }

    #[test]
    fn shape_mismatch_at_build_and_bind() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([2, 3]);
        let b = g.leaf([2, 3]);
        assert!(g.matmul(a, b).is_err());
        let s = g.sum(a);
        let wrong = Tensor::<f64>::zeros([3, 2]);
        let mut bind = Bindings::new();
        bind.bind(a, &wrong);
        assert!(matches!(g.evaluate(&bind, s), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([1]);
        let l = g.log(a);
        let av = t(&[1], &[-1.0]);
        let mut bind = Bindings::new();
        bind.bind(a, &av);
        match g.evaluate(&bind, l) {
            Err(Error::NonFinite { node, op }) => assert_eq!((node, op), (l.index(), "log")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf([2]);
        let d = g.detach(a);
        let p = g.mul(a, d).unwrap();
        let s = g.sum(p);
        let av = t(&[2], &[3., -2.]);
        let mut bind = Bindings::new();
        bind.bind(a, &av);
        // d/da (a * stopgrad(a)) = stopgrad(a)
        assert_eq!(g.gradient(&bind, s, &[a]).unwrap()[0].data(), &[3., -2.]);
    }
}
