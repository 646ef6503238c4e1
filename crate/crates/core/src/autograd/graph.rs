//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array; vectors are `1 × d` rows. A graph is
//! built fresh for each forward pass, [`Graph::backward`] then walks the tape in
//! reverse and accumulates gradients for every node that influences the seed.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Array2<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A tape of matrix operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, ParamId), Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A leaf the caller may or may not differentiate against.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter from `store`; repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.bound.insert(key, v);
        v
    }

    pub fn bound_param(&self, store: &ParamStore, id: ParamId) -> Option<Var> {
        self.bound.get(&(store.uid(), id)).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `a (n × m) + b (1 × m)`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(b), (1, m), "add_row: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (n × m) ⊙ b (1 × m)`, broadcasting `b` over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(b), (1, m), "mul_row: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise log-softmax. Entries where `mask` is `false` are excluded from
    /// the normalizer, hold the value 0 and receive no gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Array2<bool>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), x.dim(), "log_softmax_rows: mask shape mismatch");
        }
        let mut out = Array2::zeros(x.dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[[r, c]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(c, _)| keep(*c))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max
                + row
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| keep(*c))
                    .map(|(_, v)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for (c, v) in row.iter().enumerate() {
                if keep(c) {
                    out[[r, c]] = v - lse;
                }
            }
        }
        self.push(out, Op::LogSoftmaxRows(a, mask))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × m`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..m {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty input")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Divides every row by its Euclidean norm. Callers must rule out zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut v = x.clone();
        for (mut row, n) in v.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|e| e / n);
        }
        self.push(v, Op::NormalizeRows(a, norms))
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_seeded(root, Array2::ones(self.shape(root)))
    }

    /// Reverse pass with an explicit upstream gradient for `root`, for
    /// chaining a subgraph into a loss computed on another tape.
    pub fn backward_seeded(&self, root: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.shape(root), "backward_seeded: seed shape mismatch");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::MulRow(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = y.row(r).dot(&g.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LogSoftmaxRows(a, mask) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let keep = |c: usize| mask.as_ref().is_none_or(|m| m[[r, c]]);
                        let gsum: f64 = (0..y.ncols()).filter(|&c| keep(c)).map(|c| g[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            if keep(c) {
                                gx[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gsum;
                            }
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gamma_v;
                    let m = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let mean_d = dxhat.row(r).sum() / m;
                        let mean_dx = dxhat.row(r).dot(&xhat.row(r)) / m;
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] =
                                inv_std[r] * (dxhat[[r, c]] - mean_d - xhat[[r, c]] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Gelu(a) => {
                    let gx = &g * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.shape(*a);
                    let ga = g.broadcast((n, m)).expect("mean_rows grad").to_owned() / n as f64;
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = y.row(r).dot(&g.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = (g[[r, c]] - y[[r, c]] * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when `v` does not influence the root.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(graph.shape(v)))
    }

    /// Per-parameter gradients for every parameter of `store` bound on `graph`.
    pub fn for_store(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Array2<f64>>> {
        store
            .ids()
            .map(|id| {
                graph
                    .bound_param(store, id)
                    .and_then(|v| self.get(v).cloned())
            })
            .collect()
    }
}
