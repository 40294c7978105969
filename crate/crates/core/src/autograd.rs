//! Forward-pass abstraction with two backends.
//!
//! Model code is written once against [`Backend`]. [`Eval`] computes values
//! eagerly and keeps nothing; [`Graph`] records a tape and can run reverse-mode
//! differentiation from any scalar or seeded output.
//!
//! Operations panic on shape mismatch: callers validate user-facing shapes
//! before building a forward pass, so a mismatch here is a bug.

use crate::attention::{rotate_rows, standard_attention_counted, ROPE_BASE};
use crate::tensor::{matmul_into, Tensor, NORM_EPS};

pub trait Backend {
    type V: Clone;

    /// A value that does not receive gradients.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A differentiable input (parameter or probed input).
    fn leaf(&mut self, t: &Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn transpose(&mut self, a: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Adds a `1 x c` row to every row.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    /// Multiplies every row elementwise by a `1 x c` row.
    fn mul_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Self::V;
    /// RMS normalization of each contiguous `group`-wide block of every row.
    fn rms_norm_groups(&mut self, a: &Self::V, group: usize) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn silu(&mut self, a: &Self::V) -> Self::V;
    /// Multi-head softmax attention.
    fn sdpa(&mut self, q: &Self::V, k: &Self::V, v: &Self::V, n_heads: usize) -> Self::V;
    fn rope(&mut self, a: &Self::V, positions: &[usize], head_dim: usize) -> Self::V;
    fn slice_rows(&mut self, a: &Self::V, start: usize, end: usize) -> Self::V;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Self::V;
    fn slice_cols(&mut self, a: &Self::V, start: usize, end: usize) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Self::V;
    /// `1 x c` column sums.
    fn col_sum(&mut self, a: &Self::V) -> Self::V;
    /// Divides row `i` of `a` by `b[i, 0]`.
    fn div_col(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// `1 x 1` sum of squares.
    fn sum_sq(&mut self, a: &Self::V) -> Self::V;
    /// Identity in value, blocks gradient flow.
    fn detach(&mut self, a: &Self::V) -> Self::V;

    fn shape(&self, v: &Self::V) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }
}

// ---------------------------------------------------------------------------
// shared forward kernels

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::from_parts(vec![m, n], out)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn row_broadcast(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = a.cols();
    assert_eq!(row.shape(), [1, c], "row broadcast shape mismatch");
    let r = row.data();
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % c]))
            .collect(),
    )
}

fn norm_groups_fwd(a: &Tensor, group: usize) -> Tensor {
    assert!(
        group > 0 && a.cols().is_multiple_of(group),
        "bad norm group {group}"
    );
    let mut out = a.clone();
    for g in out.data_mut().chunks_mut(group) {
        let ms = g.iter().map(|x| x * x).sum::<f64>() / group as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        g.iter_mut().for_each(|x| *x *= inv);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sdpa_fwd(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Tensor {
    standard_attention_counted(q, k, v, n_heads)
        .expect("sdpa shapes")
        .0
}

fn rope_fwd(a: &Tensor, positions: &[usize], head_dim: usize, sign: f64) -> Tensor {
    assert_eq!(positions.len(), a.rows(), "rope positions");
    let mut out = a.clone();
    let d = a.cols();
    rotate_rows(out.data_mut(), d, head_dim, positions, ROPE_BASE, sign);
    out
}

fn concat_rows_fwd(parts: &[&Tensor]) -> Tensor {
    Tensor::concat_rows(parts).expect("concat_rows shapes")
}

fn concat_cols_fwd(parts: &[&Tensor]) -> Tensor {
    Tensor::concat_cols(parts).expect("concat_cols shapes")
}

fn col_sum_fwd(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = vec![0.0; c];
    for i in 0..a.rows() {
        for (o, x) in out.iter_mut().zip(a.row(i)) {
            *o += x;
        }
    }
    Tensor::from_parts(vec![1, c], out)
}

fn div_col_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(b.shape(), [a.rows(), 1], "div_col shape");
    let c = a.cols();
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x / b.data()[i / c])
            .collect(),
    )
}

// ---------------------------------------------------------------------------

/// Eager evaluation, no tape.
#[derive(Default)]
pub struct Eval;

impl Backend for Eval {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn leaf(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        mm(a, b)
    }
    fn transpose(&mut self, a: &Tensor) -> Tensor {
        a.transpose()
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        zip(a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        zip(a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        zip(a, b, |x, y| x * y)
    }
    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Tensor {
        row_broadcast(a, row, |x, r| x + r)
    }
    fn mul_row(&mut self, a: &Tensor, row: &Tensor) -> Tensor {
        row_broadcast(a, row, |x, r| x * r)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.scale(s)
    }
    fn add_scalar(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.map(|x| x + s)
    }
    fn rms_norm_groups(&mut self, a: &Tensor, group: usize) -> Tensor {
        norm_groups_fwd(a, group)
    }
    fn relu(&mut self, a: &Tensor) -> Tensor {
        a.map(|x| x.max(0.0))
    }
    fn silu(&mut self, a: &Tensor) -> Tensor {
        a.map(|x| x * sigmoid(x))
    }
    fn sdpa(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Tensor {
        sdpa_fwd(q, k, v, n_heads)
    }
    fn rope(&mut self, a: &Tensor, positions: &[usize], head_dim: usize) -> Tensor {
        rope_fwd(a, positions, head_dim, 1.0)
    }
    fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Tensor {
        a.slice_rows(start, end)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Tensor {
        concat_rows_fwd(&parts.iter().collect::<Vec<_>>())
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Tensor {
        a.slice_cols(start, end)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        concat_cols_fwd(&parts.iter().collect::<Vec<_>>())
    }
    fn col_sum(&mut self, a: &Tensor) -> Tensor {
        col_sum_fwd(a)
    }
    fn div_col(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        div_col_fwd(a, b)
    }
    fn sum_sq(&mut self, a: &Tensor) -> Tensor {
        Tensor::from_parts(vec![1, 1], vec![a.sum_sq()])
    }
    fn detach(&mut self, a: &Tensor) -> Tensor {
        a.clone()
    }
}

// ---------------------------------------------------------------------------

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    NormGroups(Var, usize),
    Relu(Var),
    Silu(Var),
    Sdpa(Var, Var, Var, usize),
    Rope(Var, Vec<usize>, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ColSum(Var),
    DivCol(Var, Var),
    SumSq(Var),
    Detach,
}

struct Node {
    value: Tensor,
    op: Op,
    /// Some leaf is reachable through the inputs.
    needs: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Leaf | Op::Detach => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::DivCol(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::NormGroups(a, _)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Rope(a, _, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::ColSum(a)
            | Op::SumSq(a) => vec![*a],
            Op::Sdpa(q, k, v, _) => vec![*q, *k, *v],
            Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        }
    }
}

/// Recording backend with reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs = matches!(op, Op::Leaf) || op.inputs().iter().any(|v| self.nodes[v.0].needs);
        self.nodes.push(Node { value, op, needs });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Backward pass from a `1 x 1` output.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.val(root).numel(), 1, "backward root must be scalar");
        self.backward_seeded(root, Tensor::full(self.val(root).shape(), 1.0))
    }

    /// Backward pass with an explicit output cotangent.
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.val(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let need = |v: &Var| self.nodes[v.0].needs;
        let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(cur) => cur.axpy(1.0, &delta).expect("gradient shape"),
            slot @ None => *slot = Some(delta),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                if need(a) {
                    acc(*a, mm(g, &self.val(*b).transpose()));
                }
                if need(b) {
                    acc(*b, mm(&self.val(*a).transpose(), g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if need(a) {
                    acc(*a, zip(g, self.val(*b), |x, y| x * y));
                }
                if need(b) {
                    acc(*b, zip(g, self.val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, col_sum_fwd(g));
            }
            Op::MulRow(a, r) => {
                acc(*a, row_broadcast(g, self.val(*r), |x, y| x * y));
                acc(*r, col_sum_fwd(&zip(g, self.val(*a), |x, y| x * y)));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::NormGroups(a, group) => {
                let x = self.val(*a);
                let mut dx = g.clone();
                let n = *group as f64;
                for (dxg, xg) in dx
                    .data_mut()
                    .chunks_mut(*group)
                    .zip(x.data().chunks(*group))
                {
                    let ms = xg.iter().map(|v| v * v).sum::<f64>() / n;
                    let r = 1.0 / (ms + NORM_EPS).sqrt();
                    let gx: f64 = dxg.iter().zip(xg).map(|(a, b)| a * b).sum();
                    for (d, &xv) in dxg.iter_mut().zip(xg) {
                        *d = r * *d - r * r * r * xv * gx / n;
                    }
                }
                acc(*a, dx);
            }
            Op::Relu(a) => acc(
                *a,
                zip(g, self.val(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::Silu(a) => acc(
                *a,
                zip(g, self.val(*a), |d, x| {
                    let s = sigmoid(x);
                    d * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Sdpa(q, k, v, heads) => {
                let (dq, dk, dv) =
                    sdpa_backward(self.val(*q), self.val(*k), self.val(*v), *heads, g);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Rope(a, positions, head_dim) => acc(*a, rope_fwd(g, positions, *head_dim, -1.0)),
            Op::SliceRows(a, start) => {
                let src = self.val(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.val(*p).rows();
                    acc(*p, g.slice_rows(start, start + r));
                    start += r;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.val(*a);
                let mut d = Tensor::zeros(src.shape());
                let w = g.cols();
                for i in 0..src.rows() {
                    d.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    acc(*p, g.slice_cols(start, start + w));
                    start += w;
                }
            }
            Op::ColSum(a) => {
                let src = self.val(*a);
                let mut d = Tensor::zeros(src.shape());
                for i in 0..src.rows() {
                    d.row_mut(i).copy_from_slice(g.data());
                }
                acc(*a, d);
            }
            Op::DivCol(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, div_col_fwd(g, bv));
                let c = av.cols();
                let db: Vec<f64> = (0..av.rows())
                    .map(|i| {
                        let bi = bv.data()[i];
                        let s: f64 = g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                        -s / (bi * bi)
                    })
                    .collect();
                debug_assert_eq!(c, g.cols());
                acc(*b, Tensor::from_parts(vec![av.rows(), 1], db));
            }
            Op::SumSq(a) => acc(*a, self.val(*a).scale(2.0 * g.data()[0])),
        }
    }
}

fn sdpa_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (nq, d) = (q.rows(), q.cols());
    let (nk, dv) = (k.rows(), v.cols());
    let (hd, hv) = (d / n_heads, dv / n_heads);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Tensor::zeros(&[nq, d]);
    let mut dk = Tensor::zeros(&[nk, d]);
    let mut dvv = Tensor::zeros(&[nk, dv]);
    let mut p = vec![0.0; nk];
    let mut dp = vec![0.0; nk];
    for h in 0..n_heads {
        let (qs, vs) = (h * hd..(h + 1) * hd, h * hv..(h + 1) * hv);
        for i in 0..nq {
            let qi = &q.row(i)[qs.clone()];
            let gi = &g.row(i)[vs.clone()];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = qi
                    .iter()
                    .zip(&k.row(j)[qs.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale;
                max = max.max(*pj);
            }
            let mut total = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                total += *pj;
            }
            let mut dot = 0.0;
            for j in 0..nk {
                p[j] /= total;
                dp[j] = gi
                    .iter()
                    .zip(&v.row(j)[vs.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                dot += p[j] * dp[j];
                let dvrow = &mut dvv.row_mut(j)[vs.clone()];
                for (o, &x) in dvrow.iter_mut().zip(gi) {
                    *o += p[j] * x;
                }
            }
            for j in 0..nk {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj: Vec<f64> = k.row(j)[qs.clone()].to_vec();
                for (o, x) in dq.row_mut(i)[qs.clone()].iter_mut().zip(&kj) {
                    *o += ds * x;
                }
                for (o, x) in dk.row_mut(j)[qs.clone()].iter_mut().zip(qi) {
                    *o += ds * x;
                }
            }
        }
    }
    (dq, dk, dvv)
}

impl Backend for Graph {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }
    fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let t = mm(self.val(*a), self.val(*b));
        self.push(t, Op::MatMul(*a, *b))
    }
    fn transpose(&mut self, a: &Var) -> Var {
        let t = self.val(*a).transpose();
        self.push(t, Op::Transpose(*a))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let t = zip(self.val(*a), self.val(*b), |x, y| x + y);
        self.push(t, Op::Add(*a, *b))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let t = zip(self.val(*a), self.val(*b), |x, y| x - y);
        self.push(t, Op::Sub(*a, *b))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let t = zip(self.val(*a), self.val(*b), |x, y| x * y);
        self.push(t, Op::Mul(*a, *b))
    }
    fn add_row(&mut self, a: &Var, row: &Var) -> Var {
        let t = row_broadcast(self.val(*a), self.val(*row), |x, r| x + r);
        self.push(t, Op::AddRow(*a, *row))
    }
    fn mul_row(&mut self, a: &Var, row: &Var) -> Var {
        let t = row_broadcast(self.val(*a), self.val(*row), |x, r| x * r);
        self.push(t, Op::MulRow(*a, *row))
    }
    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let t = self.val(*a).scale(s);
        self.push(t, Op::Scale(*a, s))
    }
    fn add_scalar(&mut self, a: &Var, s: f64) -> Var {
        let t = self.val(*a).map(|x| x + s);
        self.push(t, Op::AddScalar(*a))
    }
    fn rms_norm_groups(&mut self, a: &Var, group: usize) -> Var {
        let t = norm_groups_fwd(self.val(*a), group);
        self.push(t, Op::NormGroups(*a, group))
    }
    fn relu(&mut self, a: &Var) -> Var {
        let t = self.val(*a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(*a))
    }
    fn silu(&mut self, a: &Var) -> Var {
        let t = self.val(*a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(*a))
    }
    fn sdpa(&mut self, q: &Var, k: &Var, v: &Var, n_heads: usize) -> Var {
        let t = sdpa_fwd(self.val(*q), self.val(*k), self.val(*v), n_heads);
        self.push(t, Op::Sdpa(*q, *k, *v, n_heads))
    }
    fn rope(&mut self, a: &Var, positions: &[usize], head_dim: usize) -> Var {
        let t = rope_fwd(self.val(*a), positions, head_dim, 1.0);
        self.push(t, Op::Rope(*a, positions.to_vec(), head_dim))
    }
    fn slice_rows(&mut self, a: &Var, start: usize, end: usize) -> Var {
        let t = self.val(*a).slice_rows(start, end);
        self.push(t, Op::SliceRows(*a, start))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let t = concat_rows_fwd(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>());
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }
    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Var {
        let t = self.val(*a).slice_cols(start, end);
        self.push(t, Op::SliceCols(*a, start))
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let t = concat_cols_fwd(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>());
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }
    fn col_sum(&mut self, a: &Var) -> Var {
        let t = col_sum_fwd(self.val(*a));
        self.push(t, Op::ColSum(*a))
    }
    fn div_col(&mut self, a: &Var, b: &Var) -> Var {
        let t = div_col_fwd(self.val(*a), self.val(*b));
        self.push(t, Op::DivCol(*a, *b))
    }
    fn sum_sq(&mut self, a: &Var) -> Var {
        let t = Tensor::from_parts(vec![1, 1], vec![self.val(*a).sum_sq()]);
        self.push(t, Op::SumSq(*a))
    }
    fn detach(&mut self, a: &Var) -> Var {
        let t = self.val(*a).clone();
        self.push(t, Op::Detach)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grad_check(
        x: &Tensor,
        build: impl Fn(&mut Graph, Var) -> Var,
        eval: impl Fn(&Tensor) -> f64,
    ) {
        let mut g = Graph::new();
        let leaf = g.leaf(x);
        let out = build(&mut g, leaf);
        let loss = g.sum_sq(&out);
        let analytic = g.backward(loss).get(leaf);
        let numeric = finite_diff_grad(|t| eval(t), x, 1e-5).unwrap();
        let scale = numeric.max_abs().max(1.0);
        assert!(
            analytic.max_abs_diff(&numeric) < 1e-6 * scale,
            "analytic {:?}\nnumeric {:?}",
            analytic.data(),
            numeric.data()
        );
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 5], 1.0, &mut r);
        let row = Tensor::randn(&[1, 5], 1.0, &mut r);
        let (w2, row2) = (w.clone(), row.clone());
        grad_check(
            &x,
            move |g, v| {
                let wv = g.constant(w.clone());
                let rv = g.constant(row.clone());
                let y = g.matmul(&v, &wv);
                let y = g.mul_row(&y, &rv);
                let y = g.add_row(&y, &rv);
                g.silu(&y)
            },
            move |t| {
                let mut e = Eval;
                let y = e.matmul(t, &w2);
                let y = e.mul_row(&y, &row2);
                let y = e.add_row(&y, &row2);
                e.silu(&y).sum_sq()
            },
        );
    }

    #[test]
    fn norm_groups_and_rope_grads() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 8], 1.0, &mut r);
        let pos = vec![0, 3, 7];
        let pos2 = pos.clone();
        grad_check(
            &x,
            move |g, v| {
                let n = g.rms_norm_groups(&v, 4);
                let n = g.rope(&n, &pos, 4);
                g.scale(&n, 1.7)
            },
            move |t| {
                let mut e = Eval;
                let n = e.rms_norm_groups(t, 4);
                let n = e.rope(&n, &pos2, 4);
                e.scale(&n, 1.7).sum_sq()
            },
        );
    }

    #[test]
    fn sdpa_grads_all_inputs() {
        let mut r = rng();
        let q = Tensor::randn(&[4, 8], 1.0, &mut r);
        let k = Tensor::randn(&[6, 8], 1.0, &mut r);
        let v = Tensor::randn(&[6, 8], 1.0, &mut r);
        let probe = Tensor::randn(&[4, 8], 1.0, &mut r);
        let all = Tensor::concat_rows(&[&q, &k, &v]).unwrap();
        let split = |g: &mut Graph, a: Var| {
            let q = g.slice_rows(&a, 0, 4);
            let k = g.slice_rows(&a, 4, 10);
            let v = g.slice_rows(&a, 10, 16);
            (q, k, v)
        };
        let p2 = probe.clone();
        grad_check(
            &all,
            move |g, a| {
                let (q, k, v) = split(g, a);
                let o = g.sdpa(&q, &k, &v, 2);
                let p = g.constant(probe.clone());
                g.mul(&o, &p)
            },
            move |t| {
                let mut e = Eval;
                let o = e.sdpa(
                    &t.slice_rows(0, 4),
                    &t.slice_rows(4, 10),
                    &t.slice_rows(10, 16),
                    2,
                );
                e.mul(&o, &p2).sum_sq()
            },
        );
    }

    #[test]
    fn linear_attention_composition_grads() {
        let mut r = rng();
        let x = Tensor::randn(&[5, 4], 1.0, &mut r);
        grad_check(
            &x,
            |b, v| {
                let f = b.relu(&v);
                let ft = b.transpose(&f);
                let s = b.matmul(&ft, &v);
                let num = b.matmul(&f, &s);
                let ks = b.col_sum(&f);
                let kst = b.transpose(&ks);
                let den = b.matmul(&f, &kst);
                let den = b.add_scalar(&den, 0.5);
                let o = b.div_col(&num, &den);
                let c = b.concat_cols(&[o, f]);
                let c = b.slice_cols(&c, 1, 7);
                b.concat_rows(&[c, c])
            },
            |t| {
                let mut b = Eval;
                let f = b.relu(t);
                let ft = b.transpose(&f);
                let s = b.matmul(&ft, t);
                let num = b.matmul(&f, &s);
                let ks = b.col_sum(&f);
                let kst = b.transpose(&ks);
                let den = b.matmul(&f, &kst);
                let den = b.add_scalar(&den, 0.5);
                let o = b.div_col(&num, &den);
                let c = b.concat_cols(&[o, f]);
                let c = b.slice_cols(&c, 1, 7);
                b.concat_rows(&[c.clone(), c]).sum_sq()
            },
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::full(&[2, 2], 3.0);
        let mut g = Graph::new();
        let leaf = g.leaf(&x);
        let d = g.detach(&leaf);
        let y = g.add(&d, &leaf);
        let loss = g.sum_sq(&y);
        let grad = g.backward(loss).get(leaf);
        // only the non-detached path contributes: d/dx (x_d + x)^2 = 2 (x_d + x)
        assert!(grad.max_abs_diff(&Tensor::full(&[2, 2], 12.0)) < 1e-12);
    }
}
