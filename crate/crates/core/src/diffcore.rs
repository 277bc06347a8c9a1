//! Minimal reverse-mode differentiation: a [`Tape`] of 2-D tensor ops,
//! named parameters in a [`ParamStore`], Adam, and `GMC1` checkpoints.
//!
//! Tensors carry an arbitrary shape but every op views them as a matrix
//! with `rows = product of leading dims` and `cols = last dim`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::rc::Rc;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn dims2(&self) -> Vec<usize> {
        vec![self.rows(), self.cols()]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    BroadcastRows(Var),
    RepeatCols(Var, usize),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sqrt(Var),
    Reciprocal(Var),
    SoftmaxLast(Var),
    GroupSoftmax(Var, usize),
    GroupSum(Var, usize),
    GroupMax(Var, Vec<usize>),
    LayerNorm(Var, Vec<f64>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MaxLast(Var, Vec<usize>),
    LogNormRows(Var, bool),
    LogNormCols(Var, bool),
    LogCapRows(Var, Vec<Option<Vec<f64>>>),
    PadSlack(Var),
    LogSinkhorn(Var, Box<SinkhornCache>),
    PolarRotation(Var, Box<PolarCache>),
}

#[derive(Debug)]
struct SinkhornCache {
    skip_last: bool,
    iters: usize,
    path: SinkhornPath,
}

#[derive(Debug)]
enum SinkhornPath {
    /// Normalisers in application order: row steps hold one value per row,
    /// column steps one per column.
    Log(Vec<Vec<f64>>),
    /// `k = exp(A − rowmax)`; every state is `k_ij·eu_i·ev_j` with the row
    /// and column factors recorded after each step.
    Linear {
        k: Vec<f64>,
        row_factors: Vec<Vec<f64>>,
        col_factors: Vec<Vec<f64>>,
    },
}

/// Exponents outside this range leave the linear-domain path.
const LINEAR_EXP_LIMIT: f64 = 600.0;

/// Linear-domain Sinkhorn: returns the output and the cached factors, or
/// `None` when an intermediate scale would leave the safe exponent range.
fn sinkhorn_linear(a: &[f64], r: usize, c: usize, ar: usize, ac: usize, iters: usize) -> Option<(Vec<f64>, SinkhornPath)> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let m: Vec<f64> = a.chunks(c).map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut k = Vec::with_capacity(r * c);
    for (row, mi) in a.chunks(c).zip(&m) {
        for v in row {
            let d = v - mi;
            if d < -LINEAR_EXP_LIMIT {
                return None;
            }
            k.push(d.exp());
        }
    }
    // cumulative log normalisers
    let mut u_cum = vec![0.0; r];
    let mut v_cum = vec![0.0; c];
    let safe = |x: f64| x.is_finite() && x.abs() < LINEAR_EXP_LIMIT;
    let mut eu: Vec<f64> = m.iter().map(|x| x.exp()).collect();
    if m.iter().any(|x| !safe(*x)) {
        return None;
    }
    let mut ev = vec![1.0; c];
    let mut row_factors = Vec::with_capacity(iters);
    let mut col_factors = Vec::with_capacity(iters);
    let mut t = vec![0.0; c];
    for _ in 0..iters {
        for i in 0..ar {
            let krow = &k[i * c..(i + 1) * c];
            let s: f64 = krow.iter().zip(&ev).map(|(x, y)| x * y).sum();
            if !(s > 0.0 && s.is_finite()) {
                return None;
            }
            // U_i + (m_i − U_i + ln S_i)
            u_cum[i] = m[i] + s.ln();
            let e = m[i] - u_cum[i];
            if !safe(e) {
                return None;
            }
            eu[i] = e.exp();
        }
        row_factors.push(eu.clone());
        t.fill(0.0);
        for (krow, f) in k.chunks(c).zip(&eu) {
            t[..ac].iter_mut().zip(krow).for_each(|(acc, x)| *acc += x * f);
        }
        for j in 0..ac {
            if !(t[j] > 0.0 && t[j].is_finite()) {
                return None;
            }
            // V_j + (ln T_j − V_j)
            v_cum[j] = t[j].ln();
            let e = -v_cum[j];
            if !safe(e) {
                return None;
            }
            ev[j] = e.exp();
        }
        col_factors.push(ev.clone());
    }
    let mut out = Vec::with_capacity(r * c);
    for (row, ui) in a.chunks(c).zip(&u_cum) {
        out.extend(row.iter().zip(&v_cum).map(|(x, vj)| x - ui - vj));
    }
    Some((out, SinkhornPath::Linear { k, row_factors, col_factors }))
}

#[derive(Debug)]
struct PolarCache {
    rotation: Matrix3<f64>,
    k_inv: Matrix3<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Records forward values and the ops that produced them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    clamped_polar: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// `c (m×n) += a (m×k) · b (k×n)` with optional transposes of the stored
/// row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by the callers against m, k, n and
    // the strides above address exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of rotation-gradient solves that hit the spectral floor.
    pub fn clamped_polar_count(&self) -> usize {
        self.clamped_polar
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.data.len() != tb.data.len() || ta.cols() != tb.cols() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, node))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| f(*x)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.len() != c {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(&tb.data)
                    .map(move |(x, y)| if mul { x * y } else { x + y })
            })
            .collect();
        let shape = ta.shape.clone();
        let node = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        Ok(self.push(Tensor { shape, data }, node))
    }

    fn col_broadcast(&mut self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.len() != ta.rows() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data
            .chunks(c)
            .zip(&tb.data)
            .flat_map(|(row, y)| row.iter().map(move |x| if mul { x * y } else { x + y }))
            .collect();
        let shape = ta.shape.clone();
        let node = if mul { Op::MulCol(a, b) } else { Op::AddCol(a, b) };
        Ok(self.push(Tensor { shape, data }, node))
    }

    /// `a (R×C) + b (1×C)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, false)
    }

    /// `a (R×C) ⊙ b (1×C)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, b, true)
    }

    /// `a (R×C) + b (R×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.col_broadcast("add_col", a, b, false)
    }

    /// `a (R×C) ⊙ b (R×1)`: scales each row.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.col_broadcast("mul_col", a, b, true)
    }

    /// `a · s` for a 1×1 tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("mul_scalar", self.value(a), ts));
        }
        let k = ts.data[0];
        Ok(self.map(a, |x| x * k, Op::MulScalar(a, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data[i * c + j];
            }
        }
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() || shape.is_empty() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: ta.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: ta.data.clone(),
        };
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Rows `idx[0], idx[1], ...` of `a`; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: ta.dims2(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&ta.data[i * c..(i + 1) * c]);
        }
        let t = Tensor {
            shape: vec![idx.len(), c],
            data,
        };
        Ok(self.push(t, Op::GatherRows(a, idx)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor {
            shape: vec![r, cols],
            data,
        };
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            data.extend_from_slice(&t.data);
        }
        let t = Tensor {
            shape: vec![data.len() / c, c],
            data,
        };
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.dims2(),
                rhs: vec![start, end],
            });
        }
        let data = ta
            .data
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let t = Tensor {
            shape: vec![ta.rows(), end - start],
            data,
        };
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    /// Expands a `1×C` tensor to `n×C`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: ta.dims2(),
                rhs: vec![n, ta.cols()],
            });
        }
        let c = ta.cols();
        let data = ta.data.iter().copied().cycle().take(n * c).collect();
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::BroadcastRows(a)))
    }

    /// Repeats each column `r` times in place: `[a, b] → [a, a, b, b]` for r = 2.
    pub fn repeat_cols(&mut self, a: Var, r: usize) -> Result<Var> {
        if r == 0 {
            return Err(invalid("repeat_cols with r = 0"));
        }
        let ta = self.value(a);
        let c = ta.cols();
        let data = ta
            .data
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, r))
            .collect();
        let t = Tensor {
            shape: vec![ta.rows(), c * r],
            data,
        };
        Ok(self.push(t, Op::RepeatCols(a, r)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / x, Op::Reciprocal(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::SoftmaxLast(a))
    }

    fn check_groups(&self, op: &'static str, a: Var, k: usize) -> Result<()> {
        let ta = self.value(a);
        if k == 0 || ta.rows() % k != 0 {
            return Err(Error::Shape {
                op,
                lhs: ta.dims2(),
                rhs: vec![k],
            });
        }
        Ok(())
    }

    /// Softmax down each column within consecutive blocks of `k` rows
    /// (one block per KNN centre).
    pub fn group_softmax(&mut self, a: Var, k: usize) -> Result<Var> {
        self.check_groups("group_softmax", a, k)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        for block in data.chunks_mut(k * c) {
            for ch in 0..c {
                let m = (0..k).map(|j| block[j * c + ch]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..k {
                    let e = (block[j * c + ch] - m).exp();
                    block[j * c + ch] = e;
                    s += e;
                }
                for j in 0..k {
                    block[j * c + ch] /= s;
                }
            }
        }
        let shape = vec![ta.rows(), c];
        Ok(self.push(Tensor { shape, data }, Op::GroupSoftmax(a, k)))
    }

    /// Sums consecutive blocks of `k` rows: `(N·k)×C → N×C`.
    pub fn group_sum(&mut self, a: Var, k: usize) -> Result<Var> {
        self.check_groups("group_sum", a, k)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = vec![0.0; ta.rows() / k * c];
        for (out, block) in data.chunks_mut(c).zip(ta.data.chunks(k * c)) {
            for row in block.chunks(c) {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
        }
        let shape = vec![ta.rows() / k, c];
        Ok(self.push(Tensor { shape, data }, Op::GroupSum(a, k)))
    }

    /// Column-wise max over consecutive blocks of `k` rows.
    pub fn group_max(&mut self, a: Var, k: usize) -> Result<Var> {
        self.check_groups("group_max", a, k)?;
        let ta = self.value(a);
        let c = ta.cols();
        let groups = ta.rows() / k;
        let mut data = vec![f64::NEG_INFINITY; groups * c];
        let mut arg = vec![0usize; groups * c];
        for g in 0..groups {
            for j in 0..k {
                let r = g * k + j;
                for ch in 0..c {
                    let v = ta.data[r * c + ch];
                    if v > data[g * c + ch] {
                        data[g * c + ch] = v;
                        arg[g * c + ch] = r;
                    }
                }
            }
        }
        let shape = vec![groups, c];
        Ok(self.push(Tensor { shape, data }, Op::GroupMax(a, arg)))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        let mut inv = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv.push(is);
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::LayerNorm(a, inv))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Sums over rows: `R×C → 1×C`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = vec![0.0; c];
        for row in ta.data.chunks(c) {
            data.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        self.push(Tensor { shape: vec![1, c], data }, Op::SumRows(a))
    }

    /// Sums over columns: `R×C → R×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data.chunks(ta.cols()).map(|r| r.iter().sum()).collect();
        let shape = vec![data.len(), 1];
        self.push(Tensor { shape, data }, Op::SumCols(a))
    }

    /// Max over the last dimension: `R×C → R×1`.
    pub fn max_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.rows());
        let mut arg = Vec::with_capacity(ta.rows());
        for (i, row) in ta.data.chunks(c).enumerate() {
            let (j, v) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            data.push(v);
            arg.push(i * c + j);
        }
        let shape = vec![data.len(), 1];
        self.push(Tensor { shape, data }, Op::MaxLast(a, arg))
    }

    /// Log-domain row normalisation; with `skip_last` the final row (slack)
    /// is passed through unchanged.
    pub fn log_normalize_rows(&mut self, a: Var, skip_last: bool) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = ta.data.clone();
        let active = if skip_last { r.saturating_sub(1) } else { r };
        for row in data.chunks_mut(c).take(active) {
            let l = logsumexp(row.iter().copied());
            if l.is_finite() {
                row.iter_mut().for_each(|x| *x -= l);
            }
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::LogNormRows(a, skip_last))
    }

    /// Log-domain column normalisation; `skip_last` passes the slack column.
    pub fn log_normalize_cols(&mut self, a: Var, skip_last: bool) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = ta.data.clone();
        let active = if skip_last { c.saturating_sub(1) } else { c };
        for j in 0..active {
            let l = logsumexp((0..r).map(|i| ta.data[i * c + j]));
            if l.is_finite() {
                for i in 0..r {
                    data[i * c + j] -= l;
                }
            }
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::LogNormCols(a, skip_last))
    }

    /// `iters` alternating row and column log-normalisations fused into one
    /// node. Matches repeated [`Tape::log_normalize_rows`] /
    /// [`Tape::log_normalize_cols`] but walks memory row by row and stores
    /// only the normaliser vectors.
    pub fn log_sinkhorn(&mut self, a: Var, iters: usize, skip_last: bool) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let ar = if skip_last { r.saturating_sub(1) } else { r };
        let ac = if skip_last { c.saturating_sub(1) } else { c };
        if let Some((data, path)) = sinkhorn_linear(&ta.data, r, c, ar, ac, iters) {
            let shape = ta.shape.clone();
            let cache = SinkhornCache { skip_last, iters, path };
            return self.push(Tensor { shape, data }, Op::LogSinkhorn(a, Box::new(cache)));
        }
        let mut x = ta.data.clone();
        let mut steps = Vec::with_capacity(2 * iters);
        let mut cmax = vec![f64::NEG_INFINITY; ac];
        let mut csum = vec![0.0; ac];
        for _ in 0..iters {
            let mut u = vec![0.0; r];
            for (i, row) in x.chunks_mut(c).take(ar).enumerate() {
                let l = logsumexp(row.iter().copied());
                if l.is_finite() {
                    row.iter_mut().for_each(|v| *v -= l);
                    u[i] = l;
                }
            }
            steps.push(u);
            cmax.fill(f64::NEG_INFINITY);
            csum.fill(0.0);
            for row in x.chunks(c) {
                for (m, v) in cmax.iter_mut().zip(row) {
                    *m = m.max(*v);
                }
            }
            for row in x.chunks(c) {
                for ((s, m), v) in csum.iter_mut().zip(&cmax).zip(row) {
                    if *m != f64::NEG_INFINITY {
                        *s += (v - m).exp();
                    }
                }
            }
            let mut v = vec![0.0; c];
            for j in 0..ac {
                let l = if cmax[j] == f64::NEG_INFINITY { cmax[j] } else { cmax[j] + csum[j].ln() };
                if l.is_finite() {
                    v[j] = l;
                }
            }
            for row in x.chunks_mut(c) {
                row[..ac].iter_mut().zip(&v).for_each(|(x, l)| *x -= l);
            }
            steps.push(v);
        }
        let shape = ta.shape.clone();
        let cache = SinkhornCache {
            skip_last,
            iters,
            path: SinkhornPath::Log(steps),
        };
        self.push(Tensor { shape, data: x }, Op::LogSinkhorn(a, Box::new(cache)))
    }

    /// For a slack-padded log matrix: rescales every non-slack row whose
    /// non-slack mass exceeds 1 so that it equals 1.
    pub fn log_cap_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = ta.data.clone();
        let mut probs = Vec::with_capacity(r.saturating_sub(1));
        for i in 0..r.saturating_sub(1) {
            let row = &mut data[i * c..(i + 1) * c];
            let l = logsumexp(row[..c - 1].iter().copied());
            if l > 0.0 {
                let p = row[..c - 1].iter().map(|x| (x - l).exp()).collect();
                row.iter_mut().for_each(|x| *x -= l);
                probs.push(Some(p));
            } else {
                probs.push(None);
            }
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::LogCapRows(a, probs))
    }

    /// Appends one slack row and column filled with `value` (no gradient
    /// flows into the slack entries).
    pub fn pad_slack(&mut self, a: Var, value: f64) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity((r + 1) * (c + 1));
        for row in ta.data.chunks(c) {
            data.extend_from_slice(row);
            data.push(value);
        }
        data.extend(std::iter::repeat_n(value, c + 1));
        let t = Tensor {
            shape: vec![r + 1, c + 1],
            data,
        };
        self.push(t, Op::PadSlack(a))
    }

    /// Rotation `R = V·diag(1, 1, det(VUᵀ))·Uᵀ` maximising `tr(R·H)` for a
    /// 3×3 cross-covariance `H = U·S·Vᵀ`.
    pub fn polar_rotation(&mut self, h: Var) -> Result<Var> {
        let th = self.value(h);
        if th.len() != 9 || th.cols() != 3 {
            return Err(Error::Shape {
                op: "polar_rotation",
                lhs: th.shape.clone(),
                rhs: vec![3, 3],
            });
        }
        let hm = Matrix3::from_row_slice(&th.data);
        let (rotation, sv) = kabsch_rotation(&hm)?;
        let m = hm * rotation;
        let k = Matrix3::identity() * m.trace() - (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(k);
        let floor = 1e-6 * sv[0].max(1e-300);
        let mut clamped = false;
        let inv_vals = eig.eigenvalues.map(|l| {
            if l < floor {
                clamped = true;
                1.0 / floor
            } else {
                1.0 / l
            }
        });
        if clamped {
            self.clamped_polar += 1;
            log::debug!("rotation gradient clamped: near-degenerate spectrum {sv:?}");
        }
        let k_inv = eig.eigenvectors * Matrix3::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        let data = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| rotation[(i, j)]).collect();
        let t = Tensor {
            shape: vec![3, 3],
            data,
        };
        Ok(self.push(t, Op::PolarRotation(h, Box::new(PolarCache { rotation, k_inv }))))
    }

    /// Reverse pass from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: tl.shape.clone(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g);
                accumulate(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g);
                accumulate_owned(&mut grads[b.0], g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                accumulate_owned(&mut grads[a.0], g.iter().zip(&tb.data).map(|(x, y)| x * y).collect());
                accumulate_owned(&mut grads[b.0], g.iter().zip(&ta.data).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => accumulate_owned(&mut grads[a.0], g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::AddRow(a, b) => {
                accumulate(&mut grads[a.0], g);
                let c = out.cols();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::AddCol(a, b) => {
                accumulate(&mut grads[a.0], g);
                let gb = g.chunks(out.cols()).map(|r| r.iter().sum()).collect();
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = vec![0.0; c];
                for (grow, arow) in g.chunks(c).zip(ta.data.chunks(c)) {
                    for j in 0..c {
                        ga.push(grow[j] * tb.data[j]);
                        gb[j] += grow[j] * arow[j];
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::MulCol(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(tb.len());
                for ((grow, arow), s) in g.chunks(c).zip(ta.data.chunks(c)).zip(&tb.data) {
                    ga.extend(grow.iter().map(|x| x * s));
                    gb.push(grow.iter().zip(arow).map(|(x, y)| x * y).sum());
                }
                accumulate_owned(&mut grads[a.0], ga);
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::MulScalar(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let k = ts.data[0];
                accumulate_owned(&mut grads[a.0], g.iter().map(|x| x * k).collect());
                let gs = g.iter().zip(&ta.data).map(|(x, y)| x * y).sum();
                accumulate_owned(&mut grads[s.0], vec![gs]);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &tb.data, true, &mut ga);
                accumulate_owned(&mut grads[a.0], ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &ta.data, true, g, false, &mut gb);
                accumulate_owned(&mut grads[b.0], gb);
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::GatherRows(a, idx) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (row, &i) in g.chunks(c).zip(idx.iter()) {
                    ga[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let c = out.cols();
                let mut off = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    let gp = g.chunks(c).flat_map(|row| row[off..off + pc].iter().copied()).collect();
                    accumulate_owned(&mut grads[p.0], gp);
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    accumulate(&mut grads[p.0], &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let (c, w) = (ta.cols(), out.cols());
                let mut ga = vec![0.0; ta.len()];
                for (dst, src) in ga.chunks_mut(c).zip(g.chunks(w)) {
                    dst[*start..start + w].copy_from_slice(src);
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::BroadcastRows(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; c];
                for row in g.chunks(c) {
                    ga.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::RepeatCols(a, r) => {
                let ga = g.chunks(*r).map(|ch| ch.iter().sum()).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Exp(a) => {
                accumulate_owned(&mut grads[a.0], g.iter().zip(&out.data).map(|(x, y)| x * y).collect())
            }
            Op::Ln(a) => {
                accumulate_owned(&mut grads[a.0], g.iter().zip(&val(*a).data).map(|(x, y)| x / y).collect())
            }
            Op::Abs(a) => {
                let ga = g.iter().zip(&val(*a).data).map(|(x, v)| x * v.signum() * (*v != 0.0) as u8 as f64).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Sqrt(a) => {
                accumulate_owned(&mut grads[a.0], g.iter().zip(&out.data).map(|(x, y)| 0.5 * x / y).collect())
            }
            Op::Reciprocal(a) => {
                accumulate_owned(&mut grads[a.0], g.iter().zip(&out.data).map(|(x, y)| -x * y * y).collect())
            }
            Op::SoftmaxLast(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(out.data.chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    ga.extend(grow.iter().zip(yrow).map(|(x, y)| y * (x - dot)));
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::GroupSoftmax(a, k) => {
                let c = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gb, yb), ob) in g.chunks(k * c).zip(out.data.chunks(k * c)).zip(ga.chunks_mut(k * c)) {
                    for ch in 0..c {
                        let dot: f64 = (0..*k).map(|j| gb[j * c + ch] * yb[j * c + ch]).sum();
                        for j in 0..*k {
                            ob[j * c + ch] = yb[j * c + ch] * (gb[j * c + ch] - dot);
                        }
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::GroupSum(a, k) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len() * k);
                for row in g.chunks(c) {
                    for _ in 0..*k {
                        ga.extend_from_slice(row);
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::GroupMax(a, arg) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (o, (&r, x)) in arg.iter().zip(g).enumerate() {
                    ga[r * c + o % c] += x;
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::LayerNorm(a, inv) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for ((grow, yrow), is) in g.chunks(c).zip(out.data.chunks(c)).zip(inv) {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / c as f64;
                    ga.extend(grow.iter().zip(yrow).map(|(x, y)| is * (x - mg - y * mgy)));
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::SumAll(a) => accumulate_owned(&mut grads[a.0], vec![g[0]; val(*a).len()]),
            Op::SumRows(a) => {
                let ta = val(*a);
                let ga = g.iter().copied().cycle().take(ta.len()).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let ga = g.iter().flat_map(|x| std::iter::repeat_n(*x, c)).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::MaxLast(a, arg) => {
                let mut ga = vec![0.0; val(*a).len()];
                for (&i, x) in arg.iter().zip(g) {
                    ga[i] += x;
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::LogNormRows(a, skip_last) => {
                let (r, c) = (out.rows(), out.cols());
                let active = if *skip_last { r.saturating_sub(1) } else { r };
                let mut ga = g.to_vec();
                for i in 0..active {
                    let grow = &g[i * c..(i + 1) * c];
                    let s: f64 = grow.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] -= out.data[i * c + j].exp() * s;
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::LogNormCols(a, skip_last) => {
                let (r, c) = (out.rows(), out.cols());
                let active = if *skip_last { c.saturating_sub(1) } else { c };
                let mut ga = g.to_vec();
                for j in 0..active {
                    let s: f64 = (0..r).map(|i| g[i * c + j]).sum();
                    for i in 0..r {
                        ga[i * c + j] -= out.data[i * c + j].exp() * s;
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::LogSinkhorn(a, cache) => {
                let (r, c) = (out.rows(), out.cols());
                let ar = if cache.skip_last { r.saturating_sub(1) } else { r };
                let ac = if cache.skip_last { c.saturating_sub(1) } else { c };
                let mut ga = g.to_vec();
                let mut colsum = vec![0.0; ac];
                let steps = match &cache.path {
                    SinkhornPath::Log(steps) => steps,
                    SinkhornPath::Linear { k, row_factors, col_factors } => {
                        let ones = vec![1.0; c];
                        for it in (0..cache.iters).rev() {
                            let eu = &row_factors[it];
                            let ev = &col_factors[it];
                            colsum.fill(0.0);
                            for row in ga.chunks(c) {
                                colsum.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                            }
                            for ((grow, krow), f) in ga.chunks_mut(c).zip(k.chunks(c)).zip(eu) {
                                for j in 0..ac {
                                    grow[j] -= krow[j] * f * ev[j] * colsum[j];
                                }
                            }
                            let ev = if it == 0 { &ones } else { &col_factors[it - 1] };
                            for ((grow, krow), f) in ga.chunks_mut(c).zip(k.chunks(c)).zip(eu).take(ar) {
                                let sum: f64 = grow.iter().sum();
                                let w = f * sum;
                                for ((gv, kv), e) in grow.iter_mut().zip(krow).zip(ev) {
                                    *gv -= kv * e * w;
                                }
                            }
                        }
                        accumulate_owned(&mut grads[a.0], ga);
                        return;
                    }
                };
                let mut y = out.data.clone();
                for (s, norm) in steps.iter().enumerate().rev() {
                    if s % 2 == 1 {
                        colsum.fill(0.0);
                        for row in ga.chunks(c) {
                            colsum.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        for (grow, yrow) in ga.chunks_mut(c).zip(y.chunks_mut(c)) {
                            for j in 0..ac {
                                grow[j] -= yrow[j].exp() * colsum[j];
                                yrow[j] += norm[j];
                            }
                        }
                    } else {
                        for (i, (grow, yrow)) in ga.chunks_mut(c).zip(y.chunks_mut(c)).take(ar).enumerate() {
                            let sum: f64 = grow.iter().sum();
                            for (gv, yv) in grow.iter_mut().zip(yrow.iter_mut()) {
                                *gv -= yv.exp() * sum;
                                *yv += norm[i];
                            }
                        }
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::LogCapRows(a, probs) => {
                let c = out.cols();
                let mut ga = g.to_vec();
                for (i, p) in probs.iter().enumerate() {
                    if let Some(p) = p {
                        let s: f64 = g[i * c..(i + 1) * c].iter().sum();
                        for (j, pj) in p.iter().enumerate() {
                            ga[i * c + j] -= pj * s;
                        }
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::PadSlack(a) => {
                let c = out.cols();
                let ga = g
                    .chunks(c)
                    .take(out.rows() - 1)
                    .flat_map(|row| row[..c - 1].iter().copied())
                    .collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::PolarRotation(h, cache) => {
                let gm = Matrix3::from_row_slice(g);
                let r = cache.rotation;
                let am = r.transpose() * gm;
                let av = nalgebra::Vector3::new(
                    am[(2, 1)] - am[(1, 2)],
                    am[(0, 2)] - am[(2, 0)],
                    am[(1, 0)] - am[(0, 1)],
                );
                let b = cache.k_inv * av;
                let bm = Matrix3::new(0.0, b[2], -b[1], -b[2], 0.0, b[0], b[1], -b[0], 0.0);
                let gh = bm * r.transpose();
                let gh: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| gh[(i, j)])).collect();
                accumulate_owned(&mut grads[h.0], gh);
            }
        }
    }

    /// Gradients of every parameter bound on this tape, plus zeros for
    /// parameters of `store` the loss never reached.
    pub fn param_grads(&self, store: &ParamStore, grads: &Gradients) -> GradMap {
        let mut out = BTreeMap::new();
        for (name, t) in store.iter() {
            let data = self
                .params
                .get(name)
                .and_then(|v| grads.get(*v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(
                name.clone(),
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            );
        }
        GradMap(out)
    }
}

/// Proper rotation maximising `tr(R·H)`, with the singular values of `H`.
pub(crate) fn kabsch_rotation(h: &Matrix3<f64>) -> Result<(Matrix3<f64>, nalgebra::Vector3<f64>)> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross-covariance".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // nalgebra does not sort; order descending for the rank test
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    sv = nalgebra::Vector3::new(sv[order[0]], sv[order[1]], sv[order[2]]);
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(format!(
            "cross-covariance is rank deficient (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let mut diag = nalgebra::Vector3::new(1.0, 1.0, 1.0);
    // flip the direction of the smallest singular value
    diag[order[2]] = d;
    Ok((v * Matrix3::from_diagonal(&diag) * u.transpose(), sv))
}

/// Parameter gradients keyed by name.
#[derive(Debug, Clone, Default)]
pub struct GradMap(pub BTreeMap<String, Tensor>);

impl GradMap {
    pub fn add_assign(&mut self, other: &GradMap) -> Result<()> {
        if self.0.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        for (name, g) in &other.0 {
            let mine = self
                .0
                .get_mut(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
            if mine.shape != g.shape {
                return Err(shape_err("grad_accumulate", mine, g));
            }
            mine.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Named parameter tensors plus the seed they were initialised from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(invalid(format!("duplicate parameter {name}")));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    /// Fan-in scaled uniform weight `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; n])?)
    }

    /// Checks that every parameter has the shape listed in `expected`.
    pub fn check_layout(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in expected.iter() {
            match self.get(name) {
                Some(mine) if mine.shape == t.shape => {}
                Some(mine) => {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        mine.shape, t.shape
                    )))
                }
                None => return Err(Error::ConfigMismatch(format!("missing parameter {name}"))),
            }
        }
        if let Some(extra) = self.params.keys().find(|k| expected.get(k).is_none()) {
            return Err(Error::ConfigMismatch(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, g) in &grads.0 {
            let p = store
                .get(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape != g.shape {
                return Err(shape_err("adam_step", p, g));
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in &grads.0 {
            let p = store.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

const GMC_MAGIC: &[u8; 4] = b"GMC1";

/// Writes `GMC1`: magic, u32 count, then per parameter u32 name length,
/// name bytes, u32 rank, u32 dims, f32 payload. All little-endian.
pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(GMC_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GMC_MAGIC {
        return Err(Error::Format("missing GMC1 magic".into()));
    }
    let count = u32_of(&mut r)?;
    let mut store = ParamStore::new(0);
    for _ in 0..count {
        let len = u32_of(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = u32_of(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| u32_of(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
