//! Dense 2-D tensors recorded on a define-by-run tape with reverse-mode
//! differentiation.
//!
//! Every value lives in a [`Graph`]; operations append a node and return a
//! [`Var`] handle. A graph is rebuilt for each forward pass, so recurrent
//! computations of any length unroll naturally. Vectors are `1 x n` rows and
//! batched quantities are `M x n` with one sentence per row.
//!
//! Broadcasting is limited to two explicit forms: a `1 x n` row added to every
//! row of a matrix ([`Graph::add_row`]) and an `M x 1` column scaling every
//! column ([`Graph::mul_col`]). Anything else with mismatched shapes is a
//! [`Error::Dimension`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};
use crate::params::ParameterStore;

/// Numeric precision of stored values.
///
/// Arithmetic is carried out in 64-bit; under `F32` every stored result is
/// rounded to the nearest 32-bit float, which is what gets checkpointed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::contract(format!("unknown precision `{s}` (expected f32 or f64)"))),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>, Axis),
    Mean(Var, Axis),
    Sum(Var, Axis),
    SumAll(Var),
    Lookup(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Column(Var, usize),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A differentiation tape.
#[derive(Debug)]
pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    bound: HashMap<String, Var>,
    param_leaves: Vec<(Var, String)>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            param_leaves: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, mut value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.precision.round_slice(&mut value);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_data(rows: usize, cols: usize, data: &[f64]) -> Result<()> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::Dimension {
                op: "leaf",
                left: Shape(rows, cols),
                right: Shape(data.len(), 1),
            });
        }
        Ok(())
    }

    /// Differentiable input.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        Self::check_data(rows, cols, &data)?;
        Ok(self.push(rows, cols, data, Op::Leaf, true))
    }

    /// Input that never receives an adjoint (masks, noise, targets).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        Self::check_data(rows, cols, &data)?;
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    /// Binds a named parameter of `store` into this graph, once per graph.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = self.push(p.rows, p.cols, p.value.clone(), Op::Leaf, true);
        self.bound.insert(name.to_string(), v);
        self.param_leaves.push((v, name.to_string()));
        Ok(v)
    }

    /// Parameters bound into this graph, in binding order.
    pub fn param_leaves(&self) -> &[(Var, String)] {
        &self.param_leaves
    }

    pub fn shape(&self, v: Var) -> Shape {
        let n = &self.nodes[v.0];
        Shape(n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// The single entry of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let n = &self.nodes[v.0];
        &n.value[r * n.cols..(r + 1) * n.cols]
    }

    /// Accumulated adjoint of `v`; zeros when nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op, left: sa, right: sb });
        }
        Ok(sa)
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `a [m x k] · b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (Shape(m, k), Shape(k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: Shape(m, k),
                right: Shape(k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    /// `a [m x k] · bᵀ` for `b [n x k]`; the usual `x · Wᵀ` of a layer whose
    /// weight is stored as `[out x in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (Shape(m, k), Shape(n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: Shape(m, k),
                right: Shape(n, k2),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), rg))
    }

    // ── element-wise ─────────────────────────────────────────────────

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let Shape(m, n) = self.same_shape(op_name, a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (Shape(m, n), sr) = (self.shape(a), self.shape(r));
        if sr != Shape(1, n) {
            return Err(Error::Dimension {
                op: "add_row",
                left: Shape(m, n),
                right: sr,
            });
        }
        let rv = &self.nodes[r.0].value;
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % n])
            .collect();
        let rg = self.rg(&[a, r]);
        Ok(self.push(m, n, out, Op::AddRow(a, r), rg))
    }

    /// Multiplies row `i` of `a` by entry `i` of the `m x 1` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (Shape(m, n), sc) = (self.shape(a), self.shape(c));
        if sc != Shape(m, 1) {
            return Err(Error::Dimension {
                op: "mul_col",
                left: Shape(m, n),
                right: sc,
            });
        }
        let cv = &self.nodes[c.0].value;
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv[i / n])
            .collect();
        let rg = self.rg(&[a, c]);
        Ok(self.push(m, n, out, Op::MulCol(a, c), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let Shape(m, n) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(m, n, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[a.0].value.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    // ── normalisation ────────────────────────────────────────────────

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax restricted to positions where `mask` is nonzero;
    /// masked entries come out exactly zero. Every row needs at least one
    /// unmasked entry.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let Shape(m, n) = self.shape(x);
        if mask.len() != m * n {
            return Err(Error::Dimension {
                op: "masked_softmax_rows",
                left: Shape(m, n),
                right: Shape(mask.len(), 1),
            });
        }
        for r in 0..m {
            if mask[r * n..(r + 1) * n].iter().all(|&v| v == 0.0) {
                return Err(Error::contract(format!("row {r} is fully masked")));
            }
        }
        Ok(self.softmax_impl(x, Some(mask)))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[f64]>) -> Var {
        let Shape(m, n) = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let live = |j: usize| mask.is_none_or(|mk| mk[r * n + j] != 0.0);
            let row = &xv[r * n..(r + 1) * n];
            let mx = (0..n).filter(|&j| live(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (row[j] - mx).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o /= z;
            }
        }
        let rg = self.rg(&[x]);
        self.push(m, n, out, Op::Softmax(x), rg)
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let Shape(m, n) = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                out[r * n + j] = row[j] - lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(m, n, out, Op::LogSoftmax(x), rg)
    }

    // ── structural ───────────────────────────────────────────────────

    /// Stacks rows (`Axis::Rows`) or columns (`Axis::Cols`).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let Shape(m0, n0) = self.shape(first);
        for &p in &parts[1..] {
            let Shape(m, n) = self.shape(p);
            let ok = match axis {
                Axis::Rows => n == n0,
                Axis::Cols => m == m0,
            };
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    left: Shape(m0, n0),
                    right: Shape(m, n),
                });
            }
        }
        let (m, n, out) = match axis {
            Axis::Rows => {
                let mut out = Vec::new();
                let mut m = 0;
                for &p in parts {
                    out.extend_from_slice(&self.nodes[p.0].value);
                    m += self.nodes[p.0].rows;
                }
                (m, n0, out)
            }
            Axis::Cols => {
                let n: usize = parts.iter().map(|p| self.nodes[p.0].cols).sum();
                let mut out = Vec::with_capacity(m0 * n);
                for r in 0..m0 {
                    for &p in parts {
                        out.extend_from_slice(self.row(p, r));
                    }
                }
                (m0, n, out)
            }
        };
        let rg = self.rg(parts);
        Ok(self.push(m, n, out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Mean over rows (giving `1 x n`) or over columns (giving `m x 1`).
    pub fn mean_axis(&mut self, x: Var, axis: Axis) -> Var {
        let Shape(m, n) = self.shape(x);
        let (r, c, mut out) = self.reduce(x, axis);
        let d = match axis {
            Axis::Rows => m,
            Axis::Cols => n,
        } as f64;
        out.iter_mut().for_each(|v| *v /= d);
        let rg = self.rg(&[x]);
        self.push(r, c, out, Op::Mean(x, axis), rg)
    }

    /// Sum over rows (giving `1 x n`) or over columns (giving `m x 1`).
    pub fn sum_axis(&mut self, x: Var, axis: Axis) -> Var {
        let (r, c, out) = self.reduce(x, axis);
        let rg = self.rg(&[x]);
        self.push(r, c, out, Op::Sum(x, axis), rg)
    }

    fn reduce(&self, x: Var, axis: Axis) -> (usize, usize, Vec<f64>) {
        let Shape(m, n) = self.shape(x);
        let xv = &self.nodes[x.0].value;
        match axis {
            Axis::Rows => {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for j in 0..n {
                        out[j] += xv[r * n + j];
                    }
                }
                (1, n, out)
            }
            Axis::Cols => (m, 1, (0..m).map(|r| xv[r * n..(r + 1) * n].iter().sum()).collect()),
        }
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(&[x]);
        self.push(1, 1, vec![s], Op::SumAll(x), rg)
    }

    /// Gathers rows `ids` of an embedding `table [V x d]`.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let Shape(v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::contract("lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            out.extend_from_slice(self.row(table, id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(ids.len(), d, out, Op::Lookup(table, ids.to_vec()), rg))
    }

    /// Picks entry `idx[i]` from row `i`, giving `m x 1`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let Shape(m, n) = self.shape(x);
        if idx.len() != m {
            return Err(Error::Dimension {
                op: "gather",
                left: Shape(m, n),
                right: Shape(idx.len(), 1),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(m);
        for (r, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::Vocabulary { id: j, size: n });
            }
            out.push(xv[r * n + j]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(m, 1, out, Op::Gather(x, idx.to_vec()), rg))
    }

    /// Column `j` of `x` as `m x 1`.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let Shape(m, n) = self.shape(x);
        if j >= n {
            return Err(Error::Dimension {
                op: "column",
                left: Shape(m, n),
                right: Shape(m, j + 1),
            });
        }
        let xv = &self.nodes[x.0].value;
        let out = (0..m).map(|r| xv[r * n + j]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(m, 1, out, Op::Column(x, j), rg))
    }

    /// Affine layer `x · Wᵀ + b` with `w [out x in]` and `b [1 x out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Propagates adjoints from the `1 x 1` node `loss` to every ancestor.
    /// Adjoints add onto whatever previous calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s != Shape(1, 1) {
            return Err(Error::contract(format!("backward needs a scalar loss, got {s}")));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            self.propagate(i, &g, &mut adj);
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), Vec::new());
            }
            let acc = &mut self.grads[i];
            if acc.is_empty() {
                *acc = g;
            } else {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        let y = &node.value;
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut adj[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; nodes[v.0].value.len()];
            }
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = nodes[a.0].cols;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G·Bᵀ
                send(*a, &mut |da| {
                    for r in 0..m {
                        for t in 0..k {
                            da[r * k + t] += dot(&g[r * n..(r + 1) * n], &bv[t * n..(t + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ·G
                send(*b, &mut |db| {
                    for r in 0..m {
                        for t in 0..k {
                            let a_rt = av[r * k + t];
                            if a_rt != 0.0 {
                                axpy(a_rt, &g[r * n..(r + 1) * n], &mut db[t * n..(t + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let k = nodes[a.0].cols;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G·B
                send(*a, &mut |da| {
                    for r in 0..m {
                        for j in 0..n {
                            let gr = g[r * n + j];
                            if gr != 0.0 {
                                axpy(gr, &bv[j * k..(j + 1) * k], &mut da[r * k..(r + 1) * k]);
                            }
                        }
                    }
                });
                // dB = Gᵀ·A
                send(*b, &mut |db| {
                    for r in 0..m {
                        for j in 0..n {
                            let gr = g[r * n + j];
                            if gr != 0.0 {
                                axpy(gr, &av[r * k..(r + 1) * k], &mut db[j * k..(j + 1) * k]);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |d| axpy(1.0, g, d));
                send(*b, &mut |d| axpy(1.0, g, d));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |d| axpy(1.0, g, d));
                send(*b, &mut |d| axpy(-1.0, g, d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                send(*a, &mut |d| d.iter_mut().enumerate().for_each(|(t, x)| *x += g[t] * bv[t]));
                send(*b, &mut |d| d.iter_mut().enumerate().for_each(|(t, x)| *x += g[t] * av[t]));
            }
            Op::AddRow(a, r) => {
                send(*a, &mut |d| axpy(1.0, g, d));
                send(*r, &mut |d| {
                    for (t, gv) in g.iter().enumerate() {
                        d[t % n] += gv;
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (&nodes[a.0].value, &nodes[c.0].value);
                send(*a, &mut |d| d.iter_mut().enumerate().for_each(|(t, x)| *x += g[t] * cv[t / n]));
                send(*c, &mut |d| {
                    for r in 0..m {
                        d[r] += dot(&g[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Scale(a, k) => send(*a, &mut |d| axpy(*k, g, d)),
            Op::AddScalar(a) => send(*a, &mut |d| axpy(1.0, g, d)),
            Op::Tanh(a) => send(*a, &mut |d| {
                d.iter_mut().enumerate().for_each(|(t, x)| *x += g[t] * (1.0 - y[t] * y[t]))
            }),
            Op::Sigmoid(a) => send(*a, &mut |d| {
                d.iter_mut().enumerate().for_each(|(t, x)| *x += g[t] * y[t] * (1.0 - y[t]))
            }),
            Op::Exp(a) => send(*a, &mut |d| d.iter_mut().enumerate().for_each(|(t, x)| *x += g[t] * y[t])),
            Op::Log(a) => {
                let av = &nodes[a.0].value;
                send(*a, &mut |d| d.iter_mut().enumerate().for_each(|(t, x)| *x += g[t] / av[t]));
            }
            Op::Softmax(a) => send(*a, &mut |d| {
                for r in 0..m {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let s = dot(gr, yr);
                    for j in 0..n {
                        d[r * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }),
            Op::LogSoftmax(a) => send(*a, &mut |d| {
                for r in 0..m {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }),
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        send(*p, &mut |d| axpy(1.0, &g[off..off + len], d));
                        off += len;
                    }
                }
                Axis::Cols => {
                    let mut col = 0;
                    for p in parts {
                        let pc = nodes[p.0].cols;
                        send(*p, &mut |d| {
                            for r in 0..m {
                                axpy(1.0, &g[r * n + col..r * n + col + pc], &mut d[r * pc..(r + 1) * pc]);
                            }
                        });
                        col += pc;
                    }
                }
            },
            Op::Mean(a, axis) | Op::Sum(a, axis) => {
                let (am, an) = (nodes[a.0].rows, nodes[a.0].cols);
                let scale = match (&node.op, axis) {
                    (Op::Mean(..), Axis::Rows) => 1.0 / am as f64,
                    (Op::Mean(..), Axis::Cols) => 1.0 / an as f64,
                    _ => 1.0,
                };
                send(*a, &mut |d| {
                    for r in 0..am {
                        for j in 0..an {
                            let gv = match axis {
                                Axis::Rows => g[j],
                                Axis::Cols => g[r],
                            };
                            d[r * an + j] += scale * gv;
                        }
                    }
                });
            }
            Op::SumAll(a) => send(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Lookup(table, ids) => send(*table, &mut |d| {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * n..(r + 1) * n], &mut d[id * n..(id + 1) * n]);
                }
            }),
            Op::Gather(a, idx) => {
                let an = nodes[a.0].cols;
                send(*a, &mut |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * an + j] += g[r];
                    }
                });
            }
            Op::Column(a, j) => {
                let an = nodes[a.0].cols;
                send(*a, &mut |d| {
                    for r in 0..m {
                        d[r * an + j] += g[r];
                    }
                });
            }
        }
    }
}

/// `1 / (1 + e^{-x})`, branching on sign so neither side overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums so the loop vectorises
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it != 0.0 {
                axpy(a_it, &b[t * n..(t + 1) * n], orow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph {
        Graph::new(Precision::F64)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = g64();
        let i = g.leaf(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let b = g.leaf(2, 1, vec![3., 4.]).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[3., 4.]);
        let a = g.leaf(1, 2, vec![1., 2.]).unwrap();
        let d = g.matmul(a, b).unwrap();
        assert_eq!(g.value(d), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = g64();
        let a = g.leaf(2, 3, vec![0.; 6]).unwrap();
        let b = g.leaf(2, 3, vec![0.; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2x3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn scalar_activations() {
        let mut g = g64();
        let z = g.leaf(1, 1, vec![0.0]).unwrap();
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        assert_eq!(g.scalar(t), 0.0);
        assert_eq!(g.scalar(s), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = g64();
        let x = g.leaf(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_known_rows() {
        let mut g = g64();
        let x = g.leaf(2, 3, vec![0., 0., 0., 1., 2., 3.]).unwrap();
        let y = g.softmax_rows(x);
        for v in &g.value(y)[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for k in 0..3 {
            let want = ((k + 1) as f64).exp() / z;
            assert!((g.value(y)[3 + k] - want).abs() < 1e-12);
        }
        let big = g.leaf(1, 2, vec![1000., 1000.]).unwrap();
        let y = g.softmax_rows(big);
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked() {
        let mut g = g64();
        let x = g.leaf(1, 3, vec![5., 1., 2.]).unwrap();
        let y = g.masked_softmax_rows(x, &[1., 1., 0.]).unwrap();
        assert_eq!(g.value(y)[2], 0.0);
        assert!((g.value(y).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax_rows(x, &[0., 0., 0.]).is_err());
    }

    #[test]
    fn concat_mean_lookup() {
        let mut g = g64();
        let a = g.leaf(1, 1, vec![1.]).unwrap();
        let b = g.leaf(1, 1, vec![2.]).unwrap();
        let c = g.concat(&[a, b], Axis::Cols).unwrap();
        assert_eq!(g.value(c), &[1., 2.]);
        let m = g.leaf(2, 2, vec![2., 4., 6., 8.]).unwrap();
        let mm = g.mean_axis(m, Axis::Rows);
        assert_eq!(g.value(mm), &[4., 6.]);
        let t = g.leaf(3, 2, vec![0.; 6]).unwrap();
        assert!(matches!(g.lookup(t, &[3]), Err(Error::Vocabulary { id: 3, size: 3 })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = g64();
        let x = g.leaf(1, 2, vec![1., 2.]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_use_sums_branch_adjoints() {
        // y = x*x + 3x at x = 2 -> dy/dx = 7
        let mut g = g64();
        let x = g.leaf(1, 1, vec![2.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), vec![7.0]);
        // repeated calls accumulate
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), vec![14.0]);
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut g = g64();
        let x = g.leaf(1, 1, vec![2.0]).unwrap();
        let c = g.constant(1, 1, vec![5.0]).unwrap();
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), vec![5.0]);
        assert_eq!(g.grad(c), vec![0.0]);
        assert!(!g.requires_grad(c));
    }

    #[test]
    fn f32_precision_rounds_stored_values() {
        let mut g = Graph::new(Precision::F32);
        let x = g.leaf(1, 1, vec![0.1]).unwrap();
        assert_eq!(g.scalar(x), 0.1f32 as f64);
    }
}
