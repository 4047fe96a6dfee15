//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] is eager: every operation computes its value when it is
//! recorded, so the graph can be inspected while it is being built. Nodes are
//! appended in evaluation order, which makes the node list a topological
//! order and lets [`Tape::backward`] run a single reverse sweep.
//!
//! Tensors are flat `f64` buffers with a row-major shape. Only the handful of
//! operations the forecaster needs are provided.

mod check;
pub mod kernels;

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use check::grad_check;

/// A learned tensor with its accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// Equality ignores the gradient buffer.
impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape && self.values == other.values
    }
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "param {name}: shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(Param {
            name,
            shape,
            grad: vec![0.0; n],
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of parameters. Insertion order is stable and is the
/// order used by optimizers and serialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Usage(format!("duplicate parameter {}", param.name)));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Rebuilds the name index and gradient buffers after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        for p in &mut self.params {
            p.grad = vec![0.0; p.values.len()];
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv1d { x: Var, w: Var, batch: usize, len: usize, c_in: usize, d: usize, width: usize },
    AvgPool { x: Var, len: usize },
    ConvPool { x: Var, w: Var, means: Vec<f64>, len: usize, out_len: usize, c_in: usize, d: usize, width: usize },
    Softmax { x: Var, cols: usize },
    Cumsum { x: Var, cols: usize },
    Logistic(Var),
    Abs(Var),
    Relu(Var),
    Gather { x: Var, idx: Rc<Vec<usize>> },
    Concat(Vec<Var>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not reach
    /// the loss.
    pub fn of(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; tape.nodes[v.0].value.len()])
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if value.len() != numel(&shape) {
            return Err(Error::Shape(format!(
                "constant of {} values cannot have shape {shape:?}",
                value.len()
            )));
        }
        Ok(self.push(value, shape, Op::Leaf))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.values.clone(), p.shape.clone(), Op::Param(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(value, shape, op))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Offset(a))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.map(a, kernels::logistic, Op::Logistic(a))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} and {k2} differ")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                for (o, y) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }))
    }

    /// `a [m,k] · bᵀ` for `b [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t lhs")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t inner dims {k} and {k2} differ")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ra = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let rb = &bv[j * k..(j + 1) * k];
                out[i * n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(out, vec![m, n], Op::MatMulT { a, b, m, k, n }))
    }

    /// Batched valid convolution: `x [batch, len, c_in]`, `w [d, width, c_in]`
    /// to `[batch, len - width + 1, d]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (batch, len, c_in) = match self.shape(x) {
            [b, l, c] => (*b, *l, *c),
            s => return Err(Error::Shape(format!("conv1d input must be 3-d, got {s:?}"))),
        };
        let (d, width, c_w) = match self.shape(w) {
            [d, k, c] => (*d, *k, *c),
            s => return Err(Error::Shape(format!("conv1d kernel must be 3-d, got {s:?}"))),
        };
        if c_w != c_in {
            return Err(Error::Shape(format!(
                "conv1d kernel has {c_w} channels, input has {c_in}"
            )));
        }
        if width == 0 || len < width {
            return Err(Error::Shape(format!(
                "conv1d input length {len} is shorter than kernel width {width}"
            )));
        }
        let out_len = len - width + 1;
        let mut out = Vec::with_capacity(batch * out_len * d);
        let (xv, wv) = (self.value(x), self.value(w));
        for b in 0..batch {
            let seq = &xv[b * len * c_in..(b + 1) * len * c_in];
            out.extend(kernels::conv1d(seq, len, c_in, wv, d, width)?);
        }
        Ok(self.push(
            out,
            vec![batch, out_len, d],
            Op::Conv1d { x, w, batch, len, c_in, d, width },
        ))
    }

    /// `avg_pool(conv1d(x, w))` in one step, `[batch, len, c_in]` to
    /// `[batch, d]`. The pair is linear, so each filter is applied once to
    /// the means of the shifted inputs instead of at every position.
    pub fn conv_pool(&mut self, x: Var, w: Var) -> Result<Var> {
        let (batch, len, c_in) = match self.shape(x) {
            [b, l, c] => (*b, *l, *c),
            s => return Err(Error::Shape(format!("conv_pool input must be 3-d, got {s:?}"))),
        };
        let (d, width, c_w) = match self.shape(w) {
            [d, k, c] => (*d, *k, *c),
            s => return Err(Error::Shape(format!("conv_pool kernel must be 3-d, got {s:?}"))),
        };
        if c_w != c_in {
            return Err(Error::Shape(format!(
                "conv_pool kernel has {c_w} channels, input has {c_in}"
            )));
        }
        if width == 0 || len < width {
            return Err(Error::Shape(format!(
                "conv_pool input length {len} is shorter than kernel width {width}"
            )));
        }
        let out_len = len - width + 1;
        let q = width * c_in;
        let inv = 1.0 / out_len as f64;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut means = vec![0.0; batch * q];
        for b in 0..batch {
            let seq = &xv[b * len * c_in..(b + 1) * len * c_in];
            let m = &mut means[b * q..(b + 1) * q];
            for t in 0..out_len {
                for (mi, xi) in m.iter_mut().zip(&seq[t * c_in..t * c_in + q]) {
                    *mi += xi;
                }
            }
            m.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out = Vec::with_capacity(batch * d);
        for m in means.chunks_exact(q) {
            for k in wv.chunks_exact(q) {
                out.push(m.iter().zip(k).map(|(a, b)| a * b).sum());
            }
        }
        Ok(self.push(
            out,
            vec![batch, d],
            Op::ConvPool { x, w, means, len, out_len, c_in, d, width },
        ))
    }

    /// Mean over axis 1 of a `[batch, len, d]` tensor.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, len, d) = match self.shape(x) {
            [b, l, d] => (*b, *l, *d),
            s => return Err(Error::Shape(format!("avg_pool input must be 3-d, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(batch * d);
        for seq in self.value(x).chunks_exact(len * d) {
            out.extend(kernels::avg_pool(seq, len, d)?);
        }
        Ok(self.push(out, vec![batch, d], Op::AvgPool { x, len }))
    }

    /// Row-wise softmax over the last axis. `mask` has one flag per element;
    /// excluded elements get weight zero. Every row needs at least one
    /// included element.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let n = self.value(x).len();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Shape("softmax mask must match score shape".into()));
            }
        }
        let mut out = Vec::with_capacity(n);
        for (r, row) in self.value(x).chunks_exact(cols).enumerate() {
            let row_mask = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            out.extend(kernels::softmax_masked(row, row_mask)?);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Softmax { x, cols }))
    }

    /// Running sum along the last axis.
    pub fn cumsum_rows(&mut self, x: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::Shape("cumsum over an empty axis".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            for j in 1..cols {
                row[j] += row[j - 1];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Cumsum { x, cols }))
    }

    /// `out[j] = x[idx[j]]` over the flattened input, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        if idx.len() != numel(&shape) {
            return Err(Error::Shape(format!(
                "gather of {} indices cannot have shape {shape:?}",
                idx.len()
            )));
        }
        let src = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(out, shape, Op::Gather { x, idx }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        self.gather(x, Rc::new((0..n).collect()), shape)
    }

    /// Flat concatenation of the inputs.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        Ok(self.push(out, vec![n], Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the `grad` buffers in `store`, so repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward_only(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(grads)
    }

    /// Reverse sweep without touching any parameter store.
    pub fn backward_only(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g / y;
                    }
                });
                acc(*b, &mut |s| {
                    for (((s, g), x), y) in s.iter_mut().zip(g).zip(av).zip(bv) {
                        *s -= g * x / (y * y);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::Offset(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Logistic(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                        *s += g * y * (1.0 - y);
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *s += g;
                        } else if *x < 0.0 {
                            *s -= g;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += g[i * n + j] * bv[p * n + j];
                            }
                            s[i * k + p] += t;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                s[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulT { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                s[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                s[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, batch, len, c_in, d, width } => {
                let (batch, len, c_in, d, width) = (*batch, *len, *c_in, *d, *width);
                let out_len = len - width + 1;
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*x, &mut |s| {
                    for b in 0..batch {
                        for t in 0..out_len {
                            for f in 0..d {
                                let gv = g[(b * out_len + t) * d + f];
                                if gv == 0.0 {
                                    continue;
                                }
                                for j in 0..width {
                                    let xo = (b * len + t + j) * c_in;
                                    let wo = (f * width + j) * c_in;
                                    for ch in 0..c_in {
                                        s[xo + ch] += gv * wv[wo + ch];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for b in 0..batch {
                        for t in 0..out_len {
                            for f in 0..d {
                                let gv = g[(b * out_len + t) * d + f];
                                if gv == 0.0 {
                                    continue;
                                }
                                for j in 0..width {
                                    let xo = (b * len + t + j) * c_in;
                                    let wo = (f * width + j) * c_in;
                                    for ch in 0..c_in {
                                        s[wo + ch] += gv * xv[xo + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvPool { x, w, means, len, out_len, c_in, d, width } => {
                let (len, out_len, c_in, d) = (*len, *out_len, *c_in, *d);
                let q = *width * c_in;
                let wv = self.value(*w);
                let inv = 1.0 / out_len as f64;
                acc(*x, &mut |s| {
                    let mut dm = vec![0.0; q];
                    for (b, gb) in g.chunks_exact(d).enumerate() {
                        dm.iter_mut().for_each(|v| *v = 0.0);
                        for (gv, k) in gb.iter().zip(wv.chunks_exact(q)) {
                            for (m, kv) in dm.iter_mut().zip(k) {
                                *m += gv * kv;
                            }
                        }
                        let row = &mut s[b * len * c_in..(b + 1) * len * c_in];
                        for t in 0..out_len {
                            for (r, m) in row[t * c_in..t * c_in + q].iter_mut().zip(&dm) {
                                *r += m * inv;
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for (gb, m) in g.chunks_exact(d).zip(means.chunks_exact(q)) {
                        for (gv, k) in gb.iter().zip(s.chunks_exact_mut(q)) {
                            for (kv, mv) in k.iter_mut().zip(m) {
                                *kv += gv * mv;
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, len } => {
                let len = *len;
                let d = node.shape[1];
                let inv = 1.0 / len as f64;
                acc(*x, &mut |s| {
                    for (b, gb) in g.chunks_exact(d).enumerate() {
                        for t in 0..len {
                            let row = &mut s[(b * len + t) * d..(b * len + t + 1) * d];
                            for (s, g) in row.iter_mut().zip(gb) {
                                *s += g * inv;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, cols } => {
                let y = &node.value;
                acc(*x, &mut |s| {
                    for ((sr, gr), yr) in s
                        .chunks_exact_mut(*cols)
                        .zip(g.chunks_exact(*cols))
                        .zip(y.chunks_exact(*cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::Cumsum { x, cols } => {
                acc(*x, &mut |s| {
                    for (sr, gr) in s.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)) {
                        let mut run = 0.0;
                        for j in (0..*cols).rev() {
                            run += gr[j];
                            sr[j] += run;
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                acc(*x, &mut |s| {
                    for (&i, g) in idx.iter().zip(g) {
                        s[i] += g;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let gp = &g[off..off + n];
                    acc(p, &mut |s| s.iter_mut().zip(gp).for_each(|(s, g)| *s += g));
                    off += n;
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g0));
            }
        }
    }
}
