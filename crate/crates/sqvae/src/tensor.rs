//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tape`] is a define-by-run arena: every primitive appends one node
//! holding the output buffer and, when any input tracks gradients, the
//! operation needed to replay it backward. Tapes are rebuilt every training
//! step and confined to one execution context; there is no shared state.
//!
//! All primitives validate shapes up front and scan their output for
//! non-finite values, so a NaN or Inf is reported at the primitive that
//! produced it rather than three losses later.

use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    ScaleBy(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    RowSoftmax(Tensor),
    RowLogSoftmax(Tensor),
    Log(Tensor),
    Exp(Tensor),
    ClampMin(Tensor, f64),
    Sum(Tensor),
    RowSum(Tensor),
    Mean(Tensor),
    SqNorm(Tensor),
    RowNormalize(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    GatherRows(Tensor, Vec<usize>),
    Concat(Tensor, Tensor, usize),
    BroadcastRow(Tensor),
    BroadcastCol(Tensor),
    Reshape(Tensor),
    StraightThrough(Tensor),
    /// Unary op with the per-element derivative saved at record time.
    /// Lets domain code (e.g. special functions) define primitives without
    /// touching this enum's backward pass.
    UnarySaved(Tensor, Vec<f64>),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by tensor.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `t`, or `None` when the root does not
    /// depend on it (a zero gradient).
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Raw buffer of a tensor, row-major.
    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    /// Value of a single-element tensor.
    pub fn item(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.id].data.len(), 1);
        self.nodes[t.id].data[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Register an input buffer. `data.len()` must equal the shape product.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "leaf buffer length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(vec![v], vec![1])
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { data, shape, requires_grad, op });
        Tensor { id: self.nodes.len() - 1 }
    }

    fn emit(
        &mut self,
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(data, shape, requires_grad, op))
    }

    fn same_shape(&self, name: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Shape-conformance check for callers composing higher-level ops.
    pub fn same_shape_check(&self, name: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        self.same_shape(name, a, b)
    }

    fn rows_cols(&self, name: &'static str, t: Tensor) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape { op: name, detail: format!("expected rank 2, got {s:?}") }),
        }
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.emit("add", data, self.shape(a).to_vec(), rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.emit("sub", data, self.shape(a).to_vec(), rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.emit("mul", data, self.shape(a).to_vec(), rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.requires_grad(a);
        self.emit("scale", data, self.shape(a).to_vec(), rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.requires_grad(a);
        self.emit("add_scalar", data, self.shape(a).to_vec(), rg, Op::AddScalar(a))
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                detail: format!("scale operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s)[0];
        let data: Vec<f64> = self.value(a).iter().map(|x| x * sv).collect();
        let rg = self.requires_grad(a) || self.requires_grad(s);
        self.emit("scale_by", data, self.shape(a).to_vec(), rg, Op::ScaleBy(a, s))
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        let rg = self.requires_grad(a);
        self.emit("log", data, self.shape(a).to_vec(), rg, Op::Log(a))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.requires_grad(a);
        self.emit("exp", data, self.shape(a).to_vec(), rg, Op::Exp(a))
    }

    /// `max(x, c)` elementwise. The subgradient at `x == c` is 0.
    pub fn clamp_min(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.max(c)).collect();
        let rg = self.requires_grad(a);
        self.emit("clamp_min", data, self.shape(a).to_vec(), rg, Op::ClampMin(a, c))
    }

    /// relu with the subgradient at 0 fixed to 0.
    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires_grad(a);
        self.emit("relu", data, self.shape(a).to_vec(), rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> =
            self.value(a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let rg = self.requires_grad(a);
        self.emit("sigmoid", data, self.shape(a).to_vec(), rg, Op::Sigmoid(a))
    }

    /// Unary primitive with derivative values captured by the caller.
    /// `f` maps each input element to `(output, d output / d input)`.
    pub fn unary_saved<F>(&mut self, name: &'static str, a: Tensor, f: F) -> Result<Tensor>
    where
        F: Fn(f64) -> (f64, f64),
    {
        let mut data = Vec::with_capacity(self.value(a).len());
        let mut dydx = Vec::with_capacity(self.value(a).len());
        for &x in self.value(a).iter() {
            let (y, d) = f(x);
            if !d.is_finite() {
                return Err(Error::NonFinite { op: name });
            }
            data.push(y);
            dydx.push(d);
        }
        let rg = self.requires_grad(a);
        self.emit(name, data, self.shape(a).to_vec(), rg, Op::UnarySaved(a, dydx))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul", a)?;
        let (k2, n) = self.rows_cols("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let data = matmul_nn(self.value(a), self.value(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.emit("matmul", data, vec![m, n], rg, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols("transpose", a)?;
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        self.emit("transpose", data, vec![c, r], rg, Op::Transpose(a))
    }

    // ── row-wise ops on rank-2 tensors ─────────────────────────────────

    /// Softmax along the last axis, with per-row max subtraction.
    pub fn row_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols("row_softmax", a)?;
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.requires_grad(a);
        self.emit("row_softmax", data, vec![r, c], rg, Op::RowSoftmax(a))
    }

    /// `x - max - ln Σ exp(x - max)` per row; exact log-probabilities.
    pub fn row_log_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols("row_log_softmax", a)?;
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for (o, &x) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.requires_grad(a);
        self.emit("row_log_softmax", data, vec![r, c], rg, Op::RowLogSoftmax(a))
    }

    /// Rows scaled to unit Euclidean norm. A zero row yields a numeric error.
    pub fn row_l2_normalize(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols("row_l2_normalize", a)?;
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (o, &x) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        let rg = self.requires_grad(a);
        self.emit("row_l2_normalize", data, vec![r, c], rg, Op::RowNormalize(a))
    }

    pub fn row_sum(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols("row_sum", a)?;
        let src = self.value(a);
        let data: Vec<f64> =
            (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.requires_grad(a);
        self.emit("row_sum", data, vec![r, 1], rg, Op::RowSum(a))
    }

    /// Select rows of `a` by index; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rows_cols("gather_rows", a)?;
        for &i in indices {
            if i >= r {
                return Err(Error::Contract(format!(
                    "gather_rows index {i} out of range for {r} rows"
                )));
            }
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(a);
        self.emit(
            "gather_rows",
            data,
            vec![indices.len(), c],
            rg,
            Op::GatherRows(a, indices.to_vec()),
        )
    }

    pub fn concat(&mut self, a: Tensor, b: Tensor, axis: usize) -> Result<Tensor> {
        let (ra, ca) = self.rows_cols("concat", a)?;
        let (rb, cb) = self.rows_cols("concat", b)?;
        let (shape, data) = match axis {
            0 => {
                if ca != cb {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!("column counts {ca} vs {cb}"),
                    });
                }
                let mut d = self.value(a).to_vec();
                d.extend_from_slice(self.value(b));
                (vec![ra + rb, ca], d)
            }
            1 => {
                if ra != rb {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!("row counts {ra} vs {rb}"),
                    });
                }
                let (va, vb) = (self.value(a), self.value(b));
                let mut d = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    d.extend_from_slice(&va[i * ca..(i + 1) * ca]);
                    d.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
                }
                (vec![ra, ca + cb], d)
            }
            _ => {
                return Err(Error::Contract(format!("concat axis {axis} out of range")));
            }
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.emit("concat", data, shape, rg, Op::Concat(a, b, axis))
    }

    /// Repeat a length-m vector (shape `[m]` or `[1, m]`) as `rows` rows.
    pub fn broadcast_row(&mut self, v: Tensor, rows: usize) -> Result<Tensor> {
        let m = match self.shape(v) {
            [m] => *m,
            [1, m] => *m,
            s => {
                return Err(Error::Shape {
                    op: "broadcast_row",
                    detail: format!("expected row vector, got {s:?}"),
                })
            }
        };
        let src = self.value(v);
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let rg = self.requires_grad(v);
        self.emit("broadcast_row", data, vec![rows, m], rg, Op::BroadcastRow(v))
    }

    /// Repeat a length-n vector (shape `[n]` or `[n, 1]`) as `cols` columns.
    pub fn broadcast_col(&mut self, v: Tensor, cols: usize) -> Result<Tensor> {
        let n = match self.shape(v) {
            [n] => *n,
            [n, 1] => *n,
            s => {
                return Err(Error::Shape {
                    op: "broadcast_col",
                    detail: format!("expected column vector, got {s:?}"),
                })
            }
        };
        let src = self.value(v).to_vec();
        let mut data = Vec::with_capacity(n * cols);
        for &x in &src {
            data.extend(std::iter::repeat(x).take(cols));
        }
        let rg = self.requires_grad(v);
        self.emit("broadcast_col", data, vec![n, cols], rg, Op::BroadcastCol(v))
    }

    pub fn reshape(&mut self, a: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&shape) != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        let data = self.value(a).to_vec();
        let rg = self.requires_grad(a);
        self.emit("reshape", data, shape, rg, Op::Reshape(a))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.emit("sum", vec![s], vec![1], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.requires_grad(a);
        self.emit("mean", vec![s], vec![1], rg, Op::Mean(a))
    }

    /// Sum of squares over all entries.
    pub fn sqnorm(&mut self, a: Tensor) -> Result<Tensor> {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.requires_grad(a);
        self.emit("sqnorm", vec![s], vec![1], rg, Op::SqNorm(a))
    }

    // ── quantization support ───────────────────────────────────────────

    /// Forward the given buffer, passing the gradient to `a` unchanged.
    /// `values` must match the shape of `a`.
    pub fn straight_through(&mut self, a: Tensor, values: Vec<f64>) -> Result<Tensor> {
        if values.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "straight_through",
                detail: format!(
                    "{} values for shape {:?}",
                    values.len(),
                    self.shape(a)
                ),
            });
        }
        let rg = self.requires_grad(a);
        self.emit(
            "straight_through",
            values,
            self.shape(a).to_vec(),
            rg,
            Op::StraightThrough(a),
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Every node reachable from the root
    /// with `requires_grad` receives its accumulated gradient; repeated uses
    /// of a tensor accumulate additively. Deterministic: a fixed traversal
    /// order gives bit-identical results for identical tapes.
    pub fn backward(&self, root: Tensor) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut accum = |t: Tensor, contrib: Vec<f64>| {
            if !self.nodes[t.id].requires_grad {
                return;
            }
            match &mut grads[t.id] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(*a, g.to_vec());
                accum(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accum(*a, g.to_vec());
                accum(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accum(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                accum(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => {
                accum(*a, g.iter().map(|x| x * c).collect());
            }
            Op::AddScalar(a) => {
                accum(*a, g.to_vec());
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s)[0];
                let va = self.value(*a);
                accum(*a, g.iter().map(|x| x * sv).collect());
                accum(*s, vec![g.iter().zip(va).map(|(x, y)| x * y).sum()]);
            }
            Op::MatMul(a, b) => {
                let [m, k] = *as2(self.shape(*a));
                let n = self.shape(*b)[1];
                accum(*a, matmul_nt(g, self.value(*b), m, n, k));
                accum(*b, matmul_tn(self.value(*a), g, m, k, n));
            }
            Op::Transpose(a) => {
                let [r, c] = *as2(self.shape(*a));
                // g has shape [c, r]; transpose it back.
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                accum(*a, da);
            }
            Op::RowSoftmax(a) => {
                let [r, c] = *as2(node.shape.as_slice());
                let y = &node.data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((d, &yv), &gv) in
                        da[i * c..(i + 1) * c].iter_mut().zip(yr).zip(gr)
                    {
                        *d = yv * (gv - dot);
                    }
                }
                accum(*a, da);
            }
            Op::RowLogSoftmax(a) => {
                let [r, c] = *as2(node.shape.as_slice());
                let y = &node.data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in
                        da[i * c..(i + 1) * c].iter_mut().zip(yr).zip(gr)
                    {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                accum(*a, da);
            }
            Op::Log(a) => {
                let va = self.value(*a);
                accum(*a, g.iter().zip(va).map(|(x, v)| x / v).collect());
            }
            Op::Exp(a) => {
                accum(*a, g.iter().zip(&node.data).map(|(x, y)| x * y).collect());
            }
            Op::ClampMin(a, c) => {
                let va = self.value(*a);
                accum(
                    *a,
                    g.iter().zip(va).map(|(x, v)| if *v > *c { *x } else { 0.0 }).collect(),
                );
            }
            Op::Sum(a) => {
                accum(*a, vec![g[0]; self.value(*a).len()]);
            }
            Op::RowSum(a) => {
                let [r, c] = *as2(self.shape(*a));
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c..(i + 1) * c].fill(g[i]);
                }
                accum(*a, da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                accum(*a, vec![g[0] / n; self.value(*a).len()]);
            }
            Op::SqNorm(a) => {
                let va = self.value(*a);
                accum(*a, va.iter().map(|x| 2.0 * x * g[0]).collect());
            }
            Op::RowNormalize(a) => {
                let [r, c] = *as2(node.shape.as_slice());
                let va = self.value(*a);
                let y = &node.data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let xr = &va[i * c..(i + 1) * c];
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let norm = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((d, &yv), &gv) in
                        da[i * c..(i + 1) * c].iter_mut().zip(yr).zip(gr)
                    {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                accum(*a, da);
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                accum(
                    *a,
                    g.iter().zip(va).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid(a) => {
                accum(
                    *a,
                    g.iter().zip(&node.data).map(|(x, y)| x * y * (1.0 - y)).collect(),
                );
            }
            Op::GatherRows(a, indices) => {
                let [_, c] = *as2(self.shape(*a));
                let mut da = vec![0.0; self.value(*a).len()];
                for (row, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += g[row * c + j];
                    }
                }
                accum(*a, da);
            }
            Op::Concat(a, b, axis) => {
                let [ra, ca] = *as2(self.shape(*a));
                let [rb, cb] = *as2(self.shape(*b));
                match axis {
                    0 => {
                        accum(*a, g[..ra * ca].to_vec());
                        accum(*b, g[ra * ca..].to_vec());
                    }
                    _ => {
                        let mut da = Vec::with_capacity(ra * ca);
                        let mut db = Vec::with_capacity(rb * cb);
                        let w = ca + cb;
                        for i in 0..ra {
                            da.extend_from_slice(&g[i * w..i * w + ca]);
                            db.extend_from_slice(&g[i * w + ca..(i + 1) * w]);
                        }
                        accum(*a, da);
                        accum(*b, db);
                    }
                }
            }
            Op::BroadcastRow(v) => {
                let m = self.value(*v).len();
                let rows = node.data.len() / m;
                let mut dv = vec![0.0; m];
                for i in 0..rows {
                    for j in 0..m {
                        dv[j] += g[i * m + j];
                    }
                }
                accum(*v, dv);
            }
            Op::BroadcastCol(v) => {
                let n = self.value(*v).len();
                let cols = node.data.len() / n;
                let dv: Vec<f64> =
                    (0..n).map(|i| g[i * cols..(i + 1) * cols].iter().sum()).collect();
                accum(*v, dv);
            }
            Op::Reshape(a) => {
                accum(*a, g.to_vec());
            }
            Op::StraightThrough(a) => {
                accum(*a, g.to_vec());
            }
            Op::UnarySaved(a, dydx) => {
                accum(*a, g.iter().zip(dydx).map(|(x, d)| x * d).collect());
            }
        }
    }
}

fn as2(shape: &[usize]) -> &[usize; 2] {
    shape.try_into().expect("rank-2 shape")
}

/// C = A·B with A m×k, B k×n. ikj loop order keeps the inner loop over
/// contiguous slices.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A·Bᵀ with A m×k, B n×k → m×n.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = Aᵀ·B with A m×k, B m×n → k×n.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Max relative error between the analytic gradient of `build`'s scalar
/// output w.r.t. `x` and a central finite difference with step `h`:
/// `max_i |analytic_i - central_i| / max(1, |analytic_i|)`.
///
/// `build` must construct the scalar from the supplied leaf alone (other
/// inputs are baked into the closure as constants).
pub fn finite_difference_check<F>(
    build: F,
    x: &[f64],
    shape: &[usize],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(data.to_vec(), shape.to_vec(), false);
        let root = build(&mut tape, leaf)?;
        if tape.value(root).len() != 1 {
            return Err(Error::Contract("finite_difference_check needs a scalar".into()));
        }
        Ok(tape.item(root))
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.to_vec(), shape.to_vec(), true);
    let root = build(&mut tape, leaf)?;
    if tape.value(root).len() != 1 {
        return Err(Error::Contract("finite_difference_check needs a scalar".into()));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = match grads.get(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.len()],
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let hi = x[i] + h;
        let lo = x[i] - h;
        probe[i] = hi;
        let fp = eval(&probe)?;
        probe[i] = lo;
        let fm = eval(&probe)?;
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        // The stored probes bound the step exactly; dividing by their
        // measured difference removes the representation error of x ± h.
        let central = (fp - fm) / (hi - lo);
        let err = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(data: &[f64], shape: &[usize]) -> (Tape, Tensor) {
        let mut t = Tape::new();
        let x = t.leaf(data.to_vec(), shape.to_vec(), true);
        (t, x)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut t = Tape::new();
        let eye = t.constant(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![3, 3],
        );
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]);
        let y = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(y), t.value(a));
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let (mut t, x) = tape_with(&[0.0, 0.0, 0.0, 0.0], &[1, 4]);
        let y = t.row_softmax(x).unwrap();
        for &v in t.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_three_four() {
        let (mut t, x) = tape_with(&[3.0, 4.0], &[1, 2]);
        let y = t.row_l2_normalize(x).unwrap();
        assert!((t.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((t.value(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (mut t, x) = tape_with(&[1.0, -2.0, 5.0], &[3]);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sqnorm_is_two_x() {
        let (mut t, x) = tape_with(&[1.0, -2.0], &[2]);
        let s = t.sqnorm(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn grad_is_none_when_root_independent_of_leaf() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        let y = t.leaf(vec![3.0], vec![1], true);
        let s = t.sqnorm(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(y).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        // s = sum(x) + sqnorm(x), x = [3] -> ds/dx = 1 + 2x = 7
        let (mut t, x) = tape_with(&[3.0], &[1]);
        let a = t.sum(x).unwrap();
        let b = t.sqnorm(x).unwrap();
        let s = t.add(a, b).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn fd_check_linear_is_exact() {
        // Dyadic step and inputs keep the linear case free of rounding.
        let err = finite_difference_check(
            |t, x| t.sum(x),
            &[0.5, -1.25, 4.0],
            &[3],
            2f64.powi(-20),
        )
        .unwrap();
        assert!(err <= 1e-10, "err={err}");
    }

    #[test]
    fn fd_check_sqnorm() {
        let err = finite_difference_check(
            |t, x| t.sqnorm(x),
            &[1.0, 2.0, 3.0],
            &[3],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "err={err}");
    }

    #[test]
    fn non_scalar_root_rejected() {
        let (mut t, x) = tape_with(&[1.0, 2.0], &[2]);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![2]);
        let b = t.constant(vec![1.0], vec![1]);
        match t.add(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_names_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0], vec![1]);
        match t.log(a) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let (mut t, x) = tape_with(&[1.0, 2.0], &[1, 2]);
        let q = t.straight_through(x, vec![10.0, 20.0]).unwrap();
        assert_eq!(t.value(q), &[10.0, 20.0]);
        let s = t.sqnorm(q).unwrap();
        let g = t.backward(s).unwrap();
        // d sqnorm/d q = 2q = [20, 40], copied to x verbatim.
        assert_eq!(g.get(x).unwrap(), &[20.0, 40.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let (mut t, x) = tape_with(&[0.3, 0.7, -0.2, 0.9, 1.1, -0.4], &[2, 3]);
            let s1 = t.row_softmax(x).unwrap();
            let l = t.log(s1).unwrap();
            let m = t.mul(s1, l).unwrap();
            let s = t.sum(m).unwrap();
            let g = t.backward(s).unwrap();
            g.get(x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
