//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! Everything is 64-bit and single-threaded per tape. Ops validate shapes on
//! entry and reject any non-finite output value, so divergence surfaces at
//! the op that produced it instead of propagating silently. Gradients
//! accumulate additively into shared parents; a backward pass visits nodes
//! in reverse insertion order, which is a valid reverse topological order
//! because parents always precede children on the tape.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument in {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
}

type Result<T> = std::result::Result<T, TensorError>;

/// Dense multi-dimensional value, row-major, with an optional gradient
/// buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Trainable tensor: `requires_grad` set, gradient buffer zeroed.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row/column view of a rank-2 tensor; scalars and vectors are treated
    /// as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        } else if self.requires_grad {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Scale { x: Var, k: f64 },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Softmax { x: Var, temperature: f64 },
    EmbeddingLookup { table: Var, indices: Vec<usize> },
    SelectRows { x: Var, indices: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    KlDiv { p: Var, q: Var },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Lazily allocated; present only on nodes that can influence a
    /// tracked leaf.
    grad: Option<Vec<f64>>,
    tracked: bool,
    op: Op,
}

/// Recorded compute graph. Nodes are appended in execution order, so the
/// vector itself is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, tracked: bool, op: Op) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let grad = if tracked { Some(vec![0.0; data.len()]) } else { None };
        self.nodes.push(Node { shape, data, grad, tracked, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    /// Copy a node out as a plain tensor (no grad state).
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    fn tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Register an input tensor; it is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Register an input that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Leaf)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions {} vs {}", k, k2),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![m, n], out, tracked, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let tracked = self.tracked(x);
        self.push(vec![n, m], out, tracked, Op::Transpose { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.node(a).shape.clone();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(shape, out, tracked, Op::Add { a, b })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.node(a).shape.clone();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(shape, out, tracked, Op::Mul { a, b })
    }

    /// Broadcast-add a length-`c` vector to every row of an `[r, c]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        if self.node(b).shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias shape {:?} does not match {} columns", self.node(b).shape, c),
            });
        }
        let xd = self.data(x);
        let bd = self.data(b);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(b);
        self.push(vec![r, c], out, tracked, Op::AddBias { x, b })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        if !k.is_finite() {
            return Err(TensorError::InvalidArg {
                op: "scale",
                detail: format!("non-finite factor {k}"),
            });
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v * k).collect();
        let shape = self.node(x).shape.clone();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Scale { x, k })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.node(x).shape.clone();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Gelu { x })
    }

    /// Per-row layer normalization followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.node(gain).shape != [c] || self.node(bias).shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} do not match {} columns",
                    self.node(gain).shape,
                    self.node(bias).shape,
                    c
                ),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        self.push(vec![r, c], out, tracked, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Temperature-scaled softmax over the trailing axis, max-subtracted for
    /// stability.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::InvalidArg {
                op: "softmax",
                detail: format!("temperature must be positive, got {temperature}"),
            });
        }
        let shape = self.node(x).shape.clone();
        let c = *shape.last().ok_or(TensorError::InvalidArg {
            op: "softmax",
            detail: "rank-0 input".into(),
        })?;
        let r = self.node(x).data.len() / c;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = ((row[j] - m) / temperature).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Softmax { x, temperature })
    }

    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        for &i in indices {
            if i >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding_lookup", index: i, limit: v });
            }
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(table);
        self.push(
            vec![indices.len(), d],
            out,
            tracked,
            Op::EmbeddingLookup { table, indices: indices.to_vec() },
        )
    }

    /// Gather rows; backward scatter-adds into the source rows.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_rows")?;
        for &i in indices {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { op: "select_rows", index: i, limit: r });
            }
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(x);
        self.push(
            vec![indices.len(), c],
            out,
            tracked,
            Op::SelectRows { x, indices: indices.to_vec() },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::InvalidArg {
                op: "slice_cols",
                detail: format!("columns [{start}, {}) exceed width {c}", start + len),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(x);
        self.push(vec![r, len], out, tracked, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat_cols", detail: "no parts".into() });
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {r} vs {rp}"),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.data(p);
                out.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(vec![r, total], out, tracked, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat_rows", detail: "no parts".into() });
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_rows")?;
            if cp != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {cp}"),
                });
            }
            rows += rp;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(vec![rows, c], out, tracked, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(vec![1], vec![s], tracked, Op::Sum { x })
    }

    /// Mean negative log-softmax probability of `targets` over masked-in rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{t} rows vs {} targets / {} mask entries", targets.len(), mask.len()),
            });
        }
        let n_in = mask.iter().filter(|&&m| m).count();
        if n_in == 0 {
            return Err(TensorError::InvalidArg { op: "cross_entropy", detail: "empty mask".into() });
        }
        for (&tg, &m) in targets.iter().zip(mask) {
            if m && tg >= v {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: tg, limit: v });
            }
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            let row = &ld[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - m).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            if mask[i] {
                loss -= probs[i * v + targets[i]].ln();
            }
        }
        loss /= n_in as f64;
        let tracked = self.tracked(logits);
        self.push(
            vec![1],
            vec![loss],
            tracked,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
        )
    }

    /// KL(p  ‖ q) summed over the trailing axis and averaged over rows.
    /// Rows of both inputs must already be normalized distributions.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.node(p).shape != self.node(q).shape {
            return Err(TensorError::ShapeMismatch {
                op: "kl_divergence",
                detail: format!("{:?} vs {:?}", self.node(p).shape, self.node(q).shape),
            });
        }
        let shape = self.node(p).shape.clone();
        let c = *shape.last().ok_or(TensorError::InvalidArg {
            op: "kl_divergence",
            detail: "rank-0 input".into(),
        })?;
        let rows = self.node(p).data.len() / c;
        let pd = self.data(p);
        let qd = self.data(q);
        for i in 0..rows {
            let ps: f64 = pd[i * c..(i + 1) * c].iter().sum();
            let qs: f64 = qd[i * c..(i + 1) * c].iter().sum();
            if (ps - 1.0).abs() > 1e-6 || (qs - 1.0).abs() > 1e-6 {
                return Err(TensorError::InvalidArg {
                    op: "kl_divergence",
                    detail: format!("row {i} not normalized: sums {ps} / {qs}"),
                });
            }
        }
        let mut total = 0.0;
        for (idx, (&pi, &qi)) in pd.iter().zip(qd).enumerate() {
            if pi > 0.0 {
                if qi <= 0.0 {
                    return Err(TensorError::InvalidArg {
                        op: "kl_divergence",
                        detail: format!("q is zero at flat index {idx} where p > 0"),
                    });
                }
                total += pi * (pi / qi).ln();
            }
        }
        let loss = total / rows as f64;
        let tracked = self.tracked(p) || self.tracked(q);
        self.push(vec![1], vec![loss], tracked, Op::KlDiv { p, q })
    }

    /// Reverse pass from a scalar node. Visits every node at most once, in
    /// reverse topological order, accumulating into parent grads.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.node(root).data.len() != 1 {
            return Err(TensorError::InvalidArg {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", self.node(root).shape),
            });
        }
        if !self.node(root).tracked {
            return Err(TensorError::InvalidArg {
                op: "backward",
                detail: "root does not depend on any tracked leaf".into(),
            });
        }
        if let Some(g) = &mut self.nodes[root.0].grad {
            g[0] = 1.0;
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) if g.iter().any(|&v| v != 0.0) => g.clone(),
                _ => continue,
            };
            self.backward_node(i, &grad);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let g = self.nodes[v.0]
            .grad
            .get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Ops are replayed against stored values; no node is mutated other
        // than parent grad buffers.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.node(a).shape[0], self.node(a).shape[1]);
                let n = self.node(b).shape[1];
                if self.tracked(a) {
                    // dA = dC · Bᵀ
                    let bd = self.data(b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv != 0.0 {
                                for j in 0..k {
                                    da[r * k + j] += gv * bd[j * n + c];
                                }
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.tracked(b) {
                    // dB = Aᵀ · dC
                    let ad = self.data(a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for j in 0..k {
                            let av = ad[r * k + j];
                            if av != 0.0 {
                                for c in 0..n {
                                    db[j * n + c] += av * g[r * n + c];
                                }
                            }
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (m, n) = (self.node(x).shape[0], self.node(x).shape[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c * m + r];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.tracked(a) {
                    let da: Vec<f64> = self.data(b).iter().zip(g).map(|(x, gv)| x * gv).collect();
                    self.add_grad(a, &da);
                }
                if self.tracked(b) {
                    let db: Vec<f64> = self.data(a).iter().zip(g).map(|(x, gv)| x * gv).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                let c = self.node(b).data.len();
                self.add_grad(x, g);
                if self.tracked(b) {
                    let mut db = vec![0.0; c];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % c] += gv;
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Scale { x, k } => {
                let (x, k) = (*x, *k);
                let dx: Vec<f64> = g.iter().map(|v| v * k).collect();
                self.add_grad(x, &dx);
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * gelu_grad_scalar(xv))
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let (r, c) = (self.node(x).shape[0], self.node(x).shape[1]);
                let xd = self.data(x).to_vec();
                let gd = self.data(gain).to_vec();
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = &g[i * c..(i + 1) * c];
                    // d wrt normalized value, then through the normalization.
                    let mut sum_dn = 0.0;
                    let mut sum_dn_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dn = gr[j] * gd[j];
                        sum_dn += dn;
                        sum_dn_xhat += dn * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dn = gr[j] * gd[j];
                        dx[i * c + j] =
                            inv * (dn - sum_dn / c as f64 - xhat * sum_dn_xhat / c as f64);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dgain);
                self.add_grad(bias, &dbias);
            }
            Op::Softmax { x, temperature } => {
                let (x, tau) = (*x, *temperature);
                let c = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].data.len() / c;
                let p = self.nodes[i].data.clone();
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    let pr = &p[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = pr[j] * (gr[j] - dot) / tau;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::EmbeddingLookup { table, indices } => {
                let table = *table;
                let indices = indices.clone();
                let d = self.node(table).shape[1];
                let rows = self.node(table).shape[0];
                let mut dt = vec![0.0; rows * d];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[row * d + j];
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::SelectRows { x, indices } => {
                let x = *x;
                let indices = indices.clone();
                let (r, c) = (self.node(x).shape[0], self.node(x).shape[1]);
                let mut dx = vec![0.0; r * c];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[idx * c + j] += g[row * c + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = (self.node(x).shape[0], self.node(x).shape[1]);
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..len {
                        dx[i2 * c + start + j] = g[i2 * len + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total = *self.nodes[i].shape.last().unwrap();
                let r = self.nodes[i].shape[0];
                let mut offset = 0;
                for p in parts {
                    let w = self.node(p).shape[1];
                    if self.tracked(p) {
                        let mut dp = vec![0.0; r * w];
                        for i2 in 0..r {
                            dp[i2 * w..(i2 + 1) * w]
                                .copy_from_slice(&g[i2 * total + offset..i2 * total + offset + w]);
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let c = *self.nodes[i].shape.last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let rp = self.node(p).shape[0];
                    if self.tracked(p) {
                        self.add_grad(p, &g[offset * c..(offset + rp) * c].to_vec());
                    }
                    offset += rp;
                }
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.node(x).data.len();
                let dx = vec![g[0]; n];
                self.add_grad(x, &dx);
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let probs = probs.clone();
                let (t, v) = (self.node(logits).shape[0], self.node(logits).shape[1]);
                let n_in = mask.iter().filter(|&&m| m).count() as f64;
                let mut dl = vec![0.0; t * v];
                for r in 0..t {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..v {
                        let mut d = probs[r * v + j];
                        if j == targets[r] {
                            d -= 1.0;
                        }
                        dl[r * v + j] = g[0] * d / n_in;
                    }
                }
                self.add_grad(logits, &dl);
            }
            Op::KlDiv { p, q } => {
                let (p, q) = (*p, *q);
                let c = *self.node(p).shape.last().unwrap();
                let rows = self.node(p).data.len() / c;
                let pd = self.data(p).to_vec();
                let qd = self.data(q).to_vec();
                let scale = g[0] / rows as f64;
                if self.tracked(q) {
                    let dq: Vec<f64> = pd
                        .iter()
                        .zip(&qd)
                        .map(|(&pi, &qi)| if pi > 0.0 { -scale * pi / qi } else { 0.0 })
                        .collect();
                    self.add_grad(q, &dq);
                }
                if self.tracked(p) {
                    let dp: Vec<f64> = pd
                        .iter()
                        .zip(&qd)
                        .map(|(&pi, &qi)| if pi > 0.0 { scale * ((pi / qi).ln() + 1.0) } else { 0.0 })
                        .collect();
                    self.add_grad(p, &dp);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::Gelu { .. } => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::EmbeddingLookup { .. } => "embedding_lookup",
        Op::SelectRows { .. } => "select_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::Sum { .. } => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlDiv { .. } => "kl_divergence",
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[j * n..(j + 1) * n];
                for (ov, &bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
    out
}

/// Bias-corrected Adam over a flat list of parameter tensors.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update across all params; call after gradients are accumulated.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::InvalidArg {
                op: "adam_step",
                detail: format!("optimizer built for {} tensors, got {}", self.m.len(), params.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let g = p.grad.as_deref().unwrap_or(&[]);
            if g.len() != p.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {idx} has no gradient buffer"),
                });
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if !p.data.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = tape.constant(&t2(2, 2, vec![3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(1, 2, vec![1.0, 2.0])).unwrap();
        let b = tape.constant(&t2(2, 1, vec![3.0, 4.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(1, 3, vec![1.0, 2.0, 3.0])).unwrap();
        let b = tape.constant(&t2(2, 1, vec![3.0, 4.0])).unwrap();
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![4], vec![0.0; 4]).unwrap()).unwrap();
        let p = tape.softmax(x, 1.0).unwrap();
        for &v in tape.data(p) {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let y = tape.constant(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let p2 = tape.softmax(y, 1.0).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (a, b) in tape.data(p2).iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        for c in [-7.5, 0.0, 3.25] {
            for tau in [0.5, 1.0, 4.0] {
                let x = tape.constant(&Tensor::new(vec![5], vec![c; 5]).unwrap()).unwrap();
                let p = tape.softmax(x, tau).unwrap();
                for &v in tape.data(p) {
                    assert!((v - 0.2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert!(tape.softmax(x, 0.0).is_err());
        assert!(tape.softmax(x, -1.0).is_err());
    }

    #[test]
    fn kl_identical_is_zero_and_ln2_case() {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
        let k = tape.kl_div(p, p).unwrap();
        assert_eq!(tape.data(k)[0], 0.0);

        let p1 = tape.constant(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        let q1 = tape.constant(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
        let k1 = tape.kl_div(p1, q1).unwrap();
        assert!((tape.data(k1)[0] - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_zero_q_under_positive_p() {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
        let q = tape.constant(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(tape.kl_div(p, q).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut tape = Tape::new();
        for _ in 0..1000 {
            let n = rng.random_range(2..8);
            let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let (ps, qs): (f64, f64) = (p.iter().sum(), q.iter().sum());
            p.iter_mut().for_each(|v| *v /= ps);
            q.iter_mut().for_each(|v| *v /= qs);
            let pv = tape.constant(&Tensor::new(vec![n], p).unwrap()).unwrap();
            let qv = tape.constant(&Tensor::new(vec![n], q).unwrap()).unwrap();
            let k = tape.kl_div(pv, qv).unwrap();
            assert!(tape.data(k)[0] >= -1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(&t2(3, 16, vec![0.0; 48])).unwrap();
        let ce = tape.cross_entropy(logits, &[5, 2, 9], &[true, true, true]).unwrap();
        assert!((tape.data(ce)[0] - (16.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 8];
        data[3] = 1e6;
        data[8 + 1] = 1e6;
        let logits = tape.constant(&t2(2, 8, data)).unwrap();
        let ce = tape.cross_entropy(logits, &[3, 1], &[true, true]).unwrap();
        assert!(tape.data(ce)[0] < 1e-3);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask_and_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(&t2(2, 4, vec![0.0; 8])).unwrap();
        assert!(tape.cross_entropy(logits, &[0, 1], &[false, false]).is_err());
        assert!(tape.cross_entropy(logits, &[0, 9], &[true, true]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(1, 4, vec![3.7; 4])).unwrap();
        let gain = tape.constant(&Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let bias = tape.constant(&Tensor::new(vec![4], vec![0.0; 4]).unwrap()).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2], vec![1e308, 1e308]).unwrap()).unwrap();
        assert!(tape.add(x, x).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = Tensor::param(vec![2], vec![1.0, -2.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(x) = x^2 at x = 1, lr = 0.1
        let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        p.grad = Some(vec![2.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.data[0] < 1.0);
        assert!(p.data[0] * p.data[0] < 1.0);
    }

    #[test]
    fn backward_gradients_are_deterministic() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(99);
            let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::param(vec![3, 4], data).unwrap()).unwrap();
            let w = tape
                .constant(&t2(4, 2, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()))
                .unwrap();
            let y = tape.matmul(x, w).unwrap();
            let z = tape.gelu(y).unwrap();
            let s = tape.sum(z).unwrap();
            tape.backward(s).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2, "gradients must be bit-identical across rebuilds");
    }

    #[test]
    fn softmax_rows_sum_to_one_tightly() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut tape = Tape::new();
        for _ in 0..200 {
            let c = rng.random_range(2..12);
            let data: Vec<f64> = (0..c).map(|_| rng.random_range(-8.0..8.0)).collect();
            let x = tape.constant(&Tensor::new(vec![c], data).unwrap()).unwrap();
            let p = tape.softmax(x, rng.random_range(0.25..4.0)).unwrap();
            let s: f64 = tape.data(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn untracked_constants_receive_no_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::param(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.constant(&t2(2, 1, vec![3.0, 4.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
    }
}
