//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] is an append-only arena of tensors. Forward operations record
//! their inputs and a backward rule; [`Tape::backward`] walks the recording
//! in reverse exactly once and accumulates gradients into every tracked
//! tensor reachable from a scalar loss.
//!
//! The op set is what small fully connected networks and the adversarial
//! losses need: matmul, add (with row-vector broadcast), elementwise multiply,
//! scale-by-constant, tanh, sigmoid, softplus, relu, row softmax, guarded log,
//! mean, sum, concat, reshape, l1 distance, row L1-normalization, transpose
//! and row slicing. `log` is guarded as `log(max(x, 1e-12))` so cross-entropy
//! terms stay finite; all adversarial losses rely on this.

use crate::{AdpError, Result};

/// Floor applied inside [`Tape::log`].
pub const LOG_GUARD: f64 = 1e-12;

/// Row sums below this make `row_normalize` emit the uniform distribution.
pub const NORMALIZE_GUARD: f64 = 1e-12;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// rhs is a row vector broadcast over lhs's rows.
    AddRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Softplus(TensorId),
    Relu(TensorId),
    SoftmaxRows(TensorId),
    Log(TensorId),
    Mean(TensorId),
    Sum(TensorId),
    Concat(Vec<TensorId>, usize),
    Reshape(TensorId),
    L1Dist(TensorId, TensorId),
    RowNormalize(TensorId),
    Transpose(TensorId),
    SliceRows(TensorId, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

impl Node {
    fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }
    fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }
}

/// Recording arena for one forward/backward pass.
///
/// Single-threaded by design; independent tapes can live on independent
/// threads with no shared state.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
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

    /// Insert a tensor. `tracked` tensors receive gradients in `backward`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, tracked: bool) -> TensorId {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape.to_vec(), data, Op::Leaf, tracked)
    }

    /// Untracked scalar constant.
    pub fn constant(&mut self, value: f64) -> TensorId {
        self.leaf(&[1], vec![value], false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> TensorId {
        let grad = if tracked {
            Some(vec![0.0; data.len()])
        } else {
            None
        };
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Record `op` producing `data`; output is tracked iff any input is.
    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[TensorId],
    ) -> TensorId {
        let tracked = inputs.iter().any(|id| self.nodes[id.0].grad.is_some());
        self.push(shape, data, op, tracked)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    /// Gradient of a tracked tensor (zeros until `backward` runs).
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Value of a scalar tensor.
    pub fn value(&self, t: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.nodes[t.0].shape), 1);
        self.nodes[t.0].data[0]
    }

    fn require_matrix(&self, t: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let n = &self.nodes[t.0];
        match n.shape.len() {
            1 => Ok((1, n.shape[0])),
            2 => Ok((n.shape[0], n.shape[1])),
            _ => Err(AdpError::ShapeMismatch {
                op,
                lhs: n.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.require_matrix(a, "matmul")?;
        let (k2, n) = self.require_matrix(b, "matmul")?;
        if k != k2 {
            return Err(AdpError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise add; also accepts a row vector on the right, broadcast
    /// over the left operand's rows (bias add).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if numel(&sa) == numel(&sb) {
            let data = self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x + y)
                .collect();
            return Ok(self.record(sa, data, Op::Add(a, b), &[a, b]));
        }
        // Broadcast: a is (r, c), b is a length-c row.
        let (r, c) = self.require_matrix(a, "add")?;
        if numel(&sb) == c {
            let mut data = self.nodes[a.0].data.clone();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += self.nodes[b.0].data[j];
                }
            }
            return Ok(self.record(sa, data, Op::AddRow(a, b), &[a, b]));
        }
        Err(AdpError::ShapeMismatch {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    /// Elementwise multiply; shapes must have equal element counts.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if numel(&sa) != numel(&sb) {
            return Err(AdpError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.record(sa, data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.record(shape, data, Op::Scale(a, c), &[a])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        self.record(shape, data, op, &[a])
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Guarded natural log: `ln(max(x, 1e-12))`.
    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(LOG_GUARD).ln(), Op::Log(a))
    }

    /// Softmax over each row of a matrix (or over a vector).
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.require_matrix(a, "softmax")?;
        let shape = self.nodes[a.0].shape.clone();
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.record(shape, data, Op::SoftmaxRows(a), &[a]))
    }

    /// L1-normalize each row of a nonnegative matrix. Rows whose sum falls
    /// below `1e-12` become the uniform distribution (and get zero gradient).
    pub fn row_normalize(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.require_matrix(a, "row_normalize")?;
        let shape = self.nodes[a.0].shape.clone();
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let sum: f64 = row.iter().sum();
            if sum < NORMALIZE_GUARD {
                for v in row.iter_mut() {
                    *v = 1.0 / c as f64;
                }
            } else {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(self.record(shape, data, Op::RowNormalize(a), &[a]))
    }

    /// Mean over all elements (scalar output).
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.record(vec![1], vec![s / n], Op::Mean(a), &[a])
    }

    /// Sum over all elements (scalar output).
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.record(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Concatenate matrices along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        assert!(!inputs.is_empty(), "concat needs at least one input");
        let first = self.require_matrix(inputs[0], "concat")?;
        match axis {
            0 => {
                let cols = first.1;
                let mut rows = 0;
                let mut data = Vec::new();
                for &t in inputs {
                    let (r, c) = self.require_matrix(t, "concat")?;
                    if c != cols {
                        return Err(AdpError::ShapeMismatch {
                            op: "concat",
                            lhs: vec![first.0, cols],
                            rhs: self.nodes[t.0].shape.clone(),
                        });
                    }
                    rows += r;
                    data.extend_from_slice(&self.nodes[t.0].data);
                }
                Ok(self.record(
                    vec![rows, cols],
                    data,
                    Op::Concat(inputs.to_vec(), 0),
                    inputs,
                ))
            }
            1 => {
                let rows = first.0;
                let mut cols = 0;
                for &t in inputs {
                    let (r, c) = self.require_matrix(t, "concat")?;
                    if r != rows {
                        return Err(AdpError::ShapeMismatch {
                            op: "concat",
                            lhs: vec![rows, first.1],
                            rhs: self.nodes[t.0].shape.clone(),
                        });
                    }
                    cols += c;
                }
                let mut data = vec![0.0; rows * cols];
                let mut offset = 0;
                for &t in inputs {
                    let (_, c) = self.require_matrix(t, "concat")?;
                    for i in 0..rows {
                        for j in 0..c {
                            data[i * cols + offset + j] = self.nodes[t.0].data[i * c + j];
                        }
                    }
                    offset += c;
                }
                Ok(self.record(
                    vec![rows, cols],
                    data,
                    Op::Concat(inputs.to_vec(), 1),
                    inputs,
                ))
            }
            _ => Err(AdpError::invalid("concat axis", format!("axis {axis}"))),
        }
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(AdpError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.record(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Sum of absolute differences over all elements (scalar output).
    pub fn l1_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.len() != self.nodes[b.0].data.len() {
            return Err(AdpError::ShapeMismatch {
                op: "l1_distance",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.record(vec![1], vec![s], Op::L1Dist(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.require_matrix(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.record(vec![c, r], data, Op::Transpose(a), &[a]))
    }

    /// View of `count` rows of a matrix starting at `start`.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, count: usize) -> Result<TensorId> {
        let (r, c) = self.require_matrix(a, "slice_rows")?;
        if start + count > r {
            return Err(AdpError::invalid(
                "slice_rows range",
                format!("rows {start}..{} of {r}", start + count),
            ));
        }
        let data = self.nodes[a.0].data[start * c..(start + count) * c].to_vec();
        Ok(self.record(
            vec![count, c],
            data,
            Op::SliceRows(a, start),
            &[a],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of every tracked tensor reachable from `loss`.
    ///
    /// `loss` must be scalar. Each recorded operation is visited exactly once,
    /// in reverse recording order; tensors not on the path keep zero grad.
    /// Subtrees with no tracked leaves are skipped (a recorded node carries a
    /// grad slot exactly when some tracked leaf feeds it).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(AdpError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() && idx != loss.0 {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(slot) = self.nodes[idx].grad.as_mut() {
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                    let nc = self.nodes[b.0].cols();
                    // dA = G · Bᵀ
                    if self.nodes[a.0].grad.is_some() {
                        let db = &self.nodes[b.0].data;
                        let ga = ensure(&mut grads, a.0, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..nc {
                                    acc += g[i * nc + j] * db[p * nc + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    // dB = Aᵀ · G
                    if self.nodes[b.0].grad.is_some() {
                        let da = self.nodes[a.0].data.clone();
                        let gb = ensure(&mut grads, b.0, k * nc);
                        for p in 0..k {
                            for i in 0..m {
                                let av = da[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..nc {
                                    gb[p * nc + j] += av * g[i * nc + j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    let c = self.nodes[b.0].data.len();
                    let r = g.len() / c;
                    let gb = ensure(&mut grads, b.0, c);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let prod_b: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
                    let prod_a: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, a.0, &prod_b);
                    accumulate(&mut grads, b.0, &prod_a);
                }
                Op::Scale(a, c) => {
                    let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads, a.0, &scaled);
                }
                Op::Tanh(a) => {
                    let local: Vec<f64> = self.nodes[idx]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(y, gi)| gi * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, a.0, &local);
                }
                Op::Sigmoid(a) => {
                    let local: Vec<f64> = self.nodes[idx]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(y, gi)| gi * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, a.0, &local);
                }
                Op::Softplus(a) => {
                    let local: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(x, gi)| gi * sigmoid(*x))
                        .collect();
                    accumulate(&mut grads, a.0, &local);
                }
                Op::Relu(a) => {
                    let local: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, &local);
                }
                Op::Log(a) => {
                    let local: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(x, gi)| if *x > LOG_GUARD { gi / x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, &local);
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = (self.nodes[idx].rows(), self.nodes[idx].cols());
                    let y = &self.nodes[idx].data;
                    let mut local = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            local[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, a.0, &local);
                }
                Op::RowNormalize(a) => {
                    let (r, c) = (self.nodes[idx].rows(), self.nodes[idx].cols());
                    let y = &self.nodes[idx].data;
                    let x = &self.nodes[a.0].data;
                    let mut local = vec![0.0; r * c];
                    for i in 0..r {
                        let sum: f64 = x[i * c..(i + 1) * c].iter().sum();
                        if sum < NORMALIZE_GUARD {
                            continue; // degenerate rows emit a constant
                        }
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            local[i * c + j] = (gr[j] - dot) / sum;
                        }
                    }
                    accumulate(&mut grads, a.0, &local);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.len() as f64;
                    let v = g[0] / n;
                    let local = vec![v; self.nodes[a.0].data.len()];
                    accumulate(&mut grads, a.0, &local);
                }
                Op::Sum(a) => {
                    let local = vec![g[0]; self.nodes[a.0].data.len()];
                    accumulate(&mut grads, a.0, &local);
                }
                Op::Concat(inputs, axis) => match axis {
                    0 => {
                        let mut offset = 0;
                        for t in inputs {
                            let len = self.nodes[t.0].data.len();
                            accumulate(&mut grads, t.0, &g[offset..offset + len]);
                            offset += len;
                        }
                    }
                    _ => {
                        let cols = self.nodes[idx].cols();
                        let rows = self.nodes[idx].rows();
                        let mut offset = 0;
                        for t in inputs {
                            let c = self.nodes[t.0].cols();
                            let mut part = vec![0.0; rows * c];
                            for i in 0..rows {
                                for j in 0..c {
                                    part[i * c + j] = g[i * cols + offset + j];
                                }
                            }
                            accumulate(&mut grads, t.0, &part);
                            offset += c;
                        }
                    }
                },
                Op::Reshape(a) => {
                    accumulate(&mut grads, a.0, &g);
                }
                Op::L1Dist(a, b) => {
                    let s: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(x, y)| g[0] * (x - y).signum())
                        .collect();
                    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                    accumulate(&mut grads, a.0, &s);
                    accumulate(&mut grads, b.0, &neg);
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.nodes[idx].rows(), self.nodes[idx].cols());
                    let mut local = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            local[j * r + i] = g[i * c + j];
                        }
                    }
                    accumulate(&mut grads, a.0, &local);
                }
                Op::SliceRows(a, start) => {
                    let c = self.nodes[a.0].cols();
                    let ga = ensure(&mut grads, a.0, self.nodes[a.0].data.len());
                    for (i, v) in g.iter().enumerate() {
                        ga[start * c + i] += v;
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, values: &[f64]) {
    let slot = ensure(grads, idx, values.len());
    for (s, v) in slot.iter_mut().zip(values) {
        *s += v;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(&[3], vec![0.0, 0.0, 0.0], false);
        let y = t.softmax_rows(x).unwrap();
        for &v in t.data(y) {
            close(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_rows_land_on_simplex() {
        let mut t = Tape::new();
        let x = t.leaf(&[2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, -3.0], false);
        let y = t.softmax_rows(x).unwrap();
        let d = t.data(y);
        for i in 0..2 {
            let row = &d[i * 3..(i + 1) * 3];
            assert!(row.iter().all(|&v| v >= 0.0));
            close(row.iter().sum::<f64>(), 1.0, 1e-12);
        }
    }

    #[test]
    fn matmul_identity_returns_rhs() {
        let mut t = Tape::new();
        let eye = t.leaf(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            false,
        );
        let a = t.leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false);
        let y = t.matmul(eye, a).unwrap();
        assert_eq!(t.data(y), t.data(a));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 3], vec![0.0; 6], false);
        let b = t.leaf(&[2, 2], vec![0.0; 4], false);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(&[1], vec![0.0], true);
        let y = t.tanh(x);
        t.backward(y).unwrap();
        close(t.grad(x).unwrap()[0], 1.0, 1e-12);
        // finite-difference cross-check, h = 1e-5
        let h = 1e-5;
        let fd = ((h as f64).tanh() - (-h as f64).tanh()) / (2.0 * h);
        close(t.grad(x).unwrap()[0], fd, 1e-6);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true);
        let y = t.sum(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_squares_grad_matches_hand_result() {
        // loss = mean(x²), x = [1, 2] → dloss/dxᵢ = xᵢ
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.mean(sq);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        close(g[0], 1.0, 1e-12);
        close(g[1], 2.0, 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn untouched_tracked_tensor_keeps_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true);
        let unused = t.leaf(&[2], vec![5.0, 5.0], true);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn row_normalize_degenerate_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 3], vec![0.0, 0.0, 0.0], true);
        let y = t.row_normalize(x).unwrap();
        for &v in t.data(y) {
            close(v, 1.0 / 3.0, 1e-15);
        }
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_axis1_roundtrip_via_slice() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let b = t.leaf(&[2, 1], vec![9.0, 8.0], false);
        let y = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(y), &[2, 3]);
        assert_eq!(t.data(y), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn determinism_same_ops_same_bits() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(&[2, 2], vec![0.3, -0.7, 1.5, 0.1], true);
            let w = t.leaf(&[2, 2], vec![0.5, 0.2, -0.4, 1.1], true);
            let h = t.matmul(x, w).unwrap();
            let a = t.tanh(h);
            let s = t.softmax_rows(a).unwrap();
            let l = t.log(s);
            let loss = t.mean(l);
            t.backward(loss).unwrap();
            (
                t.value(loss).to_bits(),
                t.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
