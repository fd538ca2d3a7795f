//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] in construction order; because every
//! op's inputs precede it on the tape, a single reverse sweep visits each node
//! exactly once in reverse topological order. Everything is 64-bit: the test
//! suite leans on tight central-finite-difference checks that 32-bit noise
//! would drown.
//!
//! Gradients accumulate: [`Tape::backward`] adds into the `grad` buffers of
//! tensors created with `requires_grad`, and repeated calls without
//! [`Tape::zero_grad`] keep summing.

use crate::error::{Error, Result};

/// Below this L2 norm a normalization segment is treated as degenerate and
/// the op errors instead of silently dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Sigmoid inputs are clamped to this magnitude so `exp` never overflows or
/// underflows to a hard 0/1; σ stays inside (0, 1) for every finite input.
const SIGMOID_CLAMP: f64 = 708.0;

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Add { a: TensorId, b: TensorId },
    AddRow { a: TensorId, row: TensorId, rows: usize, cols: usize },
    Mul { a: TensorId, b: TensorId },
    Sigmoid { a: TensorId },
    /// Per-row L2 normalization of disjoint column segments; columns outside
    /// every segment pass through unchanged.
    NormalizeSegments { a: TensorId, cols: usize, segments: Vec<(usize, usize)> },
    /// y[r,c] = x[r,c] * gamma[map[c]] with scatter-add gradient into gamma.
    ScaleColumns { x: TensorId, gamma: TensorId, map: Vec<usize>, cols: usize },
    ConcatCols { parts: Vec<TensorId>, widths: Vec<usize>, rows: usize },
    Sum { a: TensorId },
    /// Sigmoid cross-entropy against fixed targets in [0,1]: mean over rows,
    /// sum over columns.
    SigmoidCe { logits: TensorId, targets: Vec<f64>, rows: usize },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Tape of tensors and recorded operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numerically stable sigmoid; see `SIGMOID_CLAMP`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softplus log(1 + e^x).
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of tensors on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a leaf tensor. `requires_grad` marks it for gradient output.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if numel(&shape) != data.len() {
            return Err(Error::Validation(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf without gradient tracking (inputs, constants).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, requires_grad, grad: None, op });
        id
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient; `None` until a backward pass reaches this tensor
    /// (and always `None` for tensors created without `requires_grad`).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clear all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch { op, lhs: other.to_vec(), rhs: vec![0, 0] }),
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Matrix product `[m×k] × [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(out, vec![m, n], false, Op::MatMul { a, b, m, k, n }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, false, Op::Add { a, b }))
    }

    /// Broadcast-add a row vector to every row of a matrix (bias).
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "add_row")?;
        if self.value(row).len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let mut out = self.value(a).to_vec();
        let rv = self.value(row).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += rv[c];
            }
        }
        Ok(self.push(out, vec![rows, cols], false, Op::AddRow { a, row, rows, cols }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, false, Op::Mul { a, b }))
    }

    /// Elementwise stable sigmoid.
    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, false, Op::Sigmoid { a })
    }

    /// L2-normalize one column range of a vector (or of each row of a
    /// matrix); columns outside the range are unchanged. The backward pass
    /// applies the exact full Jacobian, cross terms included.
    pub fn l2_normalize_segment(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        self.l2_normalize_segments(a, &[(start, end)])
    }

    /// Same as [`Tape::l2_normalize_segment`] for several disjoint segments.
    pub fn l2_normalize_segments(&mut self, a: TensorId, segments: &[(usize, usize)]) -> Result<TensorId> {
        let (rows, cols) = match self.nodes[a.0].shape.as_slice() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::ShapeMismatch { op: "l2_normalize", lhs: other.to_vec(), rhs: vec![] })
            }
        };
        for &(s, e) in segments {
            if s >= e || e > cols {
                return Err(Error::Validation(format!(
                    "segment {s}..{e} out of bounds for width {cols}"
                )));
            }
        }
        let mut out = self.value(a).to_vec();
        for r in 0..rows {
            let base = r * cols;
            for &(s, e) in segments {
                let seg = &out[base + s..base + e];
                let norm = seg.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= NORM_EPS {
                    return Err(Error::DegenerateSegment { start: s, end: e, norm, eps: NORM_EPS });
                }
                for v in &mut out[base + s..base + e] {
                    *v /= norm;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            out,
            shape,
            false,
            Op::NormalizeSegments { a, cols, segments: segments.to_vec() },
        ))
    }

    /// Scale each column `c` of `x` by `gamma[map[c]]`.
    pub fn scale_columns(&mut self, x: TensorId, gamma: TensorId, map: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "scale_columns")?;
        if map.len() != cols {
            return Err(Error::Validation(format!(
                "scale_columns map length {} != {} columns",
                map.len(),
                cols
            )));
        }
        let g = self.value(gamma).to_vec();
        if let Some(&bad) = map.iter().find(|&&i| i >= g.len()) {
            return Err(Error::Validation(format!(
                "scale_columns map index {bad} out of range for {} scaling factors",
                g.len()
            )));
        }
        let xs = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xs[r * cols + c] * g[map[c]];
            }
        }
        Ok(self.push(
            out,
            vec![rows, cols],
            false,
            Op::ScaleColumns { x, gamma, map: map.to_vec(), cols },
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Validation("concat_cols needs at least one part".into()));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let data = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            out,
            vec![rows, total],
            false,
            Op::ConcatCols { parts: parts.to_vec(), widths, rows },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![s], vec![1], false, Op::Sum { a })
    }

    /// Sigmoid cross-entropy of logits against fixed targets in [0,1]:
    /// `-(1/rows) Σ_r Σ_c [t·log σ(x) + (1-t)·log(1-σ(x))]`, i.e. mean over
    /// rows and *sum* over columns. Computed as `softplus(x) - x·t` per cell.
    pub fn sigmoid_cross_entropy(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let (rows, cols) = self.dims2(logits, "sigmoid_cross_entropy")?;
        if targets.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "sigmoid_cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t) || t.is_nan()) {
            return Err(Error::Validation(format!("target {bad} outside [0,1]")));
        }
        let xs = self.value(logits);
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(targets) {
            total += softplus_scalar(*x) - x * t;
        }
        let out = total / rows as f64;
        Ok(self.push(
            vec![out],
            vec![1],
            false,
            Op::SigmoidCe { logits, targets: targets.to_vec(), rows },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Adds dLoss/dLeaf into the `grad`
    /// buffer of every tensor created with `requires_grad`; calling again
    /// without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NotScalar { op: "backward", shape: self.shape(loss).to_vec() });
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(up) = adj[i].take() else { continue };
            // Fold into persistent grad for requires_grad tensors before
            // propagating further down.
            if self.nodes[i].requires_grad {
                let len = self.nodes[i].data.len();
                let g = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; len]);
                for (acc, u) in g.iter_mut().zip(&up) {
                    *acc += u;
                }
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    // dA = up · Bᵀ ; dB = Aᵀ · up
                    let bv = &self.nodes[b.0].data;
                    let av = &self.nodes[a.0].data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let up_row = &up[r * n..(r + 1) * n];
                        for c in 0..k {
                            let b_row = &bv[c * n..(c + 1) * n];
                            da[r * k + c] = up_row.iter().zip(b_row).map(|(u, b)| u * b).sum();
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for j in 0..m {
                        let up_row = &up[j * n..(j + 1) * n];
                        for r in 0..k {
                            let scale = av[j * k + r];
                            let db_row = &mut db[r * n..(r + 1) * n];
                            for (d, u) in db_row.iter_mut().zip(up_row) {
                                *d += scale * u;
                            }
                        }
                    }
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, a, up.clone());
                    accumulate(&mut adj, b, up);
                }
                Op::AddRow { a, row, rows, cols } => {
                    let mut drow = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            drow[c] += up[r * cols + c];
                        }
                    }
                    accumulate(&mut adj, a, up);
                    accumulate(&mut adj, row, drow);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        up.iter().zip(&self.nodes[b.0].data).map(|(u, y)| u * y).collect();
                    let db: Vec<f64> =
                        up.iter().zip(&self.nodes[a.0].data).map(|(u, x)| u * x).collect();
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Sigmoid { a } => {
                    let da: Vec<f64> = up
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(u, s)| u * s * (1.0 - s))
                        .collect();
                    accumulate(&mut adj, a, da);
                }
                Op::NormalizeSegments { a, cols, segments } => {
                    // Exact Jacobian: dx = (g - x̂ (g·x̂)) / ‖x‖ per segment;
                    // the -x_i x_j/‖x‖³ cross terms come out of the g·x̂ dot.
                    let xv = &self.nodes[a.0].data;
                    let rows = xv.len() / cols;
                    let mut da = up.clone();
                    for r in 0..rows {
                        let base = r * cols;
                        for &(s, e) in &segments {
                            let seg = &xv[base + s..base + e];
                            let norm = seg.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let dot: f64 = up[base + s..base + e]
                                .iter()
                                .zip(seg)
                                .map(|(u, x)| u * x / norm)
                                .sum();
                            for (j, x) in seg.iter().enumerate() {
                                let xhat = x / norm;
                                da[base + s + j] = (up[base + s + j] - xhat * dot) / norm;
                            }
                        }
                    }
                    accumulate(&mut adj, a, da);
                }
                Op::ScaleColumns { x, gamma, map, cols } => {
                    let xv = &self.nodes[x.0].data;
                    let gv = &self.nodes[gamma.0].data;
                    let rows = xv.len() / cols;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dg = vec![0.0; gv.len()];
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            dx[idx] = up[idx] * gv[map[c]];
                            dg[map[c]] += up[idx] * xv[idx];
                        }
                    }
                    accumulate(&mut adj, x, dx);
                    accumulate(&mut adj, gamma, dg);
                }
                Op::ConcatCols { parts, widths, rows } => {
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&up[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut adj, p, dp);
                        offset += w;
                    }
                }
                Op::Sum { a } => {
                    let da = vec![up[0]; self.nodes[a.0].data.len()];
                    accumulate(&mut adj, a, da);
                }
                Op::SigmoidCe { logits, targets, rows } => {
                    let scale = up[0] / rows as f64;
                    let dx: Vec<f64> = self.nodes[logits.0]
                        .data
                        .iter()
                        .zip(&targets)
                        .map(|(x, t)| scale * (sigmoid_scalar(*x) - t))
                        .collect();
                    accumulate(&mut adj, logits, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: TensorId, delta: Vec<f64>) {
    match &mut adj[id.0] {
        Some(buf) => {
            for (a, d) in buf.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// Plain row-major matrix multiply.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::Rng;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // gradient of sum(A·B) for a 3×4 · 4×2 product, step 1e-5.
        let mut rng = crate::seeds::rng(11, "tensor/matmul-fd");
        let a0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut t = Tape::new();
        let a = t.leaf(a0.clone(), vec![3, 4], true).unwrap();
        let b = t.leaf(b0.clone(), vec![4, 2], true).unwrap();
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        let ga = t.grad(a).unwrap().to_vec();
        let gb = t.grad(b).unwrap().to_vec();

        let num_a = central_diff(
            |xs| {
                let mut t = Tape::new();
                let a = t.leaf(xs.to_vec(), vec![3, 4], false).unwrap();
                let b = t.constant(b0.clone(), vec![4, 2]).unwrap();
                let c = t.matmul(a, b).unwrap();
                let l = t.sum(c);
                t.scalar(l)
            },
            &a0,
            1e-5,
        );
        let num_b = central_diff(
            |xs| {
                let mut t = Tape::new();
                let a = t.constant(a0.clone(), vec![3, 4]).unwrap();
                let b = t.leaf(xs.to_vec(), vec![4, 2], false).unwrap();
                let c = t.matmul(a, b).unwrap();
                let l = t.sum(c);
                t.scalar(l)
            },
            &b0,
            1e-5,
        );
        assert!(max_rel_err(&ga, &num_a) < 1e-6);
        assert!(max_rel_err(&gb, &num_b) < 1e-6);
    }

    #[test]
    fn sigmoid_values_and_stability() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, -1000.0, 1000.0, -700.0], vec![4]).unwrap();
        let s = t.sigmoid(x);
        let v = t.value(s);
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] <= 1e-300, "sigmoid(-1000) = {:e}", v[1]);
        assert!(v[2] > 0.999 && v[2] <= 1.0);
        assert!(v[3] > 0.0 && v[3].is_finite());
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sigmoid_backward_at_zero() {
        // σ'(0) = σ(0)(1-σ(0)) = 0.25
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0], vec![1], true).unwrap();
        let s = t.sigmoid(x);
        let l = t.sum(s);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(vec![3.0, 4.0], vec![2]).unwrap();
        let y = t.l2_normalize_segment(x, 0, 2).unwrap();
        assert_eq!(t.value(y), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_backward_has_cross_terms() {
        // x=[3,4], upstream [1,0]:
        //   dL/dx1 = 1/5 - 9/125 = 0.128, dL/dx2 = -3·4/125 = -0.096
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, 4.0], vec![1, 2], true).unwrap();
        let y = t.l2_normalize_segment(x, 0, 2).unwrap();
        let pick = t.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let prod = t.mul(y, pick).unwrap();
        let l = t.sum(prod);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - 0.128).abs() < 1e-15, "{:?}", g);
        assert!((g[1] + 0.096).abs() < 1e-15, "{:?}", g);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = crate::seeds::rng(5, "tensor/norm-fd");
        let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), vec![8], true).unwrap();
        let y = t.l2_normalize_segment(x, 2, 7).unwrap();
        let wt = t.constant(w.clone(), vec![8]).unwrap();
        let p = t.mul(y, wt).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap().to_vec();

        let num = central_diff(
            |xs| {
                let mut t = Tape::new();
                let x = t.leaf(xs.to_vec(), vec![8], false).unwrap();
                let y = t.l2_normalize_segment(x, 2, 7).unwrap();
                let wt = t.constant(w.clone(), vec![8]).unwrap();
                let p = t.mul(y, wt).unwrap();
                let l = t.sum(p);
                t.scalar(l)
            },
            &x0,
            1e-5,
        );
        assert!(max_rel_err(&g, &num) < 1e-6, "{}", max_rel_err(&g, &num));
    }

    #[test]
    fn normalize_zero_segment_errors() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 0.0, 0.0, 2.0], vec![4]).unwrap();
        let err = t.l2_normalize_segment(x, 1, 3).unwrap_err();
        assert!(matches!(err, Error::DegenerateSegment { .. }));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0, -3.0, 7.0, 0.0, 1.0, 5.0], vec![2, 3], true).unwrap();
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        // d/dx sum(x·x) = 2x
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn backward_composite_chain_matches_finite_differences() {
        // sigmoid ∘ matmul chain, rel. error < 1e-5.
        let mut rng = crate::seeds::rng(3, "tensor/chain-fd");
        let w0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |w: &[f64], tape_out: bool| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let w = t.leaf(w.to_vec(), vec![4, 3], tape_out).unwrap();
            let x = t.constant(x0.clone(), vec![2, 4]).unwrap();
            let h = t.matmul(x, w).unwrap();
            let s = t.sigmoid(h);
            let l = t.sum(s);
            let v = t.scalar(l);
            if tape_out {
                t.backward(l).unwrap();
                (v, t.grad(w).unwrap().to_vec())
            } else {
                (v, vec![])
            }
        };
        let (_, g) = run(&w0, true);
        let num = central_diff(|ws| run(ws, false).0, &w0, 1e-5);
        assert!(max_rel_err(&g, &num) < 1e-5);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let l = t.sum(x);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn grad_only_on_requires_grad_tensors() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        let c = t.constant(vec![3.0, 4.0], vec![1, 2]).unwrap();
        let p = t.mul(x, c).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(x).is_some());
        assert!(t.grad(c).is_none());
        assert!(t.grad(p).is_none());
        assert!(t.grad(l).is_none());
    }

    #[test]
    fn concat_and_scale_columns_roundtrip_gradients() {
        let mut rng = crate::seeds::rng(9, "tensor/concat-fd");
        let a0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g0: Vec<f64> = vec![1.5, -0.5];
        let map = vec![0usize, 0, 0, 1, 1];

        let run = |a: &[f64], b: &[f64], g: &[f64], want_grad: bool| {
            let mut t = Tape::new();
            let a = t.leaf(a.to_vec(), vec![2, 3], want_grad).unwrap();
            let b = t.leaf(b.to_vec(), vec![2, 2], want_grad).unwrap();
            let g = t.leaf(g.to_vec(), vec![2], want_grad).unwrap();
            let cat = t.concat_cols(&[a, b]).unwrap();
            let scaled = t.scale_columns(cat, g, &map).unwrap();
            let sq = t.mul(scaled, scaled).unwrap();
            let l = t.sum(sq);
            let v = t.scalar(l);
            if want_grad {
                t.backward(l).unwrap();
                (
                    v,
                    t.grad(a).unwrap().to_vec(),
                    t.grad(b).unwrap().to_vec(),
                    t.grad(g).unwrap().to_vec(),
                )
            } else {
                (v, vec![], vec![], vec![])
            }
        };
        let (_, ga, gb, gg) = run(&a0, &b0, &g0, true);
        let na = central_diff(|xs| run(xs, &b0, &g0, false).0, &a0, 1e-5);
        let nb = central_diff(|xs| run(&a0, xs, &g0, false).0, &b0, 1e-5);
        let ng = central_diff(|xs| run(&a0, &b0, xs, false).0, &g0, 1e-5);
        assert!(max_rel_err(&ga, &na) < 1e-6);
        assert!(max_rel_err(&gb, &nb) < 1e-6);
        assert!(max_rel_err(&gg, &ng) < 1e-6);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// (A·B)·C == A·(B·C) to 1e-12 relative error.
            #[test]
            fn matmul_is_associative(
                a in proptest::collection::vec(-3.0f64..3.0, 6),
                b in proptest::collection::vec(-3.0f64..3.0, 12),
                c in proptest::collection::vec(-3.0f64..3.0, 8),
            ) {
                let mut t = Tape::new();
                let a = t.constant(a, vec![2, 3]).unwrap();
                let b = t.constant(b, vec![3, 4]).unwrap();
                let c = t.constant(c, vec![4, 2]).unwrap();
                let ab = t.matmul(a, b).unwrap();
                let left = t.matmul(ab, c).unwrap();
                let bc = t.matmul(b, c).unwrap();
                let right = t.matmul(a, bc).unwrap();
                for (l, r) in t.value(left).iter().zip(t.value(right)) {
                    let scale = l.abs().max(r.abs()).max(1.0);
                    prop_assert!((l - r).abs() / scale < 1e-12);
                }
            }

            /// Normalized segments land on the unit sphere to 1e-12.
            #[test]
            fn normalized_segment_has_unit_norm(
                xs in proptest::collection::vec(0.05f64..4.0, 2..12),
                flip in proptest::collection::vec(proptest::bool::ANY, 12),
            ) {
                let xs: Vec<f64> = xs
                    .iter()
                    .zip(&flip)
                    .map(|(x, f)| if *f { -x } else { *x })
                    .collect();
                let n = xs.len();
                let mid = n / 2;
                let mut t = Tape::new();
                let x = t.constant(xs.clone(), vec![n]).unwrap();
                for (s, e) in [(0usize, n), (0, mid.max(1)), (mid.max(1).min(n - 1), n)] {
                    let y = t.l2_normalize_segment(x, s, e).unwrap();
                    let norm: f64 =
                        t.value(y)[s..e].iter().map(|v| v * v).sum::<f64>().sqrt();
                    prop_assert!((norm - 1.0).abs() < 1e-12);
                    // Outside the segment nothing moves.
                    for i in (0..s).chain(e..n) {
                        prop_assert_eq!(t.value(y)[i], xs[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let build = || {
            let mut rng = crate::seeds::rng(21, "tensor/det");
            let w0: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let w = t.leaf(w0, vec![5, 4], true).unwrap();
            let x = t.constant((0..10).map(|i| i as f64 * 0.1).collect(), vec![2, 5]).unwrap();
            let h = t.matmul(x, w).unwrap();
            let s = t.sigmoid(h);
            let n = t.l2_normalize_segments(s, &[(0, 2), (2, 4)]).unwrap();
            let l = t.sum(n);
            t.backward(l).unwrap();
            t.grad(w).unwrap().to_vec()
        };
        let a = build();
        let b = build();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
