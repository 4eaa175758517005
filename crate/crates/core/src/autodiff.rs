//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the recording in reverse and accumulates gradients into every
//! participating tensor. Tapes are short-lived: one recording per training
//! step, confined to a single worker. Parallel workers each own their tape
//! and merge extracted gradients afterwards in a fixed order.
//!
//! Tensors are row-major f64 buffers of rank 0 (scalars), 1 (vectors), or
//! 2 (matrices). Matrix multiplication is delegated to `matrixmultiply`;
//! everything else is straightforward elementwise or reduction code.

use crate::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A value recorded on the tape, with an optional gradient after backward.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub gradient: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.len() <= 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C[m,n] = A[m,k] B[k,n]
    MatMul { a: TensorId, b: TensorId },
    /// C[m,n] = A[m,k] B[n,k]^T
    MatMulNt { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    MulElem { a: TensorId, b: TensorId },
    DivElem { a: TensorId, b: TensorId },
    /// out[i,j] = m[i,j] + row[j]
    AddRow { m: TensorId, row: TensorId },
    /// out[i,j] = m[i,j] * s[i]
    ScaleRows { m: TensorId, s: TensorId },
    Scale { a: TensorId, c: f64 },
    AddConst { a: TensorId },
    Neg { a: TensorId },
    Relu { a: TensorId },
    Tanh { a: TensorId },
    Exp { a: TensorId },
    Square { a: TensorId },
    /// sqrt(x + eps); eps keeps the derivative finite at zero
    SqrtEps { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    /// [r,c] -> [r], summing each row
    SumRows { a: TensorId },
    /// per-column clamp with zero gradient outside [lo, hi]
    ClampCols { a: TensorId, lo: Vec<f64>, hi: Vec<f64> },
    /// out[i,j] = a[i,j] * scale[j] + shift[j]
    ColAffine { a: TensorId, scale: Vec<f64> },
    ConcatCols { a: TensorId, b: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize, end: usize },
    Reshape { a: TensorId },
    /// elementwise sum of same-shaped tensors
    AddMany { parts: Vec<TensorId> },
    /// min over scalars; subgradient routed to the lowest-index argmin
    MinMany { parts: Vec<TensorId> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// A recording of tensor operations supporting one reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("rank > 2 unsupported"),
    }
}

/// Disjoint borrows of one node's gradient and another node's values.
fn grad_and_values(nodes: &mut [Node], grad_of: usize, values_of: usize) -> (&mut [f64], &[f64]) {
    debug_assert_ne!(grad_of, values_of);
    if grad_of < values_of {
        let (lo, hi) = nodes.split_at_mut(values_of);
        (&mut lo[grad_of].grad, &hi[0].values)
    } else {
        let (lo, hi) = nodes.split_at_mut(grad_of);
        (&mut hi[0].grad, &lo[values_of].values)
    }
}

/// C[m,n] (+)= alpha * A[m,k] * B[k,n], with optional transposition flags
/// interpreting each operand's storage. `beta` of 1.0 accumulates into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    // Row-major strides; a transposed operand is stored [k,m] or [n,k].
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: Vec::new(),
            op,
        });
        id
    }

    /// Record a leaf tensor (parameter or constant input).
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf shape/buffer mismatch"
        );
        self.push(shape, values, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![], vec![v], Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient buffer of `id`; empty slice before `backward` has run.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Snapshot of a node as a plain [`Tensor`].
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            gradient: if n.grad.is_empty() {
                None
            } else {
                Some(n.grad.clone())
            },
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = rows_cols(self.shape(a));
        let (kb, n) = rows_cols(self.shape(b));
        assert_eq!(ka, kb, "matmul inner dimensions {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm(
            m, ka, n, 1.0,
            &self.nodes[a.0].values, false,
            &self.nodes[b.0].values, false,
            0.0, &mut out,
        );
        self.push(vec![m, n], out, Op::MatMul { a, b })
    }

    /// a[m,k] times b[n,k] transposed; the natural layout for row-per-output
    /// weight matrices.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = rows_cols(self.shape(a));
        let (n, kb) = rows_cols(self.shape(b));
        assert_eq!(ka, kb, "matmul_nt inner dimensions {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm(
            m, ka, n, 1.0,
            &self.nodes[a.0].values, false,
            &self.nodes[b.0].values, true,
            0.0, &mut out,
        );
        self.push(vec![m, n], out, Op::MatMulNt { a, b })
    }

    fn zip_elem(&mut self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.zip_elem(a, b, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.zip_elem(a, b, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.zip_elem(a, b, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::MulElem { a, b })
    }

    pub fn div_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.zip_elem(a, b, |x, y| x / y);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::DivElem { a, b })
    }

    /// Broadcast-add a length-`c` row vector to every row of an [r,c] matrix.
    pub fn add_row(&mut self, m: TensorId, row: TensorId) -> TensorId {
        let (r, c) = rows_cols(self.shape(m));
        assert_eq!(
            self.nodes[row.0].values.len(),
            c,
            "add_row width mismatch"
        );
        let mut out = Vec::with_capacity(r * c);
        let mv = &self.nodes[m.0].values;
        let rv = &self.nodes[row.0].values;
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] + rv[j]);
            }
        }
        self.push(vec![r, c], out, Op::AddRow { m, row })
    }

    /// Scale row i of an [r,c] matrix by s[i].
    pub fn scale_rows(&mut self, m: TensorId, s: TensorId) -> TensorId {
        let (r, c) = rows_cols(self.shape(m));
        assert_eq!(self.nodes[s.0].values.len(), r, "scale_rows length mismatch");
        let mv = &self.nodes[m.0].values;
        let sv = &self.nodes[s.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] * sv[i]);
            }
        }
        self.push(vec![r, c], out, Op::ScaleRows { m, s })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.nodes[a.0].values.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::AddConst { a })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let out = self.nodes[a.0].values.iter().map(|&x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Neg { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out = self.nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let out = self.nodes[a.0].values.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let out = self.nodes[a.0].values.iter().map(|&x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Exp { a })
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let out = self.nodes[a.0].values.iter().map(|&x| x * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Square { a })
    }

    pub fn sqrt_eps(&mut self, a: TensorId, eps: f64) -> TensorId {
        let out = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| (x + eps).sqrt())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::SqrtEps { a })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].values.iter().sum();
        self.push(vec![], vec![s], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].values.len() as f64;
        let s = self.nodes[a.0].values.iter().sum::<f64>() / n;
        self.push(vec![], vec![s], Op::MeanAll { a })
    }

    pub fn sum_rows(&mut self, a: TensorId) -> TensorId {
        let (r, c) = rows_cols(self.shape(a));
        let av = &self.nodes[a.0].values;
        let out = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(vec![r], out, Op::SumRows { a })
    }

    /// Per-column clamp of an [r,c] matrix. NaN inputs propagate so that
    /// divergence remains detectable downstream.
    pub fn clamp_cols(&mut self, a: TensorId, lo: &[f64], hi: &[f64]) -> TensorId {
        let (r, c) = rows_cols(self.shape(a));
        assert_eq!(lo.len(), c, "clamp_cols lo width");
        assert_eq!(hi.len(), c, "clamp_cols hi width");
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av[i * c + j];
                out.push(if x < lo[j] {
                    lo[j]
                } else if x > hi[j] {
                    hi[j]
                } else {
                    x
                });
            }
        }
        self.push(
            vec![r, c],
            out,
            Op::ClampCols {
                a,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
        )
    }

    /// out[i,j] = a[i,j] * scale[j] + shift[j]; normalization and its inverse.
    pub fn col_affine(&mut self, a: TensorId, scale: &[f64], shift: &[f64]) -> TensorId {
        let (r, c) = rows_cols(self.shape(a));
        assert_eq!(scale.len(), c, "col_affine scale width");
        assert_eq!(shift.len(), c, "col_affine shift width");
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] * scale[j] + shift[j]);
            }
        }
        self.push(
            vec![r, c],
            out,
            Op::ColAffine {
                a,
                scale: scale.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ra, ca) = rows_cols(self.shape(a));
        let (rb, cb) = rows_cols(self.shape(b));
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(vec![ra, ca + cb], out, Op::ConcatCols { a, b })
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, c) = rows_cols(self.shape(parts[0]));
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (rp, cp) = rows_cols(self.shape(p));
            assert_eq!(cp, c, "concat_rows column mismatch");
            rows += rp;
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        self.push(vec![rows, c], out, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> TensorId {
        let (r, c) = rows_cols(self.shape(a));
        assert!(start < end && end <= c, "slice_cols bounds");
        let av = &self.nodes[a.0].values;
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + end]);
        }
        self.push(vec![r, w], out, Op::SliceCols { a, start, end })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].values.len(),
            "reshape numel mismatch"
        );
        let values = self.nodes[a.0].values.clone();
        self.push(shape, values, Op::Reshape { a })
    }

    pub fn add_many(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "add_many of nothing");
        let shape = self.nodes[parts[0].0].shape.clone();
        let mut out = self.nodes[parts[0].0].values.clone();
        for &p in &parts[1..] {
            assert_eq!(self.shape(p), shape.as_slice(), "add_many shape mismatch");
            for (o, &x) in out.iter_mut().zip(&self.nodes[p.0].values) {
                *o += x;
            }
        }
        self.push(shape, out, Op::AddMany { parts: parts.to_vec() })
    }

    /// Minimum over scalar tensors. The backward pass routes the whole
    /// gradient to the lowest-index operand attaining the minimum.
    pub fn min_many(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "min_many of nothing");
        let mut best = f64::INFINITY;
        for &p in parts {
            assert_eq!(self.nodes[p.0].values.len(), 1, "min_many needs scalars");
            let v = self.nodes[p.0].values[0];
            if v < best {
                best = v;
            }
        }
        self.push(vec![], vec![best], Op::MinMany { parts: parts.to_vec() })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(node) into every node's gradient buffer.
    /// `loss` must be a scalar produced by this tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 || self.nodes[loss.0].shape.len() > 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.values.len()];
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            // Split borrows: the node being processed vs. its inputs.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut node.grad);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = rows_cols(&before[a.0].shape);
                    let (_, n) = rows_cols(&before[b.0].shape);
                    // dA += G B^T ; dB += A^T G
                    if a == b {
                        let av = before[a.0].values.clone();
                        gemm(m, n, k, 1.0, &g, false, &av, true, 1.0, &mut before[a.0].grad);
                        gemm(k, m, n, 1.0, &av, true, &g, false, 1.0, &mut before[b.0].grad);
                    } else {
                        let (da, bv) = grad_and_values(before, a.0, b.0);
                        gemm(m, n, k, 1.0, &g, false, bv, true, 1.0, da);
                        let (db, av) = grad_and_values(before, b.0, a.0);
                        gemm(k, m, n, 1.0, av, true, &g, false, 1.0, db);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = rows_cols(&before[a.0].shape);
                    let (n, _) = rows_cols(&before[b.0].shape);
                    // C = A B^T  =>  dA += G B ; dB += G^T A
                    if a == b {
                        let av = before[a.0].values.clone();
                        gemm(m, n, k, 1.0, &g, false, &av, false, 1.0, &mut before[a.0].grad);
                        gemm(n, m, k, 1.0, &g, true, &av, false, 1.0, &mut before[b.0].grad);
                    } else {
                        let (da, bv) = grad_and_values(before, a.0, b.0);
                        gemm(m, n, k, 1.0, &g, false, bv, false, 1.0, da);
                        let (db, av) = grad_and_values(before, b.0, a.0);
                        gemm(n, m, k, 1.0, &g, true, av, false, 1.0, db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (ga, &gi) in before[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, &gi) in before[b.0].grad.iter_mut().zip(&g) {
                        *gb += gi;
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    for (ga, &gi) in before[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, &gi) in before[b.0].grad.iter_mut().zip(&g) {
                        *gb -= gi;
                    }
                }
                Op::MulElem { a, b } => {
                    let (a, b) = (*a, *b);
                    for idx in 0..g.len() {
                        let av = before[a.0].values[idx];
                        let bv = before[b.0].values[idx];
                        before[a.0].grad[idx] += g[idx] * bv;
                        before[b.0].grad[idx] += g[idx] * av;
                    }
                }
                Op::DivElem { a, b } => {
                    let (a, b) = (*a, *b);
                    for idx in 0..g.len() {
                        let av = before[a.0].values[idx];
                        let bv = before[b.0].values[idx];
                        before[a.0].grad[idx] += g[idx] / bv;
                        before[b.0].grad[idx] -= g[idx] * av / (bv * bv);
                    }
                }
                Op::AddRow { m, row } => {
                    let (m, row) = (*m, *row);
                    let c = before[row.0].values.len();
                    for (gm, &gi) in before[m.0].grad.iter_mut().zip(&g) {
                        *gm += gi;
                    }
                    for (idx, &gi) in g.iter().enumerate() {
                        before[row.0].grad[idx % c] += gi;
                    }
                }
                Op::ScaleRows { m, s } => {
                    let (m, s) = (*m, *s);
                    let r = before[s.0].values.len();
                    let c = g.len() / r;
                    for i in 0..r {
                        let si = before[s.0].values[i];
                        let mut acc = 0.0;
                        for j in 0..c {
                            let idx = i * c + j;
                            before[m.0].grad[idx] += g[idx] * si;
                            acc += g[idx] * before[m.0].values[idx];
                        }
                        before[s.0].grad[i] += acc;
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    for (ga, &gi) in before[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi * c;
                    }
                }
                Op::AddConst { a } => {
                    let a = *a;
                    for (ga, &gi) in before[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi;
                    }
                }
                Op::Neg { a } => {
                    let a = *a;
                    for (ga, &gi) in before[a.0].grad.iter_mut().zip(&g) {
                        *ga -= gi;
                    }
                }
                Op::Relu { a } => {
                    let a = *a;
                    for idx in 0..g.len() {
                        if before[a.0].values[idx] > 0.0 {
                            before[a.0].grad[idx] += g[idx];
                        }
                    }
                }
                Op::Tanh { a } => {
                    let a = *a;
                    for idx in 0..g.len() {
                        let t = node.values[idx];
                        before[a.0].grad[idx] += g[idx] * (1.0 - t * t);
                    }
                }
                Op::Exp { a } => {
                    let a = *a;
                    for idx in 0..g.len() {
                        before[a.0].grad[idx] += g[idx] * node.values[idx];
                    }
                }
                Op::Square { a } => {
                    let a = *a;
                    for idx in 0..g.len() {
                        before[a.0].grad[idx] += g[idx] * 2.0 * before[a.0].values[idx];
                    }
                }
                Op::SqrtEps { a } => {
                    let a = *a;
                    for idx in 0..g.len() {
                        before[a.0].grad[idx] += g[idx] * 0.5 / node.values[idx];
                    }
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let gi = g[0];
                    for ga in before[a.0].grad.iter_mut() {
                        *ga += gi;
                    }
                }
                Op::MeanAll { a } => {
                    let a = *a;
                    let n = before[a.0].values.len() as f64;
                    let gi = g[0] / n;
                    for ga in before[a.0].grad.iter_mut() {
                        *ga += gi;
                    }
                }
                Op::SumRows { a } => {
                    let a = *a;
                    let c = before[a.0].values.len() / g.len();
                    for (i, &gi) in g.iter().enumerate() {
                        for ga in &mut before[a.0].grad[i * c..(i + 1) * c] {
                            *ga += gi;
                        }
                    }
                }
                Op::ClampCols { a, lo, hi } => {
                    let a = *a;
                    let c = lo.len();
                    for idx in 0..g.len() {
                        let x = before[a.0].values[idx];
                        let j = idx % c;
                        if x >= lo[j] && x <= hi[j] {
                            before[a.0].grad[idx] += g[idx];
                        }
                    }
                }
                Op::ColAffine { a, scale } => {
                    let a = *a;
                    let c = scale.len();
                    for idx in 0..g.len() {
                        before[a.0].grad[idx] += g[idx] * scale[idx % c];
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let (_, ca) = rows_cols(&before[a.0].shape);
                    let (r, cb) = rows_cols(&before[b.0].shape);
                    let w = ca + cb;
                    for i in 0..r {
                        for j in 0..ca {
                            before[a.0].grad[i * ca + j] += g[i * w + j];
                        }
                        for j in 0..cb {
                            before[b.0].grad[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = before[p.0].values.len();
                        for (gp, &gi) in before[p.0].grad.iter_mut().zip(&g[offset..offset + len]) {
                            *gp += gi;
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { a, start, end } => {
                    let (a, start, end) = (*a, *start, *end);
                    let (r, c) = rows_cols(&before[a.0].shape);
                    let w = end - start;
                    for i in 0..r {
                        for j in 0..w {
                            before[a.0].grad[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::Reshape { a } => {
                    let a = *a;
                    for (ga, &gi) in before[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi;
                    }
                }
                Op::AddMany { parts } => {
                    for &p in parts {
                        for (gp, &gi) in before[p.0].grad.iter_mut().zip(&g) {
                            *gp += gi;
                        }
                    }
                }
                Op::MinMany { parts } => {
                    let mut best = f64::INFINITY;
                    let mut arg = 0;
                    for (idx, &p) in parts.iter().enumerate() {
                        let v = before[p.0].values[0];
                        if v < best {
                            best = v;
                            arg = idx;
                        }
                    }
                    before[parts[arg].0].grad[0] += g[0];
                }
            }
            self.nodes[i].grad = g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_grad, max_rel_err};
    use rand::Rng;

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![1]);
        let y = tape.square(x);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
    }

    #[test]
    fn min_routes_gradient_to_argmin_only() {
        let mut tape = Tape::new();
        let a = tape.scalar(2.0);
        let b = tape.scalar(5.0);
        let m = tape.min_many(&[a, b]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a), &[1.0]);
        assert_eq!(tape.grad(b), &[0.0]);
    }

    #[test]
    fn min_ties_break_to_lowest_index() {
        let mut tape = Tape::new();
        let a = tape.scalar(4.0);
        let b = tape.scalar(4.0);
        let m = tape.min_many(&[a, b]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a), &[1.0]);
        assert_eq!(tape.grad(b), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tanh_matmul_matches_finite_differences() {
        let mut rng = crate::seeding::stream(11, "adtest", 0);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |w: &[f64], x: &[f64]| {
            let mut tape = Tape::new();
            let wid = tape.leaf(w.to_vec(), vec![3, 4]);
            let xid = tape.leaf(x.to_vec(), vec![1, 4]);
            let h = tape.matmul_nt(xid, wid);
            let t = tape.tanh(h);
            let loss = tape.sum_all(t);
            (tape, wid, xid, loss)
        };

        let (mut tape, wid, xid, loss) = eval(&w, &x);
        tape.backward(loss).unwrap();
        let gw = tape.grad(wid).to_vec();
        let gx = tape.grad(xid).to_vec();

        let num_w = central_diff_grad(&w, 1e-5, |wp| {
            let (t, _, _, l) = eval(wp, &x);
            t.value_scalar(l)
        });
        let num_x = central_diff_grad(&x, 1e-5, |xp| {
            let (t, _, _, l) = eval(&w, xp);
            t.value_scalar(l)
        });
        assert!(max_rel_err(&gw, &num_w) < 1e-6, "dW mismatch");
        assert!(max_rel_err(&gx, &num_x) < 1e-6, "dx mismatch");
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // One expression exercising slice, concat, clamp (inactive), affine,
        // row ops, div, exp, sqrt and reductions together.
        let mut rng = crate::seeding::stream(13, "adtest", 1);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(0.3..0.9)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(0.3..0.9)).collect();

        let eval = |a: &[f64], b: &[f64]| {
            let mut tape = Tape::new();
            let aid = tape.leaf(a.to_vec(), vec![3, 4]);
            let bid = tape.leaf(b.to_vec(), vec![4]);
            let left = tape.slice_cols(aid, 0, 2);
            let right = tape.slice_cols(aid, 2, 4);
            let joined = tape.concat_cols(left, right);
            let biased = tape.add_row(joined, bid);
            let clamped = tape.clamp_cols(biased, &[-10.0; 4], &[10.0; 4]);
            let scaled = tape.col_affine(clamped, &[0.5, 1.5, 2.0, 0.25], &[0.1; 4]);
            let sq = tape.square(scaled);
            let rows = tape.sum_rows(sq);
            let root = tape.sqrt_eps(rows, 1e-9);
            let e = tape.exp(root);
            let m = tape.mean_all(e);
            (tape, aid, bid, m)
        };

        let (mut tape, aid, bid, loss) = eval(&a, &b);
        tape.backward(loss).unwrap();
        let ga = tape.grad(aid).to_vec();
        let gb = tape.grad(bid).to_vec();
        let num_a = central_diff_grad(&a, 1e-5, |ap| {
            let (t, _, _, l) = eval(ap, &b);
            t.value_scalar(l)
        });
        let num_b = central_diff_grad(&b, 1e-5, |bp| {
            let (t, _, _, l) = eval(&a, bp);
            t.value_scalar(l)
        });
        assert!(max_rel_err(&ga, &num_a) < 1e-6);
        assert!(max_rel_err(&gb, &num_b) < 1e-6);
    }

    #[test]
    fn clamp_zeroes_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![-2.0, 0.5, 3.0], vec![1, 3]);
        let c = tape.clamp_cols(x, &[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0]);
        assert_eq!(tape.values(c), &[-1.0, 0.5, 1.0]);
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn clamp_propagates_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![f64::NAN], vec![1, 1]);
        let c = tape.clamp_cols(x, &[-1.0], &[1.0]);
        assert!(tape.values(c)[0].is_nan());
    }

    #[test]
    fn concat_rows_stacks_and_scatters() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![1, 2]);
        let b = tape.leaf(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]);
        let cat = tape.concat_rows(&[a, b]);
        assert_eq!(tape.shape(cat), &[3, 2]);
        assert_eq!(tape.values(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sliced = tape.slice_cols(cat, 1, 2);
        let s = tape.sum_all(sliced);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), &[0.0, 1.0]);
        assert_eq!(tape.grad(b), &[0.0, 1.0, 0.0, 1.0]);
    }
}
