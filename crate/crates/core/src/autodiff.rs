//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! The training graph is a tape of eagerly evaluated nodes. Most nodes are
//! small elementwise or matrix primitives; the recurrent parts of the network
//! (GRU sequences and the autoregressive decoder) are fused into single ops so
//! a full forward/backward pass stays at a few hundred nodes regardless of
//! sequence length, and the per-step matrix products run as plain GEMMs.
//!
//! Everything is generic over [`Real`] so the same graph code runs in `f32`
//! for training throughput and in `f64` for finite-difference gradient
//! checking.

use num_traits::Float;
use std::fmt::{Debug, Display};

/// Scalar type the engine can train in: `f32` or `f64`.
///
/// Bundles the float arithmetic itself, a GEMM kernel, and a fixed
/// little-endian byte layout used by checkpoints.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Tag stored in checkpoint headers.
    const DTYPE: &'static str;
    /// Serialized size in bytes.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the front of `bytes` (must hold `BYTES` bytes).
    fn read_le(bytes: &[u8]) -> Self;

    /// `C[m,n] = alpha * A[m,k] * B[k,n] + beta * C`, arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha as f32,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta as f32,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(),
                rsc, csc,
            );
        }
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn from_f64s(rows: usize, cols: usize, vals: &[f64]) -> Self {
        assert_eq!(vals.len(), rows * cols);
        Tensor {
            rows,
            cols,
            data: vals.iter().map(|&v| F::from_f64(v)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// `out = a(ᵀ) · b(ᵀ) + beta·out`; transposition is a stride swap, not a copy.
    pub fn matmul_into(
        out: &mut Tensor<F>,
        a: &Tensor<F>,
        ta: bool,
        b: &Tensor<F>,
        tb: bool,
        beta: f64,
    ) {
        let (m, k, rsa, csa) = if ta {
            (a.cols, a.rows, 1isize, a.cols as isize)
        } else {
            (a.rows, a.cols, a.cols as isize, 1isize)
        };
        let (kb, n, rsb, csb) = if tb {
            (b.cols, b.rows, 1isize, b.cols as isize)
        } else {
            (b.rows, b.cols, b.cols as isize, 1isize)
        };
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        assert_eq!((out.rows, out.cols), (m, n), "matmul output shape mismatch");
        F::gemm(
            m,
            k,
            n,
            1.0,
            &a.data,
            rsa,
            csa,
            &b.data,
            rsb,
            csb,
            beta,
            &mut out.data,
            out.cols as isize,
            1,
        );
    }
}

/// GEMM on raw row-major blocks (used for per-step slices of cached state).
#[allow(clippy::too_many_arguments)]
fn gemm_rows<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    beta: f64,
    c: &mut [F],
) {
    // `ta`/`tb` transpose the logical operand; slices stay row-major.
    let (rsa, csa) = if ta {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    F::gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub type NodeId = usize;

enum Op<F: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Scale(NodeId, F),
    AddScalar(NodeId, F),
    MaxScalar(NodeId, F),
    ClampSym(NodeId, F),
    Square(NodeId),
    Sqrt(NodeId),
    LnClamped(NodeId),
    Elu(NodeId),
    Asin(NodeId),
    Atan2(NodeId, NodeId),
    WrapPi(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherCols {
        x: NodeId,
        idx: Vec<usize>,
    },
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    MulRow {
        x: NodeId,
        row: NodeId,
    },
    MeanCols(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Softmax(NodeId),
    TimeFlatten {
        x: NodeId,
        batch: usize,
    },
    GruSeq {
        x: NodeId,
        w_i: NodeId,
        w_h: NodeId,
        b_i: NodeId,
        b_h: NodeId,
        batch: usize,
    },
    ArDecode {
        h0: NodeId,
        first: NodeId,
        teacher: NodeId,
        w_i: NodeId,
        w_h: NodeId,
        b_i: NodeId,
        b_h: NodeId,
        w_o: NodeId,
        b_o: NodeId,
        forced: Vec<bool>,
        batch: usize,
    },
}

struct Node<F: Real> {
    op: Op<F>,
    value: Tensor<F>,
    /// Cached intermediates for fused-op backward passes.
    aux: Vec<Tensor<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads<F: Real> {
    g: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.g[id].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.g[id].take()
    }

    fn acc(&mut self, id: NodeId, t: Tensor<F>) {
        match &mut self.g[id] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Accumulates `a(ᵀ)·b(ᵀ)` into the gradient of `id` without an extra
    /// allocation when a gradient buffer already exists.
    fn acc_matmul(
        &mut self,
        id: NodeId,
        rows: usize,
        cols: usize,
        a: &Tensor<F>,
        ta: bool,
        b: &Tensor<F>,
        tb: bool,
    ) {
        let beta = if self.g[id].is_some() { 1.0 } else { 0.0 };
        let out = self.g[id].get_or_insert_with(|| Tensor::zeros(rows, cols));
        Tensor::matmul_into(out, a, ta, b, tb, beta);
    }
}

fn sig<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn col_sums<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            out.data[c] = out.data[c] + x.get(r, c);
        }
    }
    out
}

/// Wraps an angle to `(-π, π]`.
fn wrap_pi_f64(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    x - two_pi * ((x - std::f64::consts::PI) / two_pi).ceil()
}

/// Eagerly evaluated computation graph.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        self.push_aux(op, value, Vec::new())
    }

    fn push_aux(&mut self, op: Op<F>, value: Tensor<F>, aux: Vec<Tensor<F>>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        self.nodes.len() - 1
    }

    /// Inserts an input (parameter or constant) node.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.rows, ta.cols, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let mut v = self.nodes[ids[0]].value.clone();
        for &id in &ids[1..] {
            v.add_assign(&self.nodes[id].value);
        }
        self.push(Op::AddN(ids.to_vec()), v)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn max_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(c));
        self.push(Op::MaxScalar(a, c), v)
    }

    /// Clamps to `[-c, c]`; gradient is zero outside the interval.
    pub fn clamp_sym(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(-c).min(c));
        self.push(Op::ClampSym(a, c), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.sqrt());
        self.push(Op::Sqrt(a), v)
    }

    /// `ln(max(x, 1e-12))`; gradient is zero in the clamped region.
    pub fn ln_clamped(&mut self, a: NodeId) -> NodeId {
        let floor = F::from_f64(1e-12);
        let v = self.nodes[a].value.map(|x| x.max(floor).ln());
        self.push(Op::LnClamped(a), v)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| {
            if x > F::zero() {
                x
            } else {
                x.exp() - F::one()
            }
        });
        self.push(Op::Elu(a), v)
    }

    pub fn asin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.asin());
        self.push(Op::Asin(a), v)
    }

    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> NodeId {
        let v = self.binary(y, x, |a, b| a.atan2(b));
        self.push(Op::Atan2(y, x), v)
    }

    /// Wraps each angle to `(-π, π]`; derivative 1 almost everywhere.
    pub fn wrap_pi(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| F::from_f64(wrap_pi_f64(x.as_f64())));
        self.push(Op::WrapPi(a), v)
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        assert_eq!(xv.cols, wv.rows, "linear input width mismatch");
        assert_eq!(bv.shape(), (1, wv.cols), "linear bias shape mismatch");
        let mut out = Tensor::zeros(xv.rows, wv.cols);
        Tensor::matmul_into(&mut out, xv, false, wv, false, 0.0);
        for r in 0..out.rows {
            for c in 0..out.cols {
                let v = out.get(r, c) + bv.data[c];
                out.set(r, c, v);
            }
        }
        self.push(Op::Linear { x, w, b }, out)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(start + len <= xv.cols);
        let out = Tensor::from_fn(xv.rows, len, |r, c| xv.get(r, start + c));
        self.push(Op::SliceCols { x, start, len }, out)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(start + len <= xv.rows);
        let out = Tensor::from_fn(len, xv.cols, |r, c| xv.get(start + r, c));
        self.push(Op::SliceRows { x, start, len }, out)
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let rows = self.nodes[ids[0]].value.rows;
        let total: usize = ids.iter().map(|&id| self.nodes[id].value.cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut at = 0;
        for &id in ids {
            let v = &self.nodes[id].value;
            assert_eq!(v.rows, rows, "concat row mismatch");
            for r in 0..rows {
                for c in 0..v.cols {
                    out.set(r, at + c, v.get(r, c));
                }
            }
            at += v.cols;
        }
        self.push(Op::ConcatCols(ids.to_vec()), out)
    }

    /// Picks columns by index (indices may repeat); backward scatter-adds.
    pub fn gather_cols(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = &self.nodes[x].value;
        for &i in idx {
            assert!(i < xv.cols);
        }
        let out = Tensor::from_fn(xv.rows, idx.len(), |r, c| xv.get(r, idx[c]));
        self.push(
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            out,
        )
    }

    /// Adds a `[1, C]` row vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (xv, rv) = (&self.nodes[x].value, &self.nodes[row].value);
        assert_eq!(rv.shape(), (1, xv.cols), "row broadcast shape mismatch");
        let out = Tensor::from_fn(xv.rows, xv.cols, |r, c| xv.get(r, c) + rv.data[c]);
        self.push(Op::AddRow { x, row }, out)
    }

    /// Multiplies every row of `x` by a `[1, C]` row vector.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (xv, rv) = (&self.nodes[x].value, &self.nodes[row].value);
        assert_eq!(rv.shape(), (1, xv.cols), "row broadcast shape mismatch");
        let out = Tensor::from_fn(xv.rows, xv.cols, |r, c| xv.get(r, c) * rv.data[c]);
        self.push(Op::MulRow { x, row }, out)
    }

    pub fn mean_cols(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let inv = F::from_f64(1.0 / xv.rows as f64);
        let mut out = col_sums(xv);
        for v in out.data.iter_mut() {
            *v = *v * inv;
        }
        self.push(Op::MeanCols(x), out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut s = F::zero();
        for &v in &xv.data {
            s = s + v;
        }
        self.push(Op::SumAll(x), Tensor::from_vec(1, 1, vec![s]))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut s = F::zero();
        for &v in &xv.data {
            s = s + v;
        }
        let v = s * F::from_f64(1.0 / xv.data.len() as f64);
        self.push(Op::MeanAll(x), Tensor::from_vec(1, 1, vec![v]))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::zero();
            for c in 0..xv.cols {
                let e = (row[c] - mx).exp();
                out.set(r, c, e);
                denom = denom + e;
            }
            for c in 0..xv.cols {
                let v = out.get(r, c) / denom;
                out.set(r, c, v);
            }
        }
        self.push(Op::Softmax(x), out)
    }

    /// `[T·B, C] → [B, T·C]`: row `b` is the concatenation over time of the
    /// batch-`b` rows. Input rows are time-major (`t·B + b`).
    pub fn time_flatten(&mut self, x: NodeId, batch: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.rows % batch, 0, "rows must be a multiple of batch");
        let steps = xv.rows / batch;
        let out = Tensor::from_fn(batch, steps * xv.cols, |b, j| {
            let (t, c) = (j / xv.cols, j % xv.cols);
            xv.get(t * batch + b, c)
        });
        self.push(Op::TimeFlatten { x, batch }, out)
    }

    /// Runs a full GRU over a time-major sequence `[T·B, In] → [T·B, H]`.
    ///
    /// Gate order along the `3H` axis is `(reset, update, candidate)`:
    ///   r = σ(x·Wi_r + b_i_r + h·Wh_r + b_h_r)
    ///   z = σ(x·Wi_z + b_i_z + h·Wh_z + b_h_z)
    ///   n = tanh(x·Wi_n + b_i_n + r ⊙ (h·Wh_n + b_h_n))
    ///   h' = (1 − z) ⊙ n + z ⊙ h
    /// The initial hidden state is zero.
    pub fn gru_seq(
        &mut self,
        x: NodeId,
        w_i: NodeId,
        w_h: NodeId,
        b_i: NodeId,
        b_h: NodeId,
        batch: usize,
    ) -> NodeId {
        let xv = &self.nodes[x].value;
        let (wiv, whv) = (&self.nodes[w_i].value, &self.nodes[w_h].value);
        let (biv, bhv) = (&self.nodes[b_i].value, &self.nodes[b_h].value);
        let tb = xv.rows;
        assert_eq!(tb % batch, 0);
        let steps = tb / batch;
        let h = whv.rows;
        let h3 = 3 * h;
        assert_eq!(wiv.rows, xv.cols, "gru input width mismatch");
        assert_eq!(wiv.cols, h3);
        assert_eq!(whv.cols, h3);
        assert_eq!(biv.shape(), (1, h3));
        assert_eq!(bhv.shape(), (1, h3));

        // Input-side pre-activations for the whole sequence in one GEMM.
        let mut a_i = Tensor::zeros(tb, h3);
        Tensor::matmul_into(&mut a_i, xv, false, wiv, false, 0.0);
        for r in 0..tb {
            for c in 0..h3 {
                let v = a_i.get(r, c) + biv.data[c];
                a_i.set(r, c, v);
            }
        }

        let mut out = Tensor::zeros(tb, h);
        let mut rg = Tensor::zeros(tb, h);
        let mut zg = Tensor::zeros(tb, h);
        let mut ng = Tensor::zeros(tb, h);
        let mut ahn = Tensor::zeros(tb, h);
        let mut hprev = Tensor::zeros(tb, h);
        let mut hstate = Tensor::zeros(batch, h);
        let mut a_h = Tensor::zeros(batch, h3);
        for t in 0..steps {
            Tensor::matmul_into(&mut a_h, &hstate, false, whv, false, 0.0);
            for i in 0..batch {
                let row = t * batch + i;
                for c in 0..h {
                    let rv = sig(a_i.get(row, c) + a_h.get(i, c) + bhv.data[c]);
                    let zv = sig(a_i.get(row, h + c) + a_h.get(i, h + c) + bhv.data[h + c]);
                    let ahn_v = a_h.get(i, 2 * h + c) + bhv.data[2 * h + c];
                    let nv = (a_i.get(row, 2 * h + c) + rv * ahn_v).tanh();
                    let hp = hstate.get(i, c);
                    rg.set(row, c, rv);
                    zg.set(row, c, zv);
                    ng.set(row, c, nv);
                    ahn.set(row, c, ahn_v);
                    hprev.set(row, c, hp);
                    out.set(row, c, (F::one() - zv) * nv + zv * hp);
                }
            }
            hstate
                .data_mut()
                .copy_from_slice(&out.data[t * batch * h..(t + 1) * batch * h]);
        }
        self.push_aux(
            Op::GruSeq {
                x,
                w_i,
                w_h,
                b_i,
                b_h,
                batch,
            },
            out,
            vec![rg, zg, ng, ahn, hprev],
        )
    }

    /// Autoregressive GRU decoder producing `[T·B, O]`.
    ///
    /// Row block 0 of the output is `first` unchanged. For each later step
    /// `t`, the cell consumes the previous ground-truth block of `teacher`
    /// when `forced[t-1]` is true and its own previous output otherwise, then
    /// emits `h_t·Wo + b_o`. `teacher` must have the same shape as the output;
    /// its final block is never consumed. No gradient flows into `teacher`.
    #[allow(clippy::too_many_arguments)]
    pub fn ar_decode(
        &mut self,
        h0: NodeId,
        first: NodeId,
        teacher: NodeId,
        w_i: NodeId,
        w_h: NodeId,
        b_i: NodeId,
        b_h: NodeId,
        w_o: NodeId,
        b_o: NodeId,
        forced: Vec<bool>,
        batch: usize,
    ) -> NodeId {
        let h0v = &self.nodes[h0].value;
        let firstv = &self.nodes[first].value;
        let teacherv = &self.nodes[teacher].value;
        let (wiv, whv) = (&self.nodes[w_i].value, &self.nodes[w_h].value);
        let (biv, bhv) = (&self.nodes[b_i].value, &self.nodes[b_h].value);
        let (wov, bov) = (&self.nodes[w_o].value, &self.nodes[b_o].value);
        let o = firstv.cols;
        let h = h0v.cols;
        let h3 = 3 * h;
        assert_eq!(h0v.rows, batch);
        assert_eq!(firstv.rows, batch);
        assert_eq!(teacherv.cols, o);
        assert_eq!(teacherv.rows % batch, 0);
        let steps = teacherv.rows / batch;
        assert_eq!(forced.len(), steps.saturating_sub(1));
        assert_eq!(wiv.shape(), (o, h3));
        assert_eq!(whv.shape(), (h, h3));
        assert_eq!(biv.shape(), (1, h3));
        assert_eq!(bhv.shape(), (1, h3));
        assert_eq!(wov.shape(), (h, o));
        assert_eq!(bov.shape(), (1, o));

        let prev = steps.saturating_sub(1) * batch;
        let mut out = Tensor::zeros(steps * batch, o);
        out.data_mut()[..batch * o].copy_from_slice(&firstv.data);
        let mut rg = Tensor::zeros(prev, h);
        let mut zg = Tensor::zeros(prev, h);
        let mut ng = Tensor::zeros(prev, h);
        let mut ahn = Tensor::zeros(prev, h);
        let mut hprev = Tensor::zeros(prev, h);
        let mut hout = Tensor::zeros(prev, h);
        let mut inp = Tensor::zeros(prev, o);

        let mut hstate = h0v.clone();
        let mut a_i = Tensor::zeros(batch, h3);
        let mut a_h = Tensor::zeros(batch, h3);
        for t in 1..steps {
            let k = t - 1;
            {
                let src = if forced[k] {
                    &teacherv.data[k * batch * o..t * batch * o]
                } else {
                    // Borrow out's block by copying through a temp-free split.
                    &out.data[k * batch * o..t * batch * o]
                };
                let src = src.to_vec();
                inp.data_mut()[k * batch * o..t * batch * o].copy_from_slice(&src);
            }
            gemm_rows(
                batch,
                o,
                h3,
                &inp.data[k * batch * o..t * batch * o],
                false,
                &wiv.data,
                false,
                0.0,
                a_i.data_mut(),
            );
            Tensor::matmul_into(&mut a_h, &hstate, false, whv, false, 0.0);
            for i in 0..batch {
                let row = k * batch + i;
                for c in 0..h {
                    let rv = sig(a_i.get(i, c) + biv.data[c] + a_h.get(i, c) + bhv.data[c]);
                    let zv = sig(
                        a_i.get(i, h + c) + biv.data[h + c] + a_h.get(i, h + c) + bhv.data[h + c],
                    );
                    let ahn_v = a_h.get(i, 2 * h + c) + bhv.data[2 * h + c];
                    let nv = (a_i.get(i, 2 * h + c) + biv.data[2 * h + c] + rv * ahn_v).tanh();
                    let hp = hstate.get(i, c);
                    rg.set(row, c, rv);
                    zg.set(row, c, zv);
                    ng.set(row, c, nv);
                    ahn.set(row, c, ahn_v);
                    hprev.set(row, c, hp);
                    hout.set(row, c, (F::one() - zv) * nv + zv * hp);
                }
            }
            hstate
                .data_mut()
                .copy_from_slice(&hout.data[k * batch * h..t * batch * h]);
            gemm_rows(
                batch,
                h,
                o,
                &hstate.data,
                false,
                &wov.data,
                false,
                0.0,
                &mut out.data_mut()[t * batch * o..(t + 1) * batch * o],
            );
            for i in 0..batch {
                for c in 0..o {
                    let v = out.get(t * batch + i, c) + bov.data[c];
                    out.set(t * batch + i, c, v);
                }
            }
        }
        self.push_aux(
            Op::ArDecode {
                h0,
                first,
                teacher,
                w_i,
                w_h,
                b_i,
                b_h,
                w_o,
                b_o,
                forced,
                batch,
            },
            out,
            vec![rg, zg, ng, ahn, hprev, hout, inp],
        )
    }

    /// Reverse pass from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Grads<F> {
        assert_eq!(
            self.nodes[root].value.shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads = Grads {
            g: (0..self.nodes.len()).map(|_| None).collect(),
        };
        grads.g[root] = Some(Tensor::filled(1, 1, F::one()));

        for id in (0..self.nodes.len()).rev() {
            let g = match grads.g[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads);
            grads.g[id] = Some(g);
        }
        grads
    }

    fn backward_node(&self, id: NodeId, g: &Tensor<F>, grads: &mut Grads<F>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                grads.acc(*a, g.clone());
                grads.acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                grads.acc(*a, g.clone());
                grads.acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, c| g.get(r, c) * bv.get(r, c)),
                );
                grads.acc(
                    *b,
                    Tensor::from_fn(g.rows, g.cols, |r, c| g.get(r, c) * av.get(r, c)),
                );
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, c| g.get(r, c) / bv.get(r, c)),
                );
                grads.acc(
                    *b,
                    Tensor::from_fn(g.rows, g.cols, |r, c| {
                        let b_ = bv.get(r, c);
                        -g.get(r, c) * av.get(r, c) / (b_ * b_)
                    }),
                );
            }
            Op::AddN(ids) => {
                for &a in ids {
                    grads.acc(a, g.clone());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                grads.acc(*a, g.map(|v| v * c));
            }
            Op::AddScalar(a, _) => grads.acc(*a, g.clone()),
            Op::MaxScalar(a, c) => {
                let av = &self.nodes[*a].value;
                let c = *c;
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, cc| {
                        if av.get(r, cc) > c {
                            g.get(r, cc)
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::ClampSym(a, c) => {
                let av = &self.nodes[*a].value;
                let c = *c;
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, cc| {
                        let x = av.get(r, cc);
                        if x > -c && x < c {
                            g.get(r, cc)
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::Square(a) => {
                let av = &self.nodes[*a].value;
                let two = F::from_f64(2.0);
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, c| two * av.get(r, c) * g.get(r, c)),
                );
            }
            Op::Sqrt(a) => {
                // Subgradient 0 at exactly zero keeps ‖q‖ penalties NaN-free.
                let yv = &node.value;
                let tiny = F::from_f64(1e-300).max(F::min_positive_value());
                let half = F::from_f64(0.5);
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, c| {
                        let y = yv.get(r, c);
                        if y > tiny {
                            half * g.get(r, c) / y
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::LnClamped(a) => {
                let av = &self.nodes[*a].value;
                let floor = F::from_f64(1e-12);
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, c| {
                        let x = av.get(r, c);
                        if x > floor {
                            g.get(r, c) / x
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::Elu(a) => {
                let yv = &node.value;
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, c| {
                        let y = yv.get(r, c);
                        if y > F::zero() {
                            g.get(r, c)
                        } else {
                            g.get(r, c) * (y + F::one())
                        }
                    }),
                );
            }
            Op::Asin(a) => {
                let av = &self.nodes[*a].value;
                grads.acc(
                    *a,
                    Tensor::from_fn(g.rows, g.cols, |r, c| {
                        let x = av.get(r, c);
                        g.get(r, c) / (F::one() - x * x).sqrt()
                    }),
                );
            }
            Op::Atan2(y, x) => {
                let (yv, xv) = (&self.nodes[*y].value, &self.nodes[*x].value);
                let tiny = F::from_f64(1e-30);
                let dy = Tensor::from_fn(g.rows, g.cols, |r, c| {
                    let (a, b) = (yv.get(r, c), xv.get(r, c));
                    let d = (a * a + b * b).max(tiny);
                    g.get(r, c) * b / d
                });
                let dx = Tensor::from_fn(g.rows, g.cols, |r, c| {
                    let (a, b) = (yv.get(r, c), xv.get(r, c));
                    let d = (a * a + b * b).max(tiny);
                    -g.get(r, c) * a / d
                });
                grads.acc(*y, dy);
                grads.acc(*x, dx);
            }
            Op::WrapPi(a) => grads.acc(*a, g.clone()),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                grads.acc_matmul(*x, xv.rows, xv.cols, g, false, wv, true);
                grads.acc_matmul(*w, wv.rows, wv.cols, xv, true, g, false);
                grads.acc(*b, col_sums(g));
            }
            Op::SliceCols { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    for c in 0..*len {
                        dx.set(r, start + c, g.get(r, c));
                    }
                }
                grads.acc(*x, dx);
            }
            Op::SliceRows { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..*len {
                    for c in 0..g.cols {
                        dx.set(start + r, c, g.get(r, c));
                    }
                }
                grads.acc(*x, dx);
            }
            Op::ConcatCols(ids) => {
                let mut at = 0;
                for &a in ids {
                    let cols = self.nodes[a].value.cols;
                    grads.acc(
                        a,
                        Tensor::from_fn(g.rows, cols, |r, c| g.get(r, at + c)),
                    );
                    at += cols;
                }
            }
            Op::GatherCols { x, idx } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    for (c, &i) in idx.iter().enumerate() {
                        let v = dx.get(r, i) + g.get(r, c);
                        dx.set(r, i, v);
                    }
                }
                grads.acc(*x, dx);
            }
            Op::AddRow { x, row } => {
                grads.acc(*x, g.clone());
                grads.acc(*row, col_sums(g));
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (&self.nodes[*x].value, &self.nodes[*row].value);
                grads.acc(
                    *x,
                    Tensor::from_fn(g.rows, g.cols, |r, c| g.get(r, c) * rv.data[c]),
                );
                let mut drow = Tensor::zeros(1, xv.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        drow.data[c] = drow.data[c] + g.get(r, c) * xv.get(r, c);
                    }
                }
                grads.acc(*row, drow);
            }
            Op::MeanCols(x) => {
                let xv = &self.nodes[*x].value;
                let inv = F::from_f64(1.0 / xv.rows as f64);
                grads.acc(
                    *x,
                    Tensor::from_fn(xv.rows, xv.cols, |_, c| g.data[c] * inv),
                );
            }
            Op::SumAll(x) => {
                let xv = &self.nodes[*x].value;
                grads.acc(*x, Tensor::filled(xv.rows, xv.cols, g.data[0]));
            }
            Op::MeanAll(x) => {
                let xv = &self.nodes[*x].value;
                let v = g.data[0] * F::from_f64(1.0 / xv.data.len() as f64);
                grads.acc(*x, Tensor::filled(xv.rows, xv.cols, v));
            }
            Op::Softmax(x) => {
                let yv = &node.value;
                let mut dx = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let mut dot = F::zero();
                    for c in 0..g.cols {
                        dot = dot + g.get(r, c) * yv.get(r, c);
                    }
                    for c in 0..g.cols {
                        dx.set(r, c, yv.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                grads.acc(*x, dx);
            }
            Op::TimeFlatten { x, batch } => {
                let xv = &self.nodes[*x].value;
                let cols = xv.cols;
                let mut dx = Tensor::zeros(xv.rows, cols);
                for b in 0..g.rows {
                    for j in 0..g.cols {
                        let (t, c) = (j / cols, j % cols);
                        dx.set(t * batch + b, c, g.get(b, j));
                    }
                }
                grads.acc(*x, dx);
            }
            Op::GruSeq {
                x,
                w_i,
                w_h,
                b_i,
                b_h,
                batch,
            } => {
                self.backward_gru_seq(node, *x, *w_i, *w_h, *b_i, *b_h, *batch, g, grads);
            }
            Op::ArDecode {
                h0,
                first,
                teacher: _,
                w_i,
                w_h,
                b_i,
                b_h,
                w_o,
                b_o,
                forced,
                batch,
            } => {
                self.backward_ar_decode(
                    node, *h0, *first, *w_i, *w_h, *b_i, *b_h, *w_o, *b_o, forced, *batch, g,
                    grads,
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_gru_seq(
        &self,
        node: &Node<F>,
        x: NodeId,
        w_i: NodeId,
        w_h: NodeId,
        b_i: NodeId,
        b_h: NodeId,
        batch: usize,
        g: &Tensor<F>,
        grads: &mut Grads<F>,
    ) {
        let xv = &self.nodes[x].value;
        let whv = &self.nodes[w_h].value;
        let wiv = &self.nodes[w_i].value;
        let [rg, zg, ng, ahn, hprev] = match node.aux.as_slice() {
            [a, b, c, d, e] => [a, b, c, d, e],
            _ => unreachable!(),
        };
        let tb = xv.rows;
        let steps = tb / batch;
        let h = whv.rows;
        let h3 = 3 * h;

        let mut da_i = Tensor::zeros(tb, h3);
        let mut da_h = Tensor::zeros(tb, h3);
        let mut dh = Tensor::zeros(batch, h);
        for t in (0..steps).rev() {
            for i in 0..batch {
                let row = t * batch + i;
                for c in 0..h {
                    let dht = g.get(row, c) + dh.get(i, c);
                    let rv = rg.get(row, c);
                    let zv = zg.get(row, c);
                    let nv = ng.get(row, c);
                    let ahn_v = ahn.get(row, c);
                    let hp = hprev.get(row, c);
                    let dz = dht * (hp - nv);
                    let dn = dht * (F::one() - zv);
                    let danp = dn * (F::one() - nv * nv);
                    let dr = danp * ahn_v;
                    let da_r = dr * rv * (F::one() - rv);
                    let da_z = dz * zv * (F::one() - zv);
                    da_i.set(row, c, da_r);
                    da_i.set(row, h + c, da_z);
                    da_i.set(row, 2 * h + c, danp);
                    da_h.set(row, c, da_r);
                    da_h.set(row, h + c, da_z);
                    da_h.set(row, 2 * h + c, danp * rv);
                    dh.set(i, c, dht * zv);
                }
            }
            gemm_rows(
                batch,
                h3,
                h,
                &da_h.data[t * batch * h3..(t + 1) * batch * h3],
                false,
                &whv.data,
                true,
                1.0,
                dh.data_mut(),
            );
        }
        grads.acc_matmul(x, xv.rows, xv.cols, &da_i, false, wiv, true);
        grads.acc_matmul(w_i, wiv.rows, wiv.cols, xv, true, &da_i, false);
        grads.acc(b_i, col_sums(&da_i));
        grads.acc_matmul(w_h, whv.rows, whv.cols, hprev, true, &da_h, false);
        grads.acc(b_h, col_sums(&da_h));
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_ar_decode(
        &self,
        node: &Node<F>,
        h0: NodeId,
        first: NodeId,
        w_i: NodeId,
        w_h: NodeId,
        b_i: NodeId,
        b_h: NodeId,
        w_o: NodeId,
        b_o: NodeId,
        forced: &[bool],
        batch: usize,
        g: &Tensor<F>,
        grads: &mut Grads<F>,
    ) {
        let wiv = &self.nodes[w_i].value;
        let whv = &self.nodes[w_h].value;
        let wov = &self.nodes[w_o].value;
        let [rg, zg, ng, ahn, hprev, hout, inp] = match node.aux.as_slice() {
            [a, b, c, d, e, f, i] => [a, b, c, d, e, f, i],
            _ => unreachable!(),
        };
        let o = wov.cols;
        let h = whv.rows;
        let h3 = 3 * h;
        let steps = g.rows / batch;
        let prev = steps.saturating_sub(1) * batch;

        let mut dout = g.clone();
        let mut da_i = Tensor::zeros(prev, h3);
        let mut da_h = Tensor::zeros(prev, h3);
        let mut dh = Tensor::zeros(batch, h);
        let mut dinp = Tensor::zeros(batch, o);
        for t in (1..steps).rev() {
            let k = t - 1;
            // dh += dout_t · Woᵀ
            gemm_rows(
                batch,
                o,
                h,
                &dout.data()[t * batch * o..(t + 1) * batch * o],
                false,
                &wov.data,
                true,
                1.0,
                dh.data_mut(),
            );
            for i in 0..batch {
                let row = k * batch + i;
                for c in 0..h {
                    let dht = dh.get(i, c);
                    let rv = rg.get(row, c);
                    let zv = zg.get(row, c);
                    let nv = ng.get(row, c);
                    let ahn_v = ahn.get(row, c);
                    let hp = hprev.get(row, c);
                    let dz = dht * (hp - nv);
                    let dn = dht * (F::one() - zv);
                    let danp = dn * (F::one() - nv * nv);
                    let dr = danp * ahn_v;
                    let da_r = dr * rv * (F::one() - rv);
                    let da_z = dz * zv * (F::one() - zv);
                    da_i.set(row, c, da_r);
                    da_i.set(row, h + c, da_z);
                    da_i.set(row, 2 * h + c, danp);
                    da_h.set(row, c, da_r);
                    da_h.set(row, h + c, da_z);
                    da_h.set(row, 2 * h + c, danp * rv);
                    dh.set(i, c, dht * zv);
                }
            }
            gemm_rows(
                batch,
                h3,
                h,
                &da_h.data[k * batch * h3..t * batch * h3],
                false,
                &whv.data,
                true,
                1.0,
                dh.data_mut(),
            );
            gemm_rows(
                batch,
                h3,
                o,
                &da_i.data[k * batch * h3..t * batch * h3],
                false,
                &wiv.data,
                true,
                0.0,
                dinp.data_mut(),
            );
            if !forced[k] {
                for i in 0..batch {
                    for c in 0..o {
                        let v = dout.get(k * batch + i, c) + dinp.get(i, c);
                        dout.set(k * batch + i, c, v);
                    }
                }
            }
        }

        grads.acc(h0, dh);
        grads.acc(
            first,
            Tensor::from_fn(batch, o, |r, c| dout.get(r, c)),
        );
        if steps > 1 {
            let douttail = Tensor::from_fn(prev, o, |r, c| dout.get(batch + r, c));
            grads.acc_matmul(w_o, h, o, hout, true, &douttail, false);
            grads.acc(b_o, col_sums(&douttail));
            grads.acc_matmul(w_i, wiv.rows, wiv.cols, inp, true, &da_i, false);
            grads.acc(b_i, col_sums(&da_i));
            grads.acc_matmul(w_h, whv.rows, whv.cols, hprev, true, &da_h, false);
            grads.acc(b_h, col_sums(&da_h));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, span: f64) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-span..span))
    }

    /// Projects a graph output to a scalar with fixed random weights so that
    /// transposition mistakes can't cancel out.
    fn project(tape: &mut Tape<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
        let (r, c) = tape.value(out).shape();
        let proj = tape.leaf(rand_tensor(rng, r, c, 1.0));
        let prod = tape.mul(out, proj);
        tape.sum_all(prod)
    }

    /// Central finite-difference check of `d scalar / d inputs[i]` for a graph
    /// builder. Builder gets the leaf ids for each input tensor.
    fn check_grads(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let run = |xs: &[Tensor<f64>]| -> (f64, Vec<NodeId>, Tape<f64>) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &ids);
            // Fresh rng per run keeps the projection identical across runs.
            let mut rng = ChaCha8Rng::seed_from_u64(977);
            let root = project(&mut tape, out, &mut rng);
            (tape.value(root).get(0, 0), ids, tape)
        };

        let (_, ids, tape) = run(inputs);
        let root = tape.len() - 1;
        let grads = tape.backward(root);

        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[e] -= h;
                let num = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let ana = analytic.data()[e];
                let scale = ana.abs().max(num.abs()).max(1.0);
                assert!(
                    (ana - num).abs() <= tol * scale,
                    "input {i} element {e}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn matmul_matches_naive_including_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 4, 3, 2.0);
        let b = rand_tensor(&mut rng, 3, 5, 2.0);
        let mut out = Tensor::zeros(4, 5);
        Tensor::matmul_into(&mut out, &a, false, &b, false, 0.0);
        for r in 0..4 {
            for c in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get(r, k) * b.get(k, c);
                }
                assert!((out.get(r, c) - s).abs() < 1e-12);
            }
        }
        // aᵀ·bᵀ path via stride swaps.
        let at = Tensor::from_fn(3, 4, |r, c| a.get(c, r));
        let bt = Tensor::from_fn(5, 3, |r, c| b.get(c, r));
        let mut out2 = Tensor::zeros(4, 5);
        Tensor::matmul_into(&mut out2, &at, true, &bt, true, 0.0);
        for (x, y) in out.data().iter().zip(out2.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 3, 4, 1.5);
        let b = rand_tensor(&mut rng, 3, 4, 1.5).map(|v| v + 2.5); // keep divisors positive
        check_grads(&[a.clone(), b.clone()], |t, ids| t.add(ids[0], ids[1]), 1e-6);
        check_grads(&[a.clone(), b.clone()], |t, ids| t.sub(ids[0], ids[1]), 1e-6);
        check_grads(&[a.clone(), b.clone()], |t, ids| t.mul(ids[0], ids[1]), 1e-6);
        check_grads(&[a.clone(), b.clone()], |t, ids| t.div(ids[0], ids[1]), 1e-6);
        check_grads(&[a.clone(), b.clone()], |t, ids| t.add_n(ids), 1e-6);
        check_grads(&[a.clone()], |t, ids| t.scale(ids[0], -1.7), 1e-6);
        check_grads(&[a.clone()], |t, ids| t.add_scalar(ids[0], 0.3), 1e-6);
        check_grads(&[a.clone()], |t, ids| t.square(ids[0]), 1e-6);
        check_grads(&[a.clone()], |t, ids| t.elu(ids[0]), 1e-6);
        check_grads(&[b.clone()], |t, ids| t.sqrt(ids[0]), 1e-6);
        check_grads(&[b], |t, ids| t.ln_clamped(ids[0]), 1e-6);
    }

    #[test]
    fn threshold_op_gradients_away_from_kinks() {
        let a = Tensor::from_vec(2, 3, vec![-1.4, -0.3, 0.2, 0.9, 1.8, -2.2]);
        check_grads(&[a.clone()], |t, ids| t.max_scalar(ids[0], 0.5), 1e-6);
        check_grads(&[a.clone()], |t, ids| t.clamp_sym(ids[0], 1.0), 1e-6);
        // asin stays in the open interval
        let b = a.map(|v| v * 0.4);
        check_grads(&[b], |t, ids| t.asin(ids[0]), 1e-6);
        check_grads(&[a], |t, ids| t.wrap_pi(ids[0]), 1e-6);
    }

    #[test]
    fn atan2_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_tensor(&mut rng, 3, 3, 2.0).map(|v| v + 3.0);
        let x = rand_tensor(&mut rng, 3, 3, 2.0).map(|v| v + 3.0);
        check_grads(&[y, x], |t, ids| t.atan2(ids[0], ids[1]), 1e-6);
    }

    #[test]
    fn linear_and_reduction_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 4, 3, 1.0);
        let w = rand_tensor(&mut rng, 3, 5, 1.0);
        let b = rand_tensor(&mut rng, 1, 5, 1.0);
        check_grads(&[x.clone(), w, b], |t, ids| t.linear(ids[0], ids[1], ids[2]), 1e-6);
        check_grads(&[x.clone()], |t, ids| t.mean_cols(ids[0]), 1e-6);
        check_grads(&[x.clone()], |t, ids| t.sum_all(ids[0]), 1e-6);
        check_grads(&[x], |t, ids| t.mean_all(ids[0]), 1e-6);
    }

    #[test]
    fn shape_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 6, 5, 1.0);
        let y = rand_tensor(&mut rng, 6, 2, 1.0);
        check_grads(&[x.clone()], |t, ids| t.slice_cols(ids[0], 1, 3), 1e-6);
        check_grads(&[x.clone()], |t, ids| t.slice_rows(ids[0], 2, 3), 1e-6);
        check_grads(
            &[x.clone(), y.clone()],
            |t, ids| t.concat_cols(&[ids[0], ids[1], ids[0]]),
            1e-6,
        );
        check_grads(
            &[x.clone()],
            |t, ids| t.gather_cols(ids[0], &[0, 2, 2, 4]),
            1e-6,
        );
        let row = rand_tensor(&mut rng, 1, 5, 1.0);
        check_grads(&[x.clone(), row.clone()], |t, ids| t.add_row(ids[0], ids[1]), 1e-6);
        check_grads(&[x.clone(), row], |t, ids| t.mul_row(ids[0], ids[1]), 1e-6);
        // 6 rows with batch 2 → 3 time steps
        check_grads(&[x], |t, ids| t.time_flatten(ids[0], 2), 1e-6);
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, 4, 4, 2.0);
        check_grads(&[x.clone()], |t, ids| t.softmax(ids[0]), 1e-6);
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let sm = tape.softmax(id);
        for r in 0..4 {
            let s: f64 = tape.value(sm).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_sequence_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = 2;
        let steps = 3;
        let (input, hidden) = (4, 3);
        let x = rand_tensor(&mut rng, steps * batch, input, 1.0);
        let w_i = rand_tensor(&mut rng, input, 3 * hidden, 0.8);
        let w_h = rand_tensor(&mut rng, hidden, 3 * hidden, 0.8);
        let b_i = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        let b_h = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        check_grads(
            &[x, w_i, w_h, b_i, b_h],
            |t, ids| t.gru_seq(ids[0], ids[1], ids[2], ids[3], ids[4], batch),
            1e-5,
        );
    }

    #[test]
    fn autoregressive_decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = 2;
        let steps = 4;
        let (out_dim, hidden) = (3, 3);
        let h0 = rand_tensor(&mut rng, batch, hidden, 0.8);
        let first = rand_tensor(&mut rng, batch, out_dim, 0.8);
        let teacher = rand_tensor(&mut rng, steps * batch, out_dim, 0.8);
        let w_i = rand_tensor(&mut rng, out_dim, 3 * hidden, 0.8);
        let w_h = rand_tensor(&mut rng, hidden, 3 * hidden, 0.8);
        let b_i = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        let b_h = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        let w_o = rand_tensor(&mut rng, hidden, out_dim, 0.8);
        let b_o = rand_tensor(&mut rng, 1, out_dim, 0.5);
        // Mixed forcing exercises both the teacher and the feedback paths.
        // The teacher is ground-truth data, declared out of the gradient's
        // scope, so it enters as a fixed constant rather than a checked input.
        check_grads(
            &[h0, first, w_i, w_h, b_i, b_h, w_o, b_o],
            move |t, ids| {
                let teach = t.leaf(teacher.clone());
                t.ar_decode(
                    ids[0],
                    ids[1],
                    teach,
                    ids[2],
                    ids[3],
                    ids[4],
                    ids[5],
                    ids[6],
                    ids[7],
                    vec![true, false, false],
                    batch,
                )
            },
            1e-5,
        );
    }

    #[test]
    fn decoder_ignores_teacher_when_never_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = 2;
        let steps = 3;
        let (out_dim, hidden) = (3, 2);
        let h0 = rand_tensor(&mut rng, batch, hidden, 0.8);
        let first = rand_tensor(&mut rng, batch, out_dim, 0.8);
        let w_i = rand_tensor(&mut rng, out_dim, 3 * hidden, 0.8);
        let w_h = rand_tensor(&mut rng, hidden, 3 * hidden, 0.8);
        let b_i = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        let b_h = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        let w_o = rand_tensor(&mut rng, hidden, out_dim, 0.8);
        let b_o = rand_tensor(&mut rng, 1, out_dim, 0.5);

        let run = |teacher: Tensor<f64>, forced: Vec<bool>| -> Vec<f64> {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = [
                &h0, &first, &teacher, &w_i, &w_h, &b_i, &b_h, &w_o, &b_o,
            ]
            .iter()
            .map(|x| t.leaf((*x).clone()))
            .collect();
            let out = t.ar_decode(
                ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], ids[8], forced,
                batch,
            );
            t.value(out).data().to_vec()
        };

        let t1 = rand_tensor(&mut rng, steps * batch, out_dim, 1.0);
        let t2 = rand_tensor(&mut rng, steps * batch, out_dim, 1.0);
        // Self-guided decoding must not depend on the teacher contents.
        assert_eq!(run(t1.clone(), vec![false, false]), run(t2.clone(), vec![false, false]));
        // Fully forced decoding must depend on them.
        assert_ne!(run(t1, vec![true, true]), run(t2, vec![true, true]));
    }

    #[test]
    fn teacher_forced_steps_consume_ground_truth_directly() {
        // With forcing on at every step, the decoder degenerates into a
        // per-step function of the previous ground-truth frame, so swapping
        // any non-consumed teacher block must leave the output unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = 1;
        let steps = 3;
        let (out_dim, hidden) = (2, 2);
        let h0 = rand_tensor(&mut rng, batch, hidden, 0.8);
        let first = rand_tensor(&mut rng, batch, out_dim, 0.8);
        let w_i = rand_tensor(&mut rng, out_dim, 3 * hidden, 0.8);
        let w_h = rand_tensor(&mut rng, hidden, 3 * hidden, 0.8);
        let b_i = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        let b_h = rand_tensor(&mut rng, 1, 3 * hidden, 0.5);
        let w_o = rand_tensor(&mut rng, hidden, out_dim, 0.8);
        let b_o = rand_tensor(&mut rng, 1, out_dim, 0.5);
        let teacher = rand_tensor(&mut rng, steps * batch, out_dim, 1.0);

        let run = |teacher: &Tensor<f64>| -> Vec<f64> {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = [
                &h0, &first, teacher, &w_i, &w_h, &b_i, &b_h, &w_o, &b_o,
            ]
            .iter()
            .map(|x| t.leaf((*x).clone()))
            .collect();
            let out = t.ar_decode(
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                ids[4],
                ids[5],
                ids[6],
                ids[7],
                ids[8],
                vec![true, true],
                batch,
            );
            t.value(out).data().to_vec()
        };

        let base = run(&teacher);
        // The final teacher block is never an input; changing it is a no-op.
        let mut altered = teacher.clone();
        for c in 0..out_dim {
            let v = altered.get(2, c) + 5.0;
            altered.set(2, c, v);
        }
        assert_eq!(base, run(&altered));
        // Changing the first block shifts step-1 output (and later steps).
        let mut altered2 = teacher.clone();
        altered2.set(0, 0, altered2.get(0, 0) + 1.0);
        assert_ne!(base, run(&altered2));
    }

    #[test]
    fn sum_pooling_shifts_by_exactly_the_injected_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, 3, 4, 1.0);
        let b = rand_tensor(&mut rng, 3, 4, 1.0);
        let c = rand_tensor(&mut rng, 3, 4, 1.0);
        let delta = 0.3125; // exactly representable
        let pool = |b_in: &Tensor<f64>| -> Tensor<f64> {
            let mut t = Tape::new();
            let ia = t.leaf(a.clone());
            let ib = t.leaf(b_in.clone());
            let ic = t.leaf(c.clone());
            let s = t.add_n(&[ia, ib, ic]);
            t.value(s).clone()
        };
        let base = pool(&b);
        let shifted = pool(&b.map(|v| v + delta));
        for (x, y) in base.data().iter().zip(shifted.data().iter()) {
            assert_eq!(y - x, delta);
        }
    }

    #[test]
    fn time_flatten_lays_out_rows_time_major() {
        let x = Tensor::from_vec(
            4,
            2,
            vec![
                0.0, 1.0, // t0 b0
                10.0, 11.0, // t0 b1
                2.0, 3.0, // t1 b0
                12.0, 13.0, // t1 b1
            ],
        );
        let mut t = Tape::new();
        let id = t.leaf(x);
        let f = t.time_flatten(id, 2);
        assert_eq!(t.value(f).shape(), (2, 4));
        assert_eq!(t.value(f).row(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.value(f).row(1), &[10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn reused_nodes_accumulate_gradient_from_all_paths() {
        let a = Tensor::from_vec(1, 2, vec![0.7, -0.4]);
        let b = Tensor::from_vec(1, 2, vec![1.3, 0.9]);
        check_grads(
            &[a, b],
            |t, ids| {
                let p = t.mul(ids[0], ids[1]);
                let q = t.mul(ids[0], ids[0]);
                t.add(p, q)
            },
            1e-6,
        );
    }

    #[test]
    fn sqrt_backward_is_zero_at_exactly_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(1, 2, vec![0.0, 4.0]));
        let s = t.sqrt(x);
        let m = t.mean_all(s);
        let grads = t.backward(m);
        let dx = grads.get(x).unwrap();
        assert_eq!(dx.get(0, 0), 0.0);
        assert!((dx.get(0, 1) - 0.5 / (2.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn wrap_pi_maps_boundaries_into_half_open_interval() {
        let pi = std::f64::consts::PI;
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(1, 4, vec![pi, -pi, 3.0 * pi, -0.5]));
        let w = t.wrap_pi(x);
        let v = t.value(w);
        assert!((v.get(0, 0) - pi).abs() < 1e-12);
        assert!((v.get(0, 1) - pi).abs() < 1e-12);
        assert!((v.get(0, 2) - pi).abs() < 1e-12);
        assert!((v.get(0, 3) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn real_round_trips_little_endian_bytes() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-0.25f32).write_le(&mut buf);
        assert_eq!(buf.len(), 8);
        assert_eq!(<f32 as Real>::read_le(&buf), 1.5);
        assert_eq!(<f32 as Real>::read_le(&buf[4..]), -0.25);
        let mut buf = Vec::new();
        std::f64::consts::E.write_le(&mut buf);
        assert_eq!(<f64 as Real>::read_le(&buf), std::f64::consts::E);
    }
}
