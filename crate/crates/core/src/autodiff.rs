//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded on a linear tape during the forward pass and
//! replayed in reverse to accumulate gradients. The accumulation order is
//! fixed by the tape order, so repeated backward passes over the same tape
//! are bit-identical.
//!
//! Tensors are flat row-major buffers; shape `[]` denotes a scalar. A tape
//! built with [`Tape::inference`] skips all backward bookkeeping (saved
//! attention weights, norm statistics) and streams large intermediates,
//! which keeps big-sample evaluation within memory.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::mix;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Gaussian bumps evaluated on the first two coordinates; the density
/// primitive behind obstacle interaction costs.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpSet {
    pub means: Vec<[f64; 2]>,
    pub variances: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl BumpSet {
    /// Density at the first two coordinates of `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        let (x0, x1) = (x[0], x[1]);
        let mut q = 0.0;
        for b in 0..self.means.len() {
            let [mx, my] = self.means[b];
            let [vx, vy] = self.variances[b];
            let z = 0.5 * ((x0 - mx) * (x0 - mx) / vx + (x1 - my) * (x1 - my) / vy);
            q += self.weights[b] * (-z).exp() / (2.0 * std::f64::consts::PI * (vx * vy).sqrt());
        }
        q
    }

    /// Gradient of the density w.r.t. the first two coordinates.
    fn density_grad(&self, x: &[f64]) -> [f64; 2] {
        let (x0, x1) = (x[0], x[1]);
        let mut g = [0.0, 0.0];
        for b in 0..self.means.len() {
            let [mx, my] = self.means[b];
            let [vx, vy] = self.variances[b];
            let z = 0.5 * ((x0 - mx) * (x0 - mx) / vx + (x1 - my) * (x1 - my) / vy);
            let p = self.weights[b] * (-z).exp() / (2.0 * std::f64::consts::PI * (vx * vy).sqrt());
            g[0] += p * (-(x0 - mx) / vx);
            g[1] += p * (-(x1 - my) / vy);
        }
        g
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Square(TensorId),
    Exp(TensorId),
    Scale(TensorId, f64),
    AddRowBroadcast(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    MatmulNT(TensorId, TensorId),
    SoftmaxRows(TensorId),
    LayerNorm { input: TensorId, gain: TensorId, bias: TensorId },
    Gelu(TensorId),
    ConcatRows(TensorId, TensorId),
    ConcatCols(Vec<TensorId>),
    SliceRows { input: TensorId, start: usize, len: usize },
    SumAll(TensorId),
    MeanAll(TensorId),
    SumAxis { input: TensorId, axis: usize },
    MeanAxis { input: TensorId, axis: usize },
    SqNormRows(TensorId),
    LinComb { inputs: Vec<TensorId>, coeffs: Vec<f64> },
    Trace(TensorId),
    PairwiseSqDist(TensorId, TensorId),
    PairwiseL1(TensorId, TensorId),
    Dropout { input: TensorId, p: f64, seed: u64 },
    AttentionHead { q: TensorId, k: TensorId, v: TensorId, scale: f64, n_queries: Option<usize> },
    GaussianBumpDensity { input: TensorId, bumps: Arc<BumpSet> },
}

/// Saved forward intermediates needed by a backward rule.
#[derive(Debug, Clone, Default)]
struct Saved {
    bufs: Vec<Vec<f64>>,
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op,
    saved: Saved,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// The computation record: tensor buffers plus the ordered op list.
pub struct Tape {
    nodes: Vec<Node>,
    record_grads: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Recording tape: supports `backward`.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), record_grads: true }
    }

    /// Value-only tape: no backward bookkeeping, streamed attention.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), record_grads: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record_grads
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op, saved: Saved) -> TensorId {
        debug_assert_eq!(values.len(), numel(&shape));
        let needs_grad = requires_grad
            || self.record_grads && {
                let mut any = false;
                self.for_each_input(&op, |id| any |= self.nodes[id.0].needs_grad);
                any
            };
        let saved = if self.record_grads { saved } else { Saved::default() };
        self.nodes.push(Node { values, shape, requires_grad, needs_grad, op, saved });
        TensorId(self.nodes.len() - 1)
    }

    fn for_each_input(&self, op: &Op, mut f: impl FnMut(TensorId)) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::ConcatRows(a, b)
            | Op::PairwiseSqDist(a, b)
            | Op::PairwiseL1(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Neg(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SqNormRows(a)
            | Op::Trace(a) => f(*a),
            Op::SliceRows { input, .. }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::Dropout { input, .. }
            | Op::GaussianBumpDensity { input, .. } => f(*input),
            Op::LayerNorm { input, gain, bias, .. } => {
                f(*input);
                f(*gain);
                f(*bias);
            }
            Op::ConcatCols(ids) => ids.iter().copied().for_each(f),
            Op::LinComb { inputs, .. } => inputs.iter().copied().for_each(f),
            Op::AttentionHead { q, k, v, .. } => {
                f(*q);
                f(*k);
                f(*v);
            }
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn param(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, true)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![value], vec![], false, Op::Leaf, Saved::default())
    }

    fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if values.len() != numel(&shape) {
            return Err(Error::ShapeMismatch { op: "leaf", left: vec![values.len()], right: shape });
        }
        Ok(self.push(values, shape, requires_grad, Op::Leaf, Saved::default()))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&mut self, name: &'static str, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let values: Vec<f64> = self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(values, shape, false, op, Saved::default()))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let values: Vec<f64> = self.values(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(values, shape, false, op, Saved::default())
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// GELU with the exact Gaussian-CDF form: x * Phi(x).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * gauss_cdf(x), Op::Gelu(a))
    }

    /// `a[m,n] + v[n]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = self.rank2(a, "add_row_broadcast")?;
        if self.shape(v) != [n] {
            return Err(Error::ShapeMismatch { op: "add_row_broadcast", left: vec![m, n], right: self.shape(v).to_vec() });
        }
        let mut values = self.values(a).to_vec();
        let vv = self.values(v);
        for r in 0..m {
            for c in 0..n {
                values[r * n + c] += vv[c];
            }
        }
        Ok(self.push(values, vec![m, n], false, Op::AddRowBroadcast(a, v), Saved::default()))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    fn rank2(&self, a: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::ShapeMismatch { op, left: s.to_vec(), right: vec![0, 0] }),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch { op: "matmul", left: vec![m, ka], right: vec![kb, n] });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, self.values(a), false, self.values(b), false, 0.0, &mut out);
        Ok(self.push(out, vec![m, n], false, Op::Matmul(a, b), Saved::default()))
    }

    /// `a[m,k] · b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2(a, "matmul_nt")?;
        let (n, kb) = self.rank2(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch { op: "matmul_nt", left: vec![m, ka], right: vec![n, kb] });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, self.values(a), false, self.values(b), true, 0.0, &mut out);
        Ok(self.push(out, vec![m, n], false, Op::MatmulNT(a, b), Saved::default()))
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// Row-stochastic softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.rank2(a, "softmax_rows")?;
        if self.values(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut values = self.values(a).to_vec();
        for r in 0..m {
            softmax_inplace(&mut values[r * n..(r + 1) * n]);
        }
        Ok(self.push(values, vec![m, n], false, Op::SoftmaxRows(a), Saved::default()))
    }

    /// Per-row standardization followed by an affine gain/bias.
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let (m, n) = self.rank2(a, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch { op: "layer_norm", left: vec![n], right: self.shape(gain).to_vec() });
        }
        let x = self.values(a);
        let g = self.values(gain);
        let b = self.values(bias);
        let mut values = vec![0.0; m * n];
        let mut stats = vec![0.0; 2 * m]; // (mean, inv_std) per row
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats[2 * r] = mean;
            stats[2 * r + 1] = inv_std;
            for c in 0..n {
                values[r * n + c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        Ok(self.push(
            values,
            vec![m, n],
            false,
            Op::LayerNorm { input: a, gain, bias },
            Saved { bufs: vec![stats] },
        ))
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, na) = self.rank2(a, "concat_rows")?;
        let (mb, nb) = self.rank2(b, "concat_rows")?;
        if na != nb {
            return Err(Error::ShapeMismatch { op: "concat_rows", left: vec![ma, na], right: vec![mb, nb] });
        }
        let mut values = Vec::with_capacity((ma + mb) * na);
        values.extend_from_slice(self.values(a));
        values.extend_from_slice(self.values(b));
        Ok(self.push(values, vec![ma + mb, na], false, Op::ConcatRows(a, b), Saved::default()))
    }

    pub fn concat_cols(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::Usage("concat_cols needs at least one input".into()));
        }
        let (m, _) = self.rank2(ids[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(ids.len());
        for &id in ids {
            let (mi, ni) = self.rank2(id, "concat_cols")?;
            if mi != m {
                return Err(Error::ShapeMismatch { op: "concat_cols", left: vec![m], right: vec![mi] });
            }
            widths.push(ni);
        }
        let n: usize = widths.iter().sum();
        let mut values = vec![0.0; m * n];
        let mut col0 = 0;
        for (&id, &w) in ids.iter().zip(&widths) {
            let src = self.values(id);
            for r in 0..m {
                values[r * n + col0..r * n + col0 + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col0 += w;
        }
        Ok(self.push(values, vec![m, n], false, Op::ConcatCols(ids.to_vec()), Saved::default()))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.rank2(a, "slice_rows")?;
        if start + len > m {
            return Err(Error::Usage(format!("slice_rows [{start}, {start}+{len}) out of {m} rows")));
        }
        let values = self.values(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(values, vec![len, n], false, Op::SliceRows { input: a, start, len }, Saved::default()))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.values(a).iter().sum();
        self.push(vec![s], vec![], false, Op::SumAll(a), Saved::default())
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let len = self.values(a).len();
        let s = self.values(a).iter().sum::<f64>() / len as f64;
        self.push(vec![s], vec![], false, Op::MeanAll(a), Saved::default())
    }

    /// Sum over `axis` of a rank-2 tensor (0: over rows, 1: over cols).
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let (m, n) = self.rank2(a, "reduce_axis")?;
        if axis > 1 {
            return Err(Error::Usage(format!("axis {axis} out of range for rank-2 tensor")));
        }
        let x = self.values(a);
        let (out_len, denom) = if axis == 0 { (n, m as f64) } else { (m, n as f64) };
        let mut values = vec![0.0; out_len];
        for r in 0..m {
            for c in 0..n {
                let i = if axis == 0 { c } else { r };
                values[i] += x[r * n + c];
            }
        }
        if mean {
            for v in &mut values {
                *v /= denom;
            }
        }
        let op = if mean { Op::MeanAxis { input: a, axis } } else { Op::SumAxis { input: a, axis } };
        Ok(self.push(values, vec![out_len], false, op, Saved::default()))
    }

    /// Squared L2 norm of each row: `[m,n] -> [m]`.
    pub fn sq_norm_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.rank2(a, "sq_norm_rows")?;
        let x = self.values(a);
        let values: Vec<f64> = (0..m).map(|r| x[r * n..(r + 1) * n].iter().map(|&v| v * v).sum()).collect();
        Ok(self.push(values, vec![m], false, Op::SqNormRows(a), Saved::default()))
    }

    /// `sum_i coeffs[i] * inputs[i]` over same-shape tensors.
    pub fn lin_comb(&mut self, inputs: &[TensorId], coeffs: &[f64]) -> Result<TensorId> {
        if inputs.is_empty() || inputs.len() != coeffs.len() {
            return Err(Error::Usage("lin_comb needs matching non-empty inputs/coeffs".into()));
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &id in inputs {
            if self.shape(id) != shape {
                return Err(Error::ShapeMismatch { op: "lin_comb", left: shape, right: self.shape(id).to_vec() });
            }
        }
        let mut values = vec![0.0; numel(&shape)];
        for (&id, &c) in inputs.iter().zip(coeffs) {
            for (o, &x) in values.iter_mut().zip(self.values(id)) {
                *o += c * x;
            }
        }
        Ok(self.push(values, shape, false, Op::LinComb { inputs: inputs.to_vec(), coeffs: coeffs.to_vec() }, Saved::default()))
    }

    pub fn trace(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.rank2(a, "trace")?;
        if m != n {
            return Err(Error::ShapeMismatch { op: "trace", left: vec![m, n], right: vec![m, m] });
        }
        let x = self.values(a);
        let t = (0..m).map(|i| x[i * n + i]).sum();
        Ok(self.push(vec![t], vec![], false, Op::Trace(a), Saved::default()))
    }

    /// `D[i,j] = ||a_i - b_j||_2^2` for `a[n,d]`, `b[m,d]`.
    pub fn pairwise_sq_dist(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, da) = self.rank2(a, "pairwise_sq_dist")?;
        let (m, db) = self.rank2(b, "pairwise_sq_dist")?;
        if da != db {
            return Err(Error::Dimension { expected: da, got: db });
        }
        let (xa, xb) = (self.values(a), self.values(b));
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            let ra = &xa[i * da..(i + 1) * da];
            for j in 0..m {
                let rb = &xb[j * da..(j + 1) * da];
                values[i * m + j] = ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum();
            }
        }
        Ok(self.push(values, vec![n, m], false, Op::PairwiseSqDist(a, b), Saved::default()))
    }

    /// `D[i,j] = ||a_i - b_j||_1`.
    pub fn pairwise_l1(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, da) = self.rank2(a, "pairwise_l1")?;
        let (m, db) = self.rank2(b, "pairwise_l1")?;
        if da != db {
            return Err(Error::Dimension { expected: da, got: db });
        }
        let (xa, xb) = (self.values(a), self.values(b));
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            let ra = &xa[i * da..(i + 1) * da];
            for j in 0..m {
                let rb = &xb[j * da..(j + 1) * da];
                values[i * m + j] = ra.iter().zip(rb).map(|(&x, &y)| (x - y).abs()).sum();
            }
        }
        Ok(self.push(values, vec![n, m], false, Op::PairwiseL1(a, b), Saved::default()))
    }

    /// Inverted dropout. In train mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); the mask is a
    /// pure function of (seed, element index). Eval mode is the identity.
    pub fn dropout(&mut self, a: TensorId, p: f64, seed: u64, train: bool) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("dropout probability {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| if dropout_kept(seed, i, p) { x * keep_scale } else { 0.0 })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(values, shape, false, Op::Dropout { input: a, p, seed }, Saved::default()))
    }

    /// One self-attention head: `softmax(q k^T * scale) v`.
    ///
    /// With `n_queries = Some(nq)`, the first `nq` rows are treated as
    /// queries that attend to themselves and to the remaining context rows,
    /// while context rows attend only to the context block. Queries never
    /// attend to each other, so each query's output matches a single-query
    /// evaluation against the same context exactly.
    pub fn attention_head(&mut self, q: TensorId, k: TensorId, v: TensorId, scale: f64, n_queries: Option<usize>) -> Result<TensorId> {
        let (r, dk) = self.rank2(q, "attention_head")?;
        if self.shape(k) != [r, dk] || self.shape(v) != [r, dk] {
            return Err(Error::ShapeMismatch { op: "attention_head", left: vec![r, dk], right: self.shape(k).to_vec() });
        }
        if let Some(nq) = n_queries {
            if nq > r {
                return Err(Error::Usage(format!("n_queries {nq} exceeds {r} rows")));
            }
        }
        let (out, saved) = attention_forward(self.values(q), self.values(k), self.values(v), r, dk, scale, n_queries, self.record_grads);
        Ok(self.push(out, vec![r, dk], false, Op::AttentionHead { q, k, v, scale, n_queries }, Saved { bufs: saved }))
    }

    /// Obstacle density at each row, evaluated on the first two coordinates.
    pub fn gaussian_bump_density(&mut self, a: TensorId, bumps: Arc<BumpSet>) -> Result<TensorId> {
        let (m, d) = self.rank2(a, "gaussian_bump_density")?;
        if d < 2 {
            return Err(Error::Dimension { expected: 2, got: d });
        }
        let x = self.values(a);
        let values: Vec<f64> = (0..m).map(|r| bumps.density(&x[r * d..(r + 1) * d])).collect();
        Ok(self.push(values, vec![m], false, Op::GaussianBumpDensity { input: a, bumps }, Saved::default()))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradients of a scalar loss w.r.t. every `param` tensor.
    ///
    /// Accumulation runs over the fixed reverse tape order, so repeated
    /// calls return bit-identical results.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if !self.record_grads {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &g, &mut grads);
            if self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients { entries: Vec::new() };
        for (i, slot) in grads.into_iter().enumerate() {
            if self.nodes[i].requires_grad {
                let len = self.nodes[i].values.len();
                out.entries.push((TensorId(i), slot.unwrap_or_else(|| vec![0.0; len])));
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, contribution: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contribution) {
                    *gi += c;
                }
            }
            None => grads[id.0] = Some(contribution.to_vec()),
        }
    }

    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.values(*b)).map(|(&gi, &y)| gi * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.values(*a)).map(|(&gi, &x)| gi * x).collect();
                self.accum(grads, *a, &ga);
                self.accum(grads, *b, &gb);
            }
            Op::Neg(a) => {
                let ga: Vec<f64> = g.iter().map(|&x| -x).collect();
                self.accum(grads, *a, &ga);
            }
            Op::Square(a) => {
                let ga: Vec<f64> = g.iter().zip(self.values(*a)).map(|(&gi, &x)| 2.0 * x * gi).collect();
                self.accum(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.values).map(|(&gi, &y)| gi * y).collect();
                self.accum(grads, *a, &ga);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|&x| c * x).collect();
                self.accum(grads, *a, &ga);
            }
            Op::AddRowBroadcast(a, v) => {
                self.accum(grads, *a, g);
                let n = self.shape(*v)[0];
                let mut gv = vec![0.0; n];
                for (i, &gi) in g.iter().enumerate() {
                    gv[i % n] += gi;
                }
                self.accum(grads, *v, &gv);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].needs_grad {
                    // dA = g · B^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.values(*b), true, 0.0, &mut ga);
                    self.accum(grads, *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T · g
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(k, m, n, self.values(*a), g, &mut gb);
                    self.accum(grads, *b, &gb);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.nodes[a.0].needs_grad {
                    // dA = g · B
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.values(*b), false, 0.0, &mut ga);
                    self.accum(grads, *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = g^T · A
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(n, m, k, g, self.values(*a), &mut gb);
                    self.accum(grads, *b, &gb);
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let y = &node.values;
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for c in 0..n {
                        ga[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accum(grads, *a, &ga);
            }
            Op::LayerNorm { input, gain, bias, .. } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let stats = &node.saved.bufs[0];
                let x = self.values(*input);
                let gn = self.values(*gain);
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    let mean = stats[2 * r];
                    let inv_std = stats[2 * r + 1];
                    let xr = &x[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    // d through the affine part
                    let mut sum_h = 0.0; // sum of gain-weighted upstream
                    let mut sum_hx = 0.0; // weighted by normalized input
                    for c in 0..n {
                        let xhat = (xr[c] - mean) * inv_std;
                        let h = gr[c] * gn[c];
                        gg[c] += gr[c] * xhat;
                        gb[c] += gr[c];
                        sum_h += h;
                        sum_hx += h * xhat;
                    }
                    for c in 0..n {
                        let xhat = (xr[c] - mean) * inv_std;
                        let h = gr[c] * gn[c];
                        gx[r * n + c] = inv_std * (h - sum_h / n as f64 - xhat * sum_hx / n as f64);
                    }
                }
                self.accum(grads, *input, &gx);
                self.accum(grads, *gain, &gg);
                self.accum(grads, *bias, &gb);
            }
            Op::Gelu(a) => {
                let x = self.values(*a);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * (gauss_cdf(xi) + xi * gauss_pdf(xi)))
                    .collect();
                self.accum(grads, *a, &ga);
            }
            Op::ConcatRows(a, b) => {
                let la = self.values(*a).len();
                self.accum(grads, *a, &g[..la]);
                self.accum(grads, *b, &g[la..]);
            }
            Op::ConcatCols(ids) => {
                let m = node.shape[0];
                let n = node.shape[1];
                let mut col0 = 0;
                for &id in ids {
                    let w = self.shape(id)[1];
                    if self.nodes[id.0].needs_grad {
                        let mut gi = vec![0.0; m * w];
                        for r in 0..m {
                            gi[r * w..(r + 1) * w].copy_from_slice(&g[r * n + col0..r * n + col0 + w]);
                        }
                        self.accum(grads, id, &gi);
                    }
                    col0 += w;
                }
            }
            Op::SliceRows { input, start, len } => {
                let (m, n) = (self.shape(*input)[0], self.shape(*input)[1]);
                let mut gi = vec![0.0; m * n];
                gi[start * n..(start + len) * n].copy_from_slice(g);
                self.accum(grads, *input, &gi);
            }
            Op::SumAll(a) => {
                let gi = vec![g[0]; self.values(*a).len()];
                self.accum(grads, *a, &gi);
            }
            Op::MeanAll(a) => {
                let len = self.values(*a).len();
                let gi = vec![g[0] / len as f64; len];
                self.accum(grads, *a, &gi);
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let (m, n) = (self.shape(*input)[0], self.shape(*input)[1]);
                let denom = match node.op {
                    Op::MeanAxis { .. } => {
                        if *axis == 0 {
                            m as f64
                        } else {
                            n as f64
                        }
                    }
                    _ => 1.0,
                };
                let mut gi = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        let i = if *axis == 0 { c } else { r };
                        gi[r * n + c] = g[i] / denom;
                    }
                }
                self.accum(grads, *input, &gi);
            }
            Op::SqNormRows(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let x = self.values(*a);
                let mut gi = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        gi[r * n + c] = 2.0 * x[r * n + c] * g[r];
                    }
                }
                self.accum(grads, *a, &gi);
            }
            Op::LinComb { inputs, coeffs } => {
                for (&id, &c) in inputs.iter().zip(coeffs) {
                    if self.nodes[id.0].needs_grad {
                        let gi: Vec<f64> = g.iter().map(|&x| c * x).collect();
                        self.accum(grads, id, &gi);
                    }
                }
            }
            Op::Trace(a) => {
                let n = self.shape(*a)[0];
                let mut gi = vec![0.0; n * n];
                for i in 0..n {
                    gi[i * n + i] = g[0];
                }
                self.accum(grads, *a, &gi);
            }
            Op::PairwiseSqDist(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (xa, xb) = (self.values(*a), self.values(*b));
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            for c in 0..d {
                                ga[i * d + c] += gij * (xa[i * d + c] - xb[j * d + c]);
                            }
                        }
                    }
                    self.accum(grads, *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            for c in 0..d {
                                gb[j * d + c] -= gij * (xa[i * d + c] - xb[j * d + c]);
                            }
                        }
                    }
                    self.accum(grads, *b, &gb);
                }
            }
            Op::PairwiseL1(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (xa, xb) = (self.values(*a), self.values(*b));
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            for c in 0..d {
                                ga[i * d + c] += gij * (xa[i * d + c] - xb[j * d + c]).signum();
                            }
                        }
                    }
                    self.accum(grads, *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            for c in 0..d {
                                gb[j * d + c] -= gij * (xa[i * d + c] - xb[j * d + c]).signum();
                            }
                        }
                    }
                    self.accum(grads, *b, &gb);
                }
            }
            Op::Dropout { input, p, seed } => {
                let keep_scale = 1.0 / (1.0 - p);
                let gi: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| if dropout_kept(*seed, i, *p) { gi * keep_scale } else { 0.0 })
                    .collect();
                self.accum(grads, *input, &gi);
            }
            Op::AttentionHead { q, k, v, scale, n_queries } => {
                let (r, dk) = (node.shape[0], node.shape[1]);
                let (gq, gk, gv) = attention_backward(
                    self.values(*q),
                    self.values(*k),
                    self.values(*v),
                    r,
                    dk,
                    *scale,
                    *n_queries,
                    &node.saved.bufs,
                    g,
                );
                self.accum(grads, *q, &gq);
                self.accum(grads, *k, &gk);
                self.accum(grads, *v, &gv);
            }
            Op::GaussianBumpDensity { input, bumps } => {
                let (m, d) = (self.shape(*input)[0], self.shape(*input)[1]);
                let x = self.values(*input);
                let mut gi = vec![0.0; m * d];
                for row in 0..m {
                    let grad2 = bumps.density_grad(&x[row * d..(row + 1) * d]);
                    gi[row * d] = g[row] * grad2[0];
                    gi[row * d + 1] = g[row] * grad2[1];
                }
                self.accum(grads, *input, &gi);
            }
        }
    }
}

/// Gradients keyed by parameter tensor id, in tape order.
pub struct Gradients {
    entries: Vec<(TensorId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|pos| self.entries[pos].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &[f64])> {
        self.entries.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

// ── Scalar kernels ──────────────────────────────────────────────────

/// Standard normal CDF (exact erf form).
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn softmax_inplace(row: &mut [f64]) {
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

fn dropout_kept(seed: u64, index: usize, p: f64) -> bool {
    let bits = mix(seed ^ mix(index as u64 ^ 0x6a09_e667_f3bc_c908));
    let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    u >= p
}

/// `out = alpha? no: out = beta*out + a(?T) · b(?T)` with row-major slices.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
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
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m,n] = a[k,m]^T · b[k,n]`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    gemm(m, k, n, a, true, b, false, 0.0, out)
}

// ── Attention kernels ───────────────────────────────────────────────

/// Row block size for streamed (inference) attention.
const ATTN_CHUNK: usize = 256;

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    r: usize,
    dk: usize,
    scale: f64,
    n_queries: Option<usize>,
    save: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    match n_queries {
        None => attention_forward_full(q, k, v, r, dk, scale, save),
        Some(nq) => attention_forward_masked(q, k, v, r, dk, scale, nq, save),
    }
}

fn attention_forward_full(q: &[f64], k: &[f64], v: &[f64], r: usize, dk: usize, scale: f64, save: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut out = vec![0.0; r * dk];
    if save {
        let mut attn = vec![0.0; r * r];
        gemm(r, dk, r, q, false, k, true, 0.0, &mut attn);
        for row in attn.chunks_mut(r) {
            for s in row.iter_mut() {
                *s *= scale;
            }
            softmax_inplace(row);
        }
        gemm(r, r, dk, &attn, false, v, false, 0.0, &mut out);
        (out, vec![attn])
    } else {
        let mut scores = vec![0.0; ATTN_CHUNK * r];
        let mut row0 = 0;
        while row0 < r {
            let rows = ATTN_CHUNK.min(r - row0);
            let block = &mut scores[..rows * r];
            gemm(rows, dk, r, &q[row0 * dk..(row0 + rows) * dk], false, k, true, 0.0, block);
            for row in block.chunks_mut(r) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_inplace(row);
            }
            gemm(rows, r, dk, block, false, v, false, 0.0, &mut out[row0 * dk..(row0 + rows) * dk]);
            row0 += rows;
        }
        (out, Vec::new())
    }
}

/// Masked layout: rows `[0, nq)` are queries, rows `[nq, r)` are context.
/// Saved buffers: `[w_self (nq), a_qc (nq x c), a_cc (c x c)]`.
fn attention_forward_masked(q: &[f64], k: &[f64], v: &[f64], r: usize, dk: usize, scale: f64, nq: usize, save: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let c = r - nq;
    let k_ctx = &k[nq * dk..];
    let v_ctx = &v[nq * dk..];
    let mut out = vec![0.0; r * dk];

    // Query rows: softmax over [self, context].
    let mut w_self = vec![0.0; nq];
    let mut a_qc = vec![0.0; nq * c];
    if nq > 0 {
        gemm(nq, dk, c, &q[..nq * dk], false, k_ctx, true, 0.0, &mut a_qc);
        for i in 0..nq {
            let qi = &q[i * dk..(i + 1) * dk];
            let ki = &k[i * dk..(i + 1) * dk];
            let self_score = qi.iter().zip(ki).map(|(&a, &b)| a * b).sum::<f64>() * scale;
            let row = &mut a_qc[i * c..(i + 1) * c];
            let mut max = self_score;
            for s in row.iter_mut() {
                *s *= scale;
                max = max.max(*s);
            }
            let es = (self_score - max).exp();
            let mut sum = es;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            w_self[i] = es / sum;
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        gemm(nq, c, dk, &a_qc, false, v_ctx, false, 0.0, &mut out[..nq * dk]);
        for i in 0..nq {
            let vi = &v[i * dk..(i + 1) * dk];
            for (o, &vv) in out[i * dk..(i + 1) * dk].iter_mut().zip(vi) {
                *o += w_self[i] * vv;
            }
        }
    }

    // Context rows: softmax over the context block only.
    if save {
        let mut a_cc = vec![0.0; c * c];
        gemm(c, dk, c, &q[nq * dk..], false, k_ctx, true, 0.0, &mut a_cc);
        for row in a_cc.chunks_mut(c) {
            for s in row.iter_mut() {
                *s *= scale;
            }
            softmax_inplace(row);
        }
        gemm(c, c, dk, &a_cc, false, v_ctx, false, 0.0, &mut out[nq * dk..]);
        (out, vec![w_self, a_qc, a_cc])
    } else {
        let mut scores = vec![0.0; ATTN_CHUNK * c];
        let mut row0 = 0;
        while row0 < c {
            let rows = ATTN_CHUNK.min(c - row0);
            let block = &mut scores[..rows * c];
            gemm(rows, dk, c, &q[(nq + row0) * dk..(nq + row0 + rows) * dk], false, k_ctx, true, 0.0, block);
            for row in block.chunks_mut(c) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_inplace(row);
            }
            gemm(rows, c, dk, block, false, v_ctx, false, 0.0, &mut out[(nq + row0) * dk..(nq + row0 + rows) * dk]);
            row0 += rows;
        }
        (out, Vec::new())
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    r: usize,
    dk: usize,
    scale: f64,
    n_queries: Option<usize>,
    saved: &[Vec<f64>],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gq = vec![0.0; r * dk];
    let mut gk = vec![0.0; r * dk];
    let mut gv = vec![0.0; r * dk];

    match n_queries {
        None => {
            let attn = &saved[0];
            // dV = A^T g
            gemm_tn(r, r, dk, attn, g, &mut gv);
            // dA = g V^T, then per-row softmax VJP.
            let mut ds = vec![0.0; r * r];
            gemm(r, dk, r, g, false, v, true, 0.0, &mut ds);
            for i in 0..r {
                let a_row = &attn[i * r..(i + 1) * r];
                let d_row = &mut ds[i * r..(i + 1) * r];
                let dot: f64 = a_row.iter().zip(d_row.iter()).map(|(&a, &d)| a * d).sum();
                for (dj, &aj) in d_row.iter_mut().zip(a_row) {
                    *dj = aj * (*dj - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(r, r, dk, &ds, false, k, false, 0.0, &mut gq);
            gemm_tn(r, r, dk, &ds, q, &mut gk);
        }
        Some(nq) => {
            let c = r - nq;
            let w_self = &saved[0];
            let a_qc = &saved[1];
            let a_cc = &saved[2];
            let k_ctx = &k[nq * dk..];
            let v_ctx = &v[nq * dk..];
            let q_ctx = &q[nq * dk..];
            let g_q = &g[..nq * dk];
            let g_c = &g[nq * dk..];

            // Context block: same as the full case restricted to context rows.
            {
                let mut gv_ctx = vec![0.0; c * dk];
                gemm_tn(c, c, dk, a_cc, g_c, &mut gv_ctx);
                for (o, x) in gv[nq * dk..].iter_mut().zip(&gv_ctx) {
                    *o += x;
                }
                let mut ds = vec![0.0; c * c];
                gemm(c, dk, c, g_c, false, v_ctx, true, 0.0, &mut ds);
                for i in 0..c {
                    let a_row = &a_cc[i * c..(i + 1) * c];
                    let d_row = &mut ds[i * c..(i + 1) * c];
                    let dot: f64 = a_row.iter().zip(d_row.iter()).map(|(&a, &d)| a * d).sum();
                    for (dj, &aj) in d_row.iter_mut().zip(a_row) {
                        *dj = aj * (*dj - dot) * scale;
                    }
                }
                let mut gq_ctx = vec![0.0; c * dk];
                gemm(c, c, dk, &ds, false, k_ctx, false, 0.0, &mut gq_ctx);
                for (o, x) in gq[nq * dk..].iter_mut().zip(&gq_ctx) {
                    *o += x;
                }
                let mut gk_ctx = vec![0.0; c * dk];
                gemm_tn(c, c, dk, &ds, q_ctx, &mut gk_ctx);
                for (o, x) in gk[nq * dk..].iter_mut().zip(&gk_ctx) {
                    *o += x;
                }
            }

            // Query rows: softmax over [self, context].
            if nq > 0 {
                // dV_c += A_qc^T g_q; self value rows get w_self-weighted upstream.
                let mut gv_ctx = vec![0.0; c * dk];
                gemm_tn(c, nq, dk, a_qc, g_q, &mut gv_ctx);
                for (o, x) in gv[nq * dk..].iter_mut().zip(&gv_ctx) {
                    *o += x;
                }
                for i in 0..nq {
                    let gi = &g_q[i * dk..(i + 1) * dk];
                    for (o, &x) in gv[i * dk..(i + 1) * dk].iter_mut().zip(gi) {
                        *o += w_self[i] * x;
                    }
                }
                // dA over [self, context] then softmax VJP row by row.
                let mut d_qc = vec![0.0; nq * c];
                gemm(nq, dk, c, g_q, false, v_ctx, true, 0.0, &mut d_qc);
                let mut ds_qc = vec![0.0; nq * c];
                let mut ds_self = vec![0.0; nq];
                for i in 0..nq {
                    let gi = &g_q[i * dk..(i + 1) * dk];
                    let vi = &v[i * dk..(i + 1) * dk];
                    let d_self: f64 = gi.iter().zip(vi).map(|(&a, &b)| a * b).sum();
                    let a_row = &a_qc[i * c..(i + 1) * c];
                    let d_row = &d_qc[i * c..(i + 1) * c];
                    let mut dot = w_self[i] * d_self;
                    dot += a_row.iter().zip(d_row).map(|(&a, &d)| a * d).sum::<f64>();
                    ds_self[i] = w_self[i] * (d_self - dot) * scale;
                    for j in 0..c {
                        ds_qc[i * c + j] = a_row[j] * (d_row[j] - dot) * scale;
                    }
                }
                // dQ_q = dS_qc K_c + dS_self * k_i ; dK_c += dS_qc^T Q_q ; dk_i += dS_self * q_i.
                let mut gq_q = vec![0.0; nq * dk];
                gemm(nq, c, dk, &ds_qc, false, k_ctx, false, 0.0, &mut gq_q);
                for i in 0..nq {
                    let ki = &k[i * dk..(i + 1) * dk];
                    for (o, (&x, &kk)) in gq[i * dk..(i + 1) * dk].iter_mut().zip(gq_q[i * dk..(i + 1) * dk].iter().zip(ki)) {
                        *o += x + ds_self[i] * kk;
                    }
                }
                let mut gk_ctx = vec![0.0; c * dk];
                gemm_tn(c, nq, dk, &ds_qc, &q[..nq * dk], &mut gk_ctx);
                for (o, x) in gk[nq * dk..].iter_mut().zip(&gk_ctx) {
                    *o += x;
                }
                for i in 0..nq {
                    let qi = &q[i * dk..(i + 1) * dk];
                    for (o, &qq) in gk[i * dk..(i + 1) * dk].iter_mut().zip(qi) {
                        *o += ds_self[i] * qq;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
