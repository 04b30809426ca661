//! The solution-operator network.
//!
//! Sampled distributions enter as row-stacked point batches. Queries are
//! stacked on the initial batch, both batches are featurized by separate
//! point-wise MLPs, and the concatenated rows pass through repeated
//! multi-head attention blocks. The first query rows of the result are
//! projected back to the problem dimension.
//!
//! Two evaluation modes:
//! - static: `G(X0, X1)(x)` maps a point straight to its destination;
//! - dynamic: `G(X0, X1)(x, t) = Ghat(x,t) - Ghat(x,0) + x`, which pins
//!   `G(x, 0) = x` exactly for any weights.
//!
//! Query rows attend to themselves and to the context rows but never to
//! each other, so a batched evaluation equals per-query evaluation exactly
//! and adding queries cannot perturb existing outputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng;
use crate::sample::SampleBatch;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Static,
    Dynamic,
}

/// Architecture hyperparameters; weight shapes are a pure function of these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelHyper {
    pub dim: usize,
    pub embed_width: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub mode: Mode,
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.embed_width == 0 || self.mlp_hidden == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(Error::InvalidParameter("model dimensions must be positive".into()));
        }
        if self.embed_width % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "embed width {} not divisible by {} heads",
                self.embed_width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.mode == Mode::Dynamic && self.dropout != 0.0 {
            return Err(Error::InvalidParameter(
                "dynamic mode requires dropout 0 (mask sharing across times is unsupported)".into(),
            ));
        }
        Ok(())
    }

    /// Key/value width per head.
    pub fn head_width(&self) -> usize {
        self.embed_width / self.heads
    }

    /// Width of featurizer inputs: the time coordinate rides along in
    /// dynamic mode.
    pub fn input_dim(&self) -> usize {
        match self.mode {
            Mode::Static => self.dim,
            Mode::Dynamic => self.dim + 1,
        }
    }

    /// Desk-scale defaults for a given problem dimension.
    pub fn desk(dim: usize, mode: Mode) -> ModelHyper {
        ModelHyper {
            dim,
            embed_width: 64,
            mlp_hidden: 256,
            blocks: 2,
            heads: 4,
            dropout: match mode {
                Mode::Static => 0.1,
                Mode::Dynamic => 0.0,
            },
            mode,
        }
    }
}

/// One-hidden-layer point-wise MLP: in -> hidden (GELU) -> out.
/// Dropout applies to the input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub heads: Vec<HeadWeights>,
    pub wo: Vec<f64>,
    pub mlp: Mlp,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub mlp0: Mlp,
    pub mlp1: Mlp,
    pub blocks: Vec<BlockWeights>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

fn mlp_init(rng: &mut impl Rng, in_dim: usize, hidden: usize, out_dim: usize) -> Mlp {
    Mlp {
        w1: glorot(rng, in_dim, hidden),
        b1: vec![0.0; hidden],
        w2: glorot(rng, hidden, out_dim),
        b2: vec![0.0; out_dim],
        in_dim,
        hidden,
        out_dim,
    }
}

impl ModelWeights {
    pub fn init(hyper: &ModelHyper, seed: u64) -> Result<ModelWeights> {
        hyper.validate()?;
        let mut r = rng::stream(seed, &[0x57E1_6877]);
        let h = hyper.embed_width;
        let dk = hyper.head_width();
        let din = hyper.input_dim();

        let mlp0 = mlp_init(&mut r, din, hyper.mlp_hidden, h);
        let mlp1 = mlp_init(&mut r, din, hyper.mlp_hidden, h);
        let blocks = (0..hyper.blocks)
            .map(|_| BlockWeights {
                heads: (0..hyper.heads)
                    .map(|_| HeadWeights {
                        wq: glorot(&mut r, h, dk),
                        wk: glorot(&mut r, h, dk),
                        wv: glorot(&mut r, h, dk),
                    })
                    .collect(),
                wo: glorot(&mut r, h, h),
                mlp: mlp_init(&mut r, h, hyper.mlp_hidden, h),
                ln1_gain: vec![1.0; h],
                ln1_bias: vec![0.0; h],
                ln2_gain: vec![1.0; h],
                ln2_bias: vec![0.0; h],
            })
            .collect();
        let head_w = glorot(&mut r, h, hyper.dim);
        let head_b = vec![0.0; hyper.dim];
        Ok(ModelWeights { mlp0, mlp1, blocks, head_w, head_b })
    }

    pub fn zeros(hyper: &ModelHyper) -> Result<ModelWeights> {
        let mut w = ModelWeights::init(hyper, 0)?;
        w.visit_mut(&mut |buf, _| buf.iter_mut().for_each(|v| *v = 0.0));
        Ok(w)
    }

    /// Visit every parameter buffer in the canonical (checkpoint) order.
    pub fn visit(&self, f: &mut impl FnMut(&[f64], &[usize])) {
        let mlp = |m: &Mlp, f: &mut dyn FnMut(&[f64], &[usize])| {
            f(&m.w1, &[m.in_dim, m.hidden]);
            f(&m.b1, &[m.hidden]);
            f(&m.w2, &[m.hidden, m.out_dim]);
            f(&m.b2, &[m.out_dim]);
        };
        mlp(&self.mlp0, f);
        mlp(&self.mlp1, f);
        for b in &self.blocks {
            let h = b.ln1_gain.len();
            let dk = b.heads[0].wq.len() / h;
            for head in &b.heads {
                f(&head.wq, &[h, dk]);
                f(&head.wk, &[h, dk]);
                f(&head.wv, &[h, dk]);
            }
            f(&b.wo, &[h, h]);
            mlp(&b.mlp, f);
            f(&b.ln1_gain, &[h]);
            f(&b.ln1_bias, &[h]);
            f(&b.ln2_gain, &[h]);
            f(&b.ln2_bias, &[h]);
        }
        let h = self.head_w.len() / self.head_b.len();
        f(&self.head_w, &[h, self.head_b.len()]);
        f(&self.head_b, &[self.head_b.len()]);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>, &[usize])) {
        let mlp = |m: &mut Mlp, f: &mut dyn FnMut(&mut Vec<f64>, &[usize])| {
            let (i, h, o) = (m.in_dim, m.hidden, m.out_dim);
            f(&mut m.w1, &[i, h]);
            f(&mut m.b1, &[h]);
            f(&mut m.w2, &[h, o]);
            f(&mut m.b2, &[o]);
        };
        mlp(&mut self.mlp0, f);
        mlp(&mut self.mlp1, f);
        for b in &mut self.blocks {
            let h = b.ln1_gain.len();
            let dk = b.heads[0].wq.len() / h;
            for head in &mut b.heads {
                f(&mut head.wq, &[h, dk]);
                f(&mut head.wk, &[h, dk]);
                f(&mut head.wv, &[h, dk]);
            }
            f(&mut b.wo, &[h, h]);
            mlp(&mut b.mlp, f);
            f(&mut b.ln1_gain, &[h]);
            f(&mut b.ln1_bias, &[h]);
            f(&mut b.ln2_gain, &[h]);
            f(&mut b.ln2_bias, &[h]);
        }
        let h = self.head_w.len() / self.head_b.len();
        let d = self.head_b.len();
        f(&mut self.head_w, &[h, d]);
        f(&mut self.head_b, &[d]);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |buf, _| n += buf.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |buf, _| out.extend_from_slice(buf));
        out
    }

    pub fn from_flat(hyper: &ModelHyper, flat: &[f64]) -> Result<ModelWeights> {
        let mut w = ModelWeights::zeros(hyper)?;
        let mut offset = 0;
        let mut overflow = false;
        w.visit_mut(&mut |buf, _| {
            let len = buf.len();
            if offset + len > flat.len() {
                overflow = true;
                return;
            }
            buf.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        });
        if overflow || offset != flat.len() {
            return Err(Error::ShapeMismatch { op: "from_flat", left: vec![flat.len()], right: vec![offset] });
        }
        Ok(w)
    }
}

// ── Tape binding ────────────────────────────────────────────────────

#[derive(Clone)]
pub struct BoundMlp {
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
}

#[derive(Clone)]
pub struct BoundBlock {
    heads: Vec<(TensorId, TensorId, TensorId)>,
    wo: TensorId,
    mlp: BoundMlp,
    ln1: (TensorId, TensorId),
    ln2: (TensorId, TensorId),
}

/// Weight tensors registered on a tape as gradient-bearing parameters.
#[derive(Clone)]
pub struct BoundWeights {
    mlp0: BoundMlp,
    mlp1: BoundMlp,
    blocks: Vec<BoundBlock>,
    head_w: TensorId,
    head_b: TensorId,
}

impl BoundWeights {
    pub fn block(&self, i: usize) -> &BoundBlock {
        &self.blocks[i]
    }

    /// Layer-norm (gain, bias) pair of block `i`; `which` selects the
    /// post-attention (0) or post-MLP (1) norm.
    pub fn block_ln(&self, i: usize, which: usize) -> (TensorId, TensorId) {
        if which == 0 {
            self.blocks[i].ln1
        } else {
            self.blocks[i].ln2
        }
    }

    /// Parameter tensor ids in the canonical (checkpoint) order.
    pub fn ordered_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        let mlp = |m: &BoundMlp, ids: &mut Vec<TensorId>| ids.extend([m.w1, m.b1, m.w2, m.b2]);
        mlp(&self.mlp0, &mut ids);
        mlp(&self.mlp1, &mut ids);
        for b in &self.blocks {
            for &(wq, wk, wv) in &b.heads {
                ids.extend([wq, wk, wv]);
            }
            ids.push(b.wo);
            mlp(&b.mlp, &mut ids);
            ids.extend([b.ln1.0, b.ln1.1, b.ln2.0, b.ln2.1]);
        }
        ids.extend([self.head_w, self.head_b]);
        ids
    }
}

/// Register all weights on `tape` in canonical order.
pub fn bind(tape: &mut Tape, weights: &ModelWeights) -> Result<BoundWeights> {
    let mlp = |tape: &mut Tape, m: &Mlp| -> Result<BoundMlp> {
        Ok(BoundMlp {
            w1: tape.param(m.w1.clone(), vec![m.in_dim, m.hidden])?,
            b1: tape.param(m.b1.clone(), vec![m.hidden])?,
            w2: tape.param(m.w2.clone(), vec![m.hidden, m.out_dim])?,
            b2: tape.param(m.b2.clone(), vec![m.out_dim])?,
        })
    };
    let mlp0 = mlp(tape, &weights.mlp0)?;
    let mlp1 = mlp(tape, &weights.mlp1)?;
    let mut blocks = Vec::with_capacity(weights.blocks.len());
    for b in &weights.blocks {
        let h = b.ln1_gain.len();
        let dk = b.heads[0].wq.len() / h;
        let mut heads = Vec::with_capacity(b.heads.len());
        for head in &b.heads {
            heads.push((
                tape.param(head.wq.clone(), vec![h, dk])?,
                tape.param(head.wk.clone(), vec![h, dk])?,
                tape.param(head.wv.clone(), vec![h, dk])?,
            ));
        }
        blocks.push(BoundBlock {
            heads,
            wo: tape.param(b.wo.clone(), vec![h, h])?,
            mlp: mlp(tape, &b.mlp)?,
            ln1: (tape.param(b.ln1_gain.clone(), vec![h])?, tape.param(b.ln1_bias.clone(), vec![h])?),
            ln2: (tape.param(b.ln2_gain.clone(), vec![h])?, tape.param(b.ln2_bias.clone(), vec![h])?),
        });
    }
    let d = weights.head_b.len();
    let h = weights.head_w.len() / d;
    Ok(BoundWeights {
        mlp0,
        mlp1,
        blocks,
        head_w: tape.param(weights.head_w.clone(), vec![h, d])?,
        head_b: tape.param(weights.head_b.clone(), vec![d])?,
    })
}

/// Per-forward dropout state: train flag plus a deterministic seed stream.
pub struct DropoutCtx {
    pub train: bool,
    pub p: f64,
    seed: u64,
    counter: u64,
}

impl DropoutCtx {
    pub fn train(p: f64, seed: u64) -> DropoutCtx {
        DropoutCtx { train: true, p, seed, counter: 0 }
    }

    pub fn eval() -> DropoutCtx {
        DropoutCtx { train: false, p: 0.0, seed: 0, counter: 0 }
    }

    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        rng::substream_seed(self.seed, &[0xD20_0172, self.counter])
    }
}

fn apply_mlp(tape: &mut Tape, m: &BoundMlp, x: TensorId, ctx: &mut DropoutCtx) -> Result<TensorId> {
    let x = tape.dropout(x, ctx.p, ctx.next_seed(), ctx.train)?;
    let a1 = tape.matmul(x, m.w1)?;
    let a1 = tape.add_row_broadcast(a1, m.b1)?;
    let z1 = tape.gelu(a1);
    let a2 = tape.matmul(z1, m.w2)?;
    tape.add_row_broadcast(a2, m.b2)
}

/// Multi-head self-attention over the rows of `z`.
pub fn mha(tape: &mut Tape, block: &BoundBlock, z: TensorId, n_queries: Option<usize>) -> Result<TensorId> {
    let dk = tape.shape(block.heads[0].0)[1];
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(block.heads.len());
    for &(wq, wk, wv) in &block.heads {
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        outs.push(tape.attention_head(q, k, v, scale, n_queries)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, block.wo)
}

/// Attention block: attention and point-wise MLP, each wrapped with a
/// residual connection and layer norm.
pub fn mht_block(
    tape: &mut Tape,
    block: &BoundBlock,
    z: TensorId,
    n_queries: Option<usize>,
    ctx: &mut DropoutCtx,
) -> Result<TensorId> {
    let a = mha(tape, block, z, n_queries)?;
    let za = tape.add(z, a)?;
    let z1 = tape.layer_norm(za, block.ln1.0, block.ln1.1, LN_EPS)?;
    let m = apply_mlp(tape, &block.mlp, z1, ctx)?;
    let zm = tape.add(z1, m)?;
    tape.layer_norm(zm, block.ln2.0, block.ln2.1, LN_EPS)
}

/// Shared trunk: featurize [queries; X0] and [X1], concatenate rows, run
/// the attention blocks, project the query rows back to the output space.
fn trunk(
    tape: &mut Tape,
    bound: &BoundWeights,
    queries: TensorId,
    x0: TensorId,
    x1: TensorId,
    ctx: &mut DropoutCtx,
) -> Result<TensorId> {
    let nq = tape.shape(queries)[0];
    let z0in = tape.concat_rows(queries, x0)?;
    let f0 = apply_mlp(tape, &bound.mlp0, z0in, ctx)?;
    let f1 = apply_mlp(tape, &bound.mlp1, x1, ctx)?;
    let mut z = tape.concat_rows(f0, f1)?;
    for block in &bound.blocks {
        z = mht_block(tape, block, z, Some(nq), ctx)?;
    }
    let zq = tape.slice_rows(z, 0, nq)?;
    let proj = tape.matmul(zq, bound.head_w)?;
    tape.add_row_broadcast(proj, bound.head_b)
}

fn check_dims(hyper: &ModelHyper, tape: &Tape, ids: &[TensorId]) -> Result<()> {
    for &id in ids {
        let got = tape.shape(id)[1];
        if got != hyper.dim {
            return Err(Error::Dimension { expected: hyper.dim, got });
        }
    }
    Ok(())
}

/// Static (interaction-free) forward: each query row maps to its
/// destination. `queries`, `x0`, `x1` are `[*, dim]` tensors on `tape`.
pub fn forward_static(
    tape: &mut Tape,
    hyper: &ModelHyper,
    bound: &BoundWeights,
    x0: TensorId,
    x1: TensorId,
    queries: TensorId,
    ctx: &mut DropoutCtx,
) -> Result<TensorId> {
    if hyper.mode != Mode::Static {
        return Err(Error::Usage("forward_static on a dynamic-mode model".into()));
    }
    check_dims(hyper, tape, &[queries, x0, x1])?;
    trunk(tape, bound, queries, x0, x1, ctx)
}

fn with_time(tape: &mut Tape, x: TensorId, t: f64) -> Result<TensorId> {
    let rows = tape.shape(x)[0];
    let col = tape.constant(vec![t; rows], vec![rows, 1])?;
    tape.concat_cols(&[x, col])
}

/// Time-augmented trunk without anchoring.
fn forward_dynamic_raw(
    tape: &mut Tape,
    bound: &BoundWeights,
    x0: TensorId,
    x1: TensorId,
    queries: TensorId,
    t: f64,
    ctx: &mut DropoutCtx,
) -> Result<TensorId> {
    let q_t = with_time(tape, queries, t)?;
    let x0_t = with_time(tape, x0, t)?;
    let x1_t = with_time(tape, x1, t)?;
    trunk(tape, bound, q_t, x0_t, x1_t, ctx)
}

/// Dynamic-mode forward pass with several time values sharing one anchor.
///
/// Returns one `[q, dim]` tensor per requested time; the anchor evaluation
/// at t = 0 is computed once, so `t = 0` entries return the queries
/// bit-exactly.
pub fn forward_dynamic_times(
    tape: &mut Tape,
    hyper: &ModelHyper,
    bound: &BoundWeights,
    x0: TensorId,
    x1: TensorId,
    queries: TensorId,
    times: &[f64],
    ctx: &mut DropoutCtx,
) -> Result<Vec<TensorId>> {
    if hyper.mode != Mode::Dynamic {
        return Err(Error::Usage("forward_dynamic on a static-mode model".into()));
    }
    check_dims(hyper, tape, &[queries, x0, x1])?;
    for &t in times {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidParameter(format!("time {t} outside [0,1]")));
        }
    }
    let anchor = forward_dynamic_raw(tape, bound, x0, x1, queries, 0.0, ctx)?;
    let mut outs = Vec::with_capacity(times.len());
    for &t in times {
        if t == 0.0 {
            // Ghat(x,0) - Ghat(x,0) + x: skip the arithmetic entirely.
            outs.push(queries);
            continue;
        }
        let gt = forward_dynamic_raw(tape, bound, x0, x1, queries, t, ctx)?;
        let diff = tape.sub(gt, anchor)?;
        outs.push(tape.add(diff, queries)?);
    }
    Ok(outs)
}

/// Single-time dynamic forward.
pub fn forward_dynamic(
    tape: &mut Tape,
    hyper: &ModelHyper,
    bound: &BoundWeights,
    x0: TensorId,
    x1: TensorId,
    queries: TensorId,
    t: f64,
    ctx: &mut DropoutCtx,
) -> Result<TensorId> {
    Ok(forward_dynamic_times(tape, hyper, bound, x0, x1, queries, &[t], ctx)?[0])
}

/// Hyper + weights bundle with value-level convenience entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: ModelHyper,
    pub weights: ModelWeights,
}

impl Model {
    pub fn init(hyper: ModelHyper, seed: u64) -> Result<Model> {
        Ok(Model { hyper, weights: ModelWeights::init(&hyper, seed)? })
    }

    /// Value-only static evaluation on an inference tape.
    pub fn map_points(&self, x0: &SampleBatch, x1: &SampleBatch, queries: &SampleBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let bound = bind(&mut tape, &self.weights)?;
        let x0t = tape.constant(x0.data().to_vec(), vec![x0.len(), x0.dim()])?;
        let x1t = tape.constant(x1.data().to_vec(), vec![x1.len(), x1.dim()])?;
        let qt = tape.constant(queries.data().to_vec(), vec![queries.len(), queries.dim()])?;
        let out = forward_static(&mut tape, &self.hyper, &bound, x0t, x1t, qt, &mut DropoutCtx::eval())?;
        Ok(tape.values(out).to_vec())
    }

    /// Value-only dynamic evaluation at the given times.
    pub fn trajectory_points(
        &self,
        x0: &SampleBatch,
        x1: &SampleBatch,
        queries: &SampleBatch,
        times: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference();
        let bound = bind(&mut tape, &self.weights)?;
        let x0t = tape.constant(x0.data().to_vec(), vec![x0.len(), x0.dim()])?;
        let x1t = tape.constant(x1.data().to_vec(), vec![x1.len(), x1.dim()])?;
        let qt = tape.constant(queries.data().to_vec(), vec![queries.len(), queries.dim()])?;
        let outs = forward_dynamic_times(&mut tape, &self.hyper, &bound, x0t, x1t, qt, times, &mut DropoutCtx::eval())?;
        Ok(outs.into_iter().map(|id| tape.values(id).to_vec()).collect())
    }
}
