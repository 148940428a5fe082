//! Attention, feed-forward, embedding, and the zero-initialized gated
//! attention primitive.
//!
//! All blocks are pre-norm residual: the sublayer reads a layer-normed copy
//! of its input and its output is added back onto the raw input. Per-head
//! projections are stored concatenated: head `h` of `wq`/`wk`/`wv` occupies
//! columns `h*d_head .. (h+1)*d_head` of a `[d x d]` matrix.

use crate::error::{Error, Result};
use crate::params::{join, ParamVisit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{sinusoidal_positions, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

// ---- parameter structs ------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttentionParams<S: Scalar> {
    pub heads: usize,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ln_gamma: Tensor<S>,
    pub ln_beta: Tensor<S>,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn init(d: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && d % heads == 0, "head count must divide width");
        AttentionParams {
            heads,
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            wo: Tensor::randn(&[d, d], INIT_STD, rng),
            ln_gamma: Tensor::filled(&[d], S::ONE),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<AttentionNodes> {
        Ok(AttentionNodes {
            heads: self.heads,
            width: self.width(),
            wq: tape.param(&join(prefix, "wq"), &self.wq)?,
            wk: tape.param(&join(prefix, "wk"), &self.wk)?,
            wv: tape.param(&join(prefix, "wv"), &self.wv)?,
            wo: tape.param(&join(prefix, "wo"), &self.wo)?,
            ln_gamma: tape.param(&join(prefix, "ln_gamma"), &self.ln_gamma)?,
            ln_beta: tape.param(&join(prefix, "ln_beta"), &self.ln_beta)?,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for AttentionParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "wq"), &self.wq);
        f(join(prefix, "wk"), &self.wk);
        f(join(prefix, "wv"), &self.wv);
        f(join(prefix, "wo"), &self.wo);
        f(join(prefix, "ln_gamma"), &self.ln_gamma);
        f(join(prefix, "ln_beta"), &self.ln_beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        f(join(prefix, "wo"), &mut self.wo);
        f(join(prefix, "ln_gamma"), &mut self.ln_gamma);
        f(join(prefix, "ln_beta"), &mut self.ln_beta);
    }
}

pub struct AttentionNodes {
    pub heads: usize,
    pub width: usize,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ln_gamma: NodeId,
    pub ln_beta: NodeId,
}

/// Per-head gate scalars for zero-initialized attention. Fresh gates are
/// exactly zero, which makes the gated block the identity at init.
#[derive(Clone, Debug)]
pub struct GateParams<S: Scalar> {
    pub g: Tensor<S>,
}

impl<S: Scalar> GateParams<S> {
    pub fn init(heads: usize) -> Self {
        GateParams {
            g: Tensor::zeros(&[heads]),
        }
    }

    pub fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<GateNodes> {
        Ok(GateNodes {
            g: tape.param(&join(prefix, "g"), &self.g)?,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for GateParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "g"), &self.g);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "g"), &mut self.g);
    }
}

pub struct GateNodes {
    pub g: NodeId,
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub ln_gamma: Tensor<S>,
    pub ln_beta: Tensor<S>,
}

impl<S: Scalar> FeedForwardParams<S> {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        FeedForwardParams {
            w1: Tensor::randn(&[d, 4 * d], INIT_STD, rng),
            b1: Tensor::zeros(&[4 * d]),
            w2: Tensor::randn(&[4 * d, d], INIT_STD, rng),
            b2: Tensor::zeros(&[d]),
            ln_gamma: Tensor::filled(&[d], S::ONE),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    pub fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<FeedForwardNodes> {
        Ok(FeedForwardNodes {
            w1: tape.param(&join(prefix, "w1"), &self.w1)?,
            b1: tape.param(&join(prefix, "b1"), &self.b1)?,
            w2: tape.param(&join(prefix, "w2"), &self.w2)?,
            b2: tape.param(&join(prefix, "b2"), &self.b2)?,
            ln_gamma: tape.param(&join(prefix, "ln_gamma"), &self.ln_gamma)?,
            ln_beta: tape.param(&join(prefix, "ln_beta"), &self.ln_beta)?,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for FeedForwardParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
        f(join(prefix, "ln_gamma"), &self.ln_gamma);
        f(join(prefix, "ln_beta"), &self.ln_beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "w1"), &mut self.w1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2);
        f(join(prefix, "b2"), &mut self.b2);
        f(join(prefix, "ln_gamma"), &mut self.ln_gamma);
        f(join(prefix, "ln_beta"), &mut self.ln_beta);
    }
}

pub struct FeedForwardNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub ln_gamma: NodeId,
    pub ln_beta: NodeId,
}

// ---- blocks ------------------------------------------------------------

fn check_width<S: Scalar>(
    tape: &Tape<S>,
    op: &'static str,
    x: NodeId,
    width: usize,
) -> Result<()> {
    let sh = tape.value(x).shape();
    if sh.len() != 2 || sh[1] != width {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sh.to_vec(),
            rhs: vec![width],
        });
    }
    Ok(())
}

/// Scaled dot-product multi-head attention with pre-layernorm on the queries
/// and a residual connection. Passing the same node as `queries` and
/// `keyvals` gives self-attention (keys/values then read the normed input).
/// `mask` is a row-major `[q x k]` keep-mask applied to every head.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    queries: NodeId,
    keyvals: NodeId,
    p: &AttentionNodes,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    check_width(tape, "attention queries", queries, p.width)?;
    check_width(tape, "attention keyvals", keyvals, p.width)?;
    let qn = tape.layer_norm(queries, p.ln_gamma, p.ln_beta, LN_EPS)?;
    let kvn = if keyvals == queries { qn } else { keyvals };
    let ctx = attention_context(tape, qn, kvn, p, mask, None)?;
    let out = tape.matmul(ctx, p.wo)?;
    tape.add(queries, out)
}

/// Zero-initialized gated cross-attention: per head, the attention context is
/// scaled by `tanh(g_h)` before the output projection, so fresh gates (g = 0)
/// make the block return its input exactly.
pub fn gated_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    history_tokens: NodeId,
    p: &AttentionNodes,
    gate: &GateNodes,
) -> Result<NodeId> {
    check_width(tape, "gated_attention input", x, p.width)?;
    check_width(tape, "gated_attention history", history_tokens, p.width)?;
    if tape.value(gate.g).len() != p.heads {
        return Err(Error::ShapeMismatch {
            op: "gated_attention gate",
            lhs: tape.value(gate.g).shape().to_vec(),
            rhs: vec![p.heads],
        });
    }
    let xn = tape.layer_norm(x, p.ln_gamma, p.ln_beta, LN_EPS)?;
    let ctx = attention_context(tape, xn, history_tokens, p, None, Some(gate))?;
    let out = tape.matmul(ctx, p.wo)?;
    tape.add(x, out)
}

/// Shared per-head attention body; `gate` scales each head's context by
/// `tanh(g_h)` when present.
fn attention_context<S: Scalar>(
    tape: &mut Tape<S>,
    queries_normed: NodeId,
    keyvals: NodeId,
    p: &AttentionNodes,
    mask: Option<&[bool]>,
    gate: Option<&GateNodes>,
) -> Result<NodeId> {
    let q = tape.matmul(queries_normed, p.wq)?;
    let k = tape.matmul(keyvals, p.wk)?;
    let v = tape.matmul(keyvals, p.wv)?;
    let d_head = p.width / p.heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.narrow(q, 1, h * d_head, d_head)?;
        let kh = tape.narrow(k, 1, h * d_head, d_head)?;
        let vh = tape.narrow(v, 1, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul_scaled(qh, kt, scale)?;
        let probs = match mask {
            Some(m) => tape.masked_softmax_lastdim(scores, m.to_vec())?,
            None => tape.softmax_lastdim(scores)?,
        };
        let mut ctx = tape.matmul(probs, vh)?;
        if let Some(gn) = gate {
            let gh = tape.narrow(gn.g, 0, h, 1)?;
            let gh = tape.tanh(gh);
            ctx = tape.scale_by(ctx, gh)?;
        }
        heads.push(ctx);
    }
    tape.concat(&heads, 1)
}

/// Pre-norm residual feed-forward: `x + W2 gelu(W1 LN(x) + b1) + b2`.
pub fn feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    p: &FeedForwardNodes,
) -> Result<NodeId> {
    let d = tape.value(p.w1).rows();
    check_width(tape, "feed_forward input", x, d)?;
    let xn = tape.layer_norm(x, p.ln_gamma, p.ln_beta, LN_EPS)?;
    let h = tape.matmul(xn, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, p.w2)?;
    let out = tape.add(out, p.b2)?;
    tape.add(x, out)
}

/// Positional signal added on top of a token-table lookup.
pub enum Positions {
    None,
    Sinusoidal,
    /// Learned per-history-slot embedding row, broadcast over the sequence.
    HistoryIndex {
        slot: usize,
        table: NodeId,
    },
}

/// Token embedding plus the selected positional signal. An empty id list
/// yields a `[0 x d]` tensor.
pub fn embed_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    table: NodeId,
    ids: &[u32],
    positions: Positions,
) -> Result<NodeId> {
    let d = tape.value(table).cols();
    if ids.is_empty() {
        return Ok(tape.leaf(Tensor::empty_rows(d)));
    }
    let e = tape.embed(table, ids)?;
    match positions {
        Positions::None => Ok(e),
        Positions::Sinusoidal => {
            let pe = tape.leaf(sinusoidal_positions::<S>(ids.len(), d));
            tape.add(e, pe)
        }
        Positions::HistoryIndex { slot, table: idx } => {
            let row = tape.narrow(idx, 0, slot, 1)?;
            tape.add(e, row)
        }
    }
}
