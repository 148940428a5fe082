//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Each forward pass builds a fresh `Tape`; `backward` consumes the recorded
//! graph and returns a [`GradientMap`] keyed by parameter name. The graph is
//! dropped with the tape, which keeps memory proportional to one pass.
//!
//! Gradients are only propagated into nodes that (transitively) depend on a
//! registered parameter, so constant inputs cost nothing on the way back.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// GELU tanh approximation constant sqrt(2/pi).
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Narrow { a: NodeId, axis: usize, start: usize },
    Concat { parts: Arc<Vec<NodeId>>, axis: usize },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId },
    ScaleByNode { a: NodeId, s: NodeId },
    Tanh { a: NodeId },
    Gelu { a: NodeId },
    // No mask stored: masked positions have zero probability in the output,
    // which the softmax backward formula already maps to zero gradient.
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    CrossEntropy { logits: NodeId, targets: Arc<Vec<usize>> },
    Embed { table: NodeId, ids: Arc<Vec<u32>> },
    MeanRows { a: NodeId },
    SumAll { a: NodeId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op,
    scale: S, // extra factor for Matmul / Scale
}

/// Gradients keyed by parameter name. Registered parameters that the loss
/// does not reach get zero tensors of the right shape.
#[derive(Debug, Clone)]
pub struct GradientMap<S: Scalar> {
    grads: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> GradientMap<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum another map into this one (used for grad accumulation in tests).
    pub fn add_assign(&mut self, other: &GradientMap<S>) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) => {
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, NodeId)>,
    param_names: HashMap<String, NodeId>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_names: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool, scale: S) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
            scale,
        });
        id
    }

    /// Constant input; gradients never flow into it.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false, S::ONE)
    }

    /// Trainable parameter leaf. Each name may appear once per tape.
    pub fn param(&mut self, name: &str, value: &Tensor<S>) -> Result<NodeId> {
        if self.param_names.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.push(value.clone(), Op::Leaf, true, S::ONE);
        self.params.push((name.to_string(), id));
        self.param_names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.param_names.get(name).copied()
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- forward ops -------------------------------------------------

    /// Matrix product. Rank-2 x rank-2, or batched rank-3 forms where the
    /// leading dimension matches (or the right side is rank-2 and broadcast).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_scaled(a, b, 1.0)
    }

    /// `scale * (a @ b)`; the scale folds 1/sqrt(d_head) into attention scores.
    pub fn matmul_scaled(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        let (ash, bsh) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        let (batch, m, k) = match ash.len() {
            2 => (1, ash[0], ash[1]),
            3 => (ash[0], ash[1], ash[2]),
            _ => return Err(mismatch()),
        };
        let (b_batch, kb, n) = match bsh.len() {
            2 => (1, bsh[0], bsh[1]),
            3 => (bsh[0], bsh[1], bsh[2]),
            _ => return Err(mismatch()),
        };
        if k != kb || (b_batch != 1 && b_batch != batch) || (ash.len() == 2 && bsh.len() == 3) {
            return Err(mismatch());
        }
        let out_shape = if ash.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let sc = S::from_f64(scale);
        let mut out = vec![S::ZERO; batch * m * n];
        let adata = self.nodes[a].value.data();
        let bdata = self.nodes[b].value.data();
        for bi in 0..batch {
            let asl = &adata[bi * m * k..(bi + 1) * m * k];
            let bsl = if b_batch == 1 {
                bdata
            } else {
                &bdata[bi * k * n..(bi + 1) * k * n]
            };
            linalg::matmul_acc(asl, bsl, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        if sc != S::ONE {
            for v in &mut out {
                *v *= sc;
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("matmul shape"),
            Op::Matmul { a, b },
            needs,
            sc,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if t.rank() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "rank-2 required",
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let out = linalg::transpose(t.data(), m, n);
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, m], out).expect("transpose shape"),
            Op::Transpose { a },
            needs,
            S::ONE,
        ))
    }

    /// Contiguous slice along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::BadShape {
                op: "narrow",
                shape,
                reason: "slice out of bounds",
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = t.data();
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("narrow shape"),
            Op::Narrow { a, axis, start },
            needs,
            S::ONE,
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat",
                shape: vec![],
                reason: "no parts",
            });
        }
        let first = self.nodes[parts[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::BadShape {
                op: "concat",
                shape: first,
                reason: "axis out of range",
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.nodes[p].value.shape();
            if sh.len() != first.len()
                || sh
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sh.to_vec(),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::ZERO; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let sh = self.nodes[p].value.shape();
            let plen = sh[axis];
            let src = self.nodes[p].value.data();
            for o in 0..outer {
                let dst_base = o * axis_total * inner + offset * inner;
                let src_base = o * plen * inner;
                out[dst_base..dst_base + plen * inner]
                    .copy_from_slice(&src[src_base..src_base + plen * inner]);
            }
            offset += plen;
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("concat shape"),
            Op::Concat {
                parts: Arc::new(parts.to_vec()),
                axis,
            },
            needs,
            S::ONE,
        ))
    }

    fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
        // b must match a suffix of a's shape (after dropping b's leading 1s),
        // or be the scalar [1].
        let b_trim: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
        if b_trim.is_empty() {
            return true;
        }
        if b_trim.len() > a.len() {
            return false;
        }
        a[a.len() - b_trim.len()..] == b_trim[..]
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Vec<S>, Vec<usize>)> {
        let (ash, bsh) = (
            self.nodes[a].value.shape().to_vec(),
            self.nodes[b].value.shape().to_vec(),
        );
        if !Self::broadcast_ok(&ash, &bsh) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: ash,
                rhs: bsh,
            });
        }
        let alen = self.nodes[a].value.len();
        let blen = self.nodes[b].value.len();
        Ok((vec![S::ZERO; alen], vec![alen, blen]))
    }

    /// Element-wise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (mut out, lens) = self.binary_elementwise("add", a, b)?;
        let (alen, blen) = (lens[0], lens[1]);
        let ad = self.nodes[a].value.data();
        let bd = self.nodes[b].value.data();
        for (i, o) in out.iter_mut().enumerate().take(alen) {
            *o = ad[i] + bd[i % blen];
        }
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out).expect("add shape"),
            Op::Add { a, b },
            needs,
            S::ONE,
        ))
    }

    /// Element-wise product with the same broadcast rule as `add`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (mut out, lens) = self.binary_elementwise("mul", a, b)?;
        let (alen, blen) = (lens[0], lens[1]);
        let ad = self.nodes[a].value.data();
        let bd = self.nodes[b].value.data();
        for (i, o) in out.iter_mut().enumerate().take(alen) {
            *o = ad[i] * bd[i % blen];
        }
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out).expect("mul shape"),
            Op::Mul { a, b },
            needs,
            S::ONE,
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let sc = S::from_f64(c);
        let out: Vec<S> = self.nodes[a].value.data().iter().map(|&v| v * sc).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(
            Tensor::new(shape, out).expect("scale shape"),
            Op::Scale { a },
            needs,
            sc,
        )
    }

    /// Multiply every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.len() != 1 {
            return Err(Error::BadShape {
                op: "scale_by",
                shape: self.nodes[s].value.shape().to_vec(),
                reason: "scale node must hold one element",
            });
        }
        let sv = self.nodes[s].value.data()[0];
        let out: Vec<S> = self.nodes[a].value.data().iter().map(|&v| v * sv).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a, s]);
        Ok(self.push(
            Tensor::new(shape, out).expect("scale_by shape"),
            Op::ScaleByNode { a, s },
            needs,
            S::ONE,
        ))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<S> = self.nodes[a].value.data().iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(
            Tensor::new(shape, out).expect("tanh shape"),
            Op::Tanh { a },
            needs,
            S::ONE,
        )
    }

    /// GELU, tanh approximation (pinned so checkpoints reproduce across
    /// platforms): `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = S::from_f64(GELU_C);
        let aa = S::from_f64(GELU_A);
        let half = S::from_f64(0.5);
        let out: Vec<S> = self
            .nodes[a]
            .value
            .data()
            .iter()
            .map(|&x| half * x * (S::ONE + (c * (x + aa * x * x * x)).tanh()))
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(
            Tensor::new(shape, out).expect("gelu shape"),
            Op::Gelu { a },
            needs,
            S::ONE,
        )
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        self.softmax_impl(a, None)
    }

    /// Softmax with a boolean keep-mask over the last dimension; `mask` has
    /// the same element count as `a`, and each row must keep at least one
    /// position. Masked positions get exactly zero probability.
    pub fn masked_softmax_lastdim(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        self.softmax_impl(a, Some(Arc::new(mask)))
    }

    fn softmax_impl(&mut self, a: NodeId, mask: Option<Arc<Vec<bool>>>) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let shape = t.shape().to_vec();
        let last = *shape.last().ok_or(Error::BadShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "rank >= 1 required",
        })?;
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(Error::BadShape {
                    op: "softmax",
                    shape,
                    reason: "mask length mismatch",
                });
            }
        }
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NanInput);
        }
        let rows = t.len() / last;
        let mut out = vec![S::ZERO; t.len()];
        let src = t.data();
        for r in 0..rows {
            let base = r * last;
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[base + j]);
            let mut mx: Option<S> = None;
            for j in 0..last {
                if keep(j) {
                    mx = Some(match mx {
                        None => src[base + j],
                        Some(m) => m.maximum(src[base + j]),
                    });
                }
            }
            let mx = mx.ok_or(Error::FullyMaskedRow { row: r })?;
            let mut denom = S::ZERO;
            for j in 0..last {
                if keep(j) {
                    let e = (src[base + j] - mx).exp();
                    out[base + j] = e;
                    denom += e;
                }
            }
            for j in 0..last {
                out[base + j] /= denom;
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(shape, out).expect("softmax shape"),
            Op::Softmax { a },
            needs,
            S::ONE,
        ))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let shape = t.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if eps <= 0.0 {
            return Err(Error::InvalidConfig("layer_norm eps must be > 0".into()));
        }
        if self.nodes[gamma].value.len() != d || self.nodes[beta].value.len() != d || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gamma].value.shape().to_vec(),
            });
        }
        let rows = t.len() / d;
        let src = t.data();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        let epss = S::from_f64(eps);
        let dinv = S::from_f64(1.0 / d as f64);
        let mut out = vec![S::ZERO; t.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * dinv;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= dinv;
            let inv_std = S::ONE / (var + epss).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out).expect("layer_norm shape"),
            Op::LayerNorm { x, gamma, beta, eps },
            needs,
            S::ONE,
        ))
    }

    /// Mean negative log-softmax of the target class per row; scalar output.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[logits].value;
        if t.rank() != 2 {
            return Err(Error::BadShape {
                op: "cross_entropy",
                shape: t.shape().to_vec(),
                reason: "rank-2 logits required",
            });
        }
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(Error::BadShape {
                op: "cross_entropy",
                shape: t.shape().to_vec(),
                reason: "one target per row required",
            });
        }
        for &tgt in targets {
            if tgt >= c {
                return Err(Error::TargetOutOfRange {
                    index: tgt,
                    classes: c,
                });
            }
        }
        let src = t.data();
        let mut total = S::ZERO;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(row[0], |m, v| m.maximum(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
            total += lse - row[tgt];
        }
        total *= S::from_f64(1.0 / n as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
            },
            needs,
            S::ONE,
        ))
    }

    /// Row lookup into an embedding table node.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = &self.nodes[table].value;
        if t.rank() != 2 {
            return Err(Error::BadShape {
                op: "embed",
                shape: t.shape().to_vec(),
                reason: "rank-2 table required",
            });
        }
        let (v, d) = (t.rows(), t.cols());
        for &id in ids {
            if id as usize >= v {
                return Err(Error::OutOfVocab { id, vocab: v });
            }
        }
        let src = t.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let base = id as usize * d;
            out.extend_from_slice(&src[base..base + d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out).expect("embed shape"),
            Op::Embed {
                table,
                ids: Arc::new(ids.to_vec()),
            },
            needs,
            S::ONE,
        ))
    }

    /// Mean over rows of a rank-2 tensor -> `[1 x cols]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if t.rank() != 2 || t.rows() == 0 {
            return Err(Error::BadShape {
                op: "mean_rows",
                shape: t.shape().to_vec(),
                reason: "non-empty rank-2 required",
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let rinv = S::from_f64(1.0 / r as f64);
        let src = t.data();
        let mut out = vec![S::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for v in &mut out {
            *v *= rinv;
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![1, c], out).expect("mean_rows shape"),
            Op::MeanRows { a },
            needs,
            S::ONE,
        ))
    }

    /// Sum of all elements -> scalar `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a].value.data().iter().copied().sum::<S>();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::SumAll { a }, needs, S::ONE)
    }

    // ---- backward ----------------------------------------------------

    fn acc(&mut self, id: NodeId, contrib: &[S]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let n = self.nodes[id].value.len();
        debug_assert_eq!(n, contrib.len());
        let g = self.nodes[id].grad.get_or_insert_with(|| vec![S::ZERO; n]);
        for (gv, cv) in g.iter_mut().zip(contrib) {
            *gv += *cv;
        }
    }

    fn take_grad_buf(&mut self, id: NodeId) -> Option<Vec<S>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let n = self.nodes[id].value.len();
        Some(
            self.nodes[id]
                .grad
                .take()
                .unwrap_or_else(|| vec![S::ZERO; n]),
        )
    }

    /// Run reverse-mode accumulation from a scalar loss. Consumes the graph's
    /// gradient state; the tape can still be read afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap<S>> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss].value.shape().to_vec(),
            });
        }
        self.nodes[loss].grad = Some(vec![S::ONE]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            let scale = self.nodes[id].scale;
            match op {
                Op::Leaf => {
                    // restore for param extraction
                    self.nodes[id].grad = Some(g);
                }
                Op::Matmul { a, b } => self.backward_matmul(id, a, b, scale, &g),
                Op::Transpose { a } => {
                    let (n, m) = {
                        let sh = self.nodes[id].value.shape();
                        (sh[0], sh[1])
                    };
                    let gt = linalg::transpose(&g, n, m);
                    self.acc(a, &gt);
                }
                Op::Narrow { a, axis, start } => {
                    let ashape = self.nodes[a].value.shape().to_vec();
                    let oshape = self.nodes[id].value.shape().to_vec();
                    let outer: usize = ashape[..axis].iter().product();
                    let inner: usize = ashape[axis + 1..].iter().product();
                    let len = oshape[axis];
                    if self.nodes[a].needs_grad {
                        let n = self.nodes[a].value.len();
                        let ga = self.nodes[a].grad.get_or_insert_with(|| vec![S::ZERO; n]);
                        for o in 0..outer {
                            let dst = o * ashape[axis] * inner + start * inner;
                            let src = o * len * inner;
                            for t in 0..len * inner {
                                ga[dst + t] += g[src + t];
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let oshape = self.nodes[id].value.shape().to_vec();
                    let outer: usize = oshape[..axis].iter().product();
                    let inner: usize = oshape[axis + 1..].iter().product();
                    let total = oshape[axis];
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let plen = self.nodes[p].value.shape()[axis];
                        if self.nodes[p].needs_grad {
                            let n = self.nodes[p].value.len();
                            let gp = self.nodes[p].grad.get_or_insert_with(|| vec![S::ZERO; n]);
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                let dst = o * plen * inner;
                                for t in 0..plen * inner {
                                    gp[dst + t] += g[src + t];
                                }
                            }
                        }
                        offset += plen;
                    }
                }
                Op::Add { a, b } => {
                    self.acc(a, &g);
                    if self.nodes[b].needs_grad {
                        let blen = self.nodes[b].value.len();
                        let mut gb = vec![S::ZERO; blen];
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % blen] += gv;
                        }
                        self.acc(b, &gb);
                    }
                }
                Op::Mul { a, b } => {
                    let blen = self.nodes[b].value.len();
                    if self.nodes[a].needs_grad {
                        let bd = self.nodes[b].value.data();
                        let ga: Vec<S> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * bd[i % blen])
                            .collect();
                        self.acc(a, &ga);
                    }
                    if self.nodes[b].needs_grad {
                        let ad = self.nodes[a].value.data();
                        let mut gb = vec![S::ZERO; blen];
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % blen] += gv * ad[i];
                        }
                        self.acc(b, &gb);
                    }
                }
                Op::Scale { a } => {
                    let ga: Vec<S> = g.iter().map(|&gv| gv * scale).collect();
                    self.acc(a, &ga);
                }
                Op::ScaleByNode { a, s } => {
                    let sv = self.nodes[s].value.data()[0];
                    if self.nodes[a].needs_grad {
                        let ga: Vec<S> = g.iter().map(|&gv| gv * sv).collect();
                        self.acc(a, &ga);
                    }
                    if self.nodes[s].needs_grad {
                        let ad = self.nodes[a].value.data();
                        let gs = g.iter().zip(ad).map(|(&gv, &av)| gv * av).sum::<S>();
                        self.acc(s, &[gs]);
                    }
                }
                Op::Tanh { a } => {
                    let out = self.nodes[id].value.data();
                    let ga: Vec<S> = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &y)| gv * (S::ONE - y * y))
                        .collect();
                    self.acc(a, &ga);
                }
                Op::Gelu { a } => {
                    let c = S::from_f64(GELU_C);
                    let aa = S::from_f64(GELU_A);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let x = self.nodes[a].value.data();
                    let ga: Vec<S> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            let u = c * (xv + aa * xv * xv * xv);
                            let th = u.tanh();
                            let sech2 = S::ONE - th * th;
                            let du = c * (S::ONE + three * aa * xv * xv);
                            gv * (half * (S::ONE + th) + half * xv * sech2 * du)
                        })
                        .collect();
                    self.acc(a, &ga);
                }
                Op::Softmax { a } => {
                    let y = self.nodes[id].value.data();
                    let last = *self.nodes[id].value.shape().last().unwrap();
                    let rows = y.len() / last;
                    let mut ga = vec![S::ZERO; y.len()];
                    for r in 0..rows {
                        let base = r * last;
                        let mut dot = S::ZERO;
                        for j in 0..last {
                            dot += g[base + j] * y[base + j];
                        }
                        for j in 0..last {
                            ga[base + j] = y[base + j] * (g[base + j] - dot);
                        }
                    }
                    self.acc(a, &ga);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.backward_layer_norm(x, gamma, beta, eps, &g);
                }
                Op::CrossEntropy { logits, targets } => {
                    let t = &self.nodes[logits].value;
                    let (n, c) = (t.rows(), t.cols());
                    let src = t.data();
                    let ninv = S::from_f64(1.0 / n as f64);
                    let mut gl = vec![S::ZERO; n * c];
                    for (r, &tgt) in targets.iter().enumerate() {
                        let row = &src[r * c..(r + 1) * c];
                        let mx = row.iter().copied().fold(row[0], |m, v| m.maximum(v));
                        let denom = row.iter().map(|&v| (v - mx).exp()).sum::<S>();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / denom;
                            let onehot = if j == tgt { S::ONE } else { S::ZERO };
                            gl[r * c + j] = g[0] * (p - onehot) * ninv;
                        }
                    }
                    self.acc(logits, &gl);
                }
                Op::Embed { table, ids } => {
                    if self.nodes[table].needs_grad {
                        let d = self.nodes[id].value.cols();
                        let n = self.nodes[table].value.len();
                        let gt = self.nodes[table]
                            .grad
                            .get_or_insert_with(|| vec![S::ZERO; n]);
                        for (r, &tok) in ids.iter().enumerate() {
                            let dst = tok as usize * d;
                            for j in 0..d {
                                gt[dst + j] += g[r * d + j];
                            }
                        }
                    }
                }
                Op::MeanRows { a } => {
                    let (r, c) = {
                        let t = &self.nodes[a].value;
                        (t.rows(), t.cols())
                    };
                    let rinv = S::from_f64(1.0 / r as f64);
                    let mut ga = vec![S::ZERO; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j] * rinv;
                        }
                    }
                    self.acc(a, &ga);
                }
                Op::SumAll { a } => {
                    let n = self.nodes[a].value.len();
                    let ga = vec![g[0]; n];
                    self.acc(a, &ga);
                }
            }
        }

        let mut grads = HashMap::with_capacity(self.params.len());
        for (name, id) in &self.params {
            let shape = self.nodes[*id].value.shape().to_vec();
            let tensor = match &self.nodes[*id].grad {
                Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
                None => Tensor::zeros(&shape),
            };
            grads.insert(name.clone(), tensor);
        }
        Ok(GradientMap { grads })
    }

    fn backward_matmul(&mut self, out: NodeId, a: NodeId, b: NodeId, scale: S, g: &[S]) {
        let ash = self.nodes[a].value.shape().to_vec();
        let bsh = self.nodes[b].value.shape().to_vec();
        let (batch, m, k) = match ash.len() {
            2 => (1, ash[0], ash[1]),
            _ => (ash[0], ash[1], ash[2]),
        };
        let n = *bsh.last().unwrap();
        let b_batched = bsh.len() == 3;
        let _ = out;
        let gs: Vec<S> = if scale == S::ONE {
            g.to_vec()
        } else {
            g.iter().map(|&v| v * scale).collect()
        };
        if self.nodes[a].needs_grad {
            // dA = dC @ B^T, per batch
            let mut ga = self.take_grad_buf(a).expect("needs_grad");
            {
                let bd = self.nodes[b].value.data();
                for bi in 0..batch {
                    let bsl = if b_batched {
                        &bd[bi * k * n..(bi + 1) * k * n]
                    } else {
                        bd
                    };
                    let bt = linalg::transpose(bsl, k, n);
                    linalg::matmul_acc(
                        &gs[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            self.nodes[a].grad = Some(ga);
        }
        if self.nodes[b].needs_grad {
            // dB = A^T @ dC, accumulated over batches when B is broadcast
            let mut gb = self.take_grad_buf(b).expect("needs_grad");
            {
                let ad = self.nodes[a].value.data();
                for bi in 0..batch {
                    let asl = &ad[bi * m * k..(bi + 1) * m * k];
                    let at = linalg::transpose(asl, m, k);
                    let dst = if b_batched {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    } else {
                        &mut gb[..]
                    };
                    linalg::matmul_acc(&at, &gs[bi * m * n..(bi + 1) * m * n], dst, k, m, n);
                }
            }
            self.nodes[b].grad = Some(gb);
        }
    }

    fn backward_layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, g: &[S]) {
        let (rows, d, src) = {
            let t = &self.nodes[x].value;
            let d = *t.shape().last().unwrap();
            (t.len() / d, d, t.data().to_vec())
        };
        let gd = self.nodes[gamma].value.data().to_vec();
        let epss = S::from_f64(eps);
        let dinv = S::from_f64(1.0 / d as f64);
        let df = S::from_f64(d as f64);

        let mut dx = vec![S::ZERO; rows * d];
        let mut dgamma = vec![S::ZERO; d];
        let mut dbeta = vec![S::ZERO; d];
        let mut xhat = vec![S::ZERO; d];
        let mut dxhat = vec![S::ZERO; d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * dinv;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= dinv;
            let inv_std = S::ONE / (var + epss).sqrt();
            for j in 0..d {
                xhat[j] = (row[j] - mean) * inv_std;
                dxhat[j] = grow[j] * gd[j];
                dgamma[j] += grow[j] * xhat[j];
                dbeta[j] += grow[j];
            }
            let sum_dxhat = dxhat.iter().copied().sum::<S>();
            let mut sum_dxhat_xhat = S::ZERO;
            for j in 0..d {
                sum_dxhat_xhat += dxhat[j] * xhat[j];
            }
            for j in 0..d {
                dx[r * d + j] =
                    inv_std * dinv * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
            }
        }
        self.acc(x, &dx);
        self.acc(gamma, &dgamma);
        self.acc(beta, &dbeta);
    }
}
