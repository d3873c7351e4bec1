//! Wengert tape: operations execute eagerly and, when recording, push a
//! record that knows how to push gradients back to its inputs.
//!
//! A tape is confined to one forward/backward pass and is not shared.
//! Backward replays the records in reverse, accumulating additively over
//! fan-out; replaying twice yields bit-identical gradients because every
//! reduction runs in a fixed order.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, TensorId};

/// Loss-side clipping bound: predictions are clamped to
/// `[CLIP_EPS, 1 - CLIP_EPS]` before the log.
pub const CLIP_EPS: f64 = 1e-7;

/// Spatial padding mode for convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

enum Node<E: Element> {
    Matmul { a: Tensor<E>, b: Tensor<E>, da: bool, db: bool, out: TensorId },
    Transpose { x: TensorId, rows: usize, cols: usize, out: TensorId },
    Add { a: TensorId, b: TensorId, da: bool, db: bool, len: usize, out: TensorId },
    AddRow { a: TensorId, bias: TensorId, da: bool, db: bool, rows: usize, cols: usize, out: TensorId },
    Mul { a: Tensor<E>, b: Tensor<E>, da: bool, db: bool, out: TensorId },
    Scale { x: TensorId, factor: E, len: usize, out: TensorId },
    Relu { x: Tensor<E>, out: TensorId },
    Gelu { x: Tensor<E>, out: TensorId },
    Softmax { x: TensorId, y: Tensor<E>, axis: usize, out: TensorId },
    LayerNorm {
        x: TensorId,
        gamma: Tensor<E>,
        beta: TensorId,
        dx: bool,
        dgamma: bool,
        dbeta: bool,
        xhat: Arc<Vec<E>>,
        inv_std: Arc<Vec<E>>,
        rows: usize,
        cols: usize,
        out: TensorId,
    },
    MaxPool { x: TensorId, x_len: usize, argmax: Arc<Vec<u32>>, out: TensorId },
    Gather { x: TensorId, x_len: usize, idx: Arc<Vec<i32>>, out: TensorId },
    ConcatLast { parts: Vec<(TensorId, bool, usize)>, rows: usize, out: TensorId },
    MeanRows { x: TensorId, rows: usize, cols: usize, out: TensorId },
    Sum { x: TensorId, len: usize, out: TensorId },
    Select { x: TensorId, len: usize, index: usize, out: TensorId },
    Reshape { x: TensorId, len: usize, out: TensorId },
    NllRow { probs: Tensor<E>, target: usize, out: TensorId },
}

/// Gradients accumulated by [`GradTape::backward`], keyed by tensor identity.
pub struct Gradients<E: Element = f32> {
    grads: HashMap<TensorId, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of `t`, shaped like `t`.
    pub fn get(&self, t: &Tensor<E>) -> Option<Tensor<E>> {
        self.grads
            .get(&t.id())
            .map(|buf| Tensor::wrap(t.shape().to_vec(), buf.clone()))
    }

    pub fn raw(&self, id: TensorId) -> Option<&[E]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor<E>) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records executed operations for one forward pass.
pub struct GradTape<E: Element = f32> {
    recording: bool,
    nodes: Vec<Node<E>>,
    tracked: HashSet<TensorId>,
}

impl<E: Element> Default for GradTape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> GradTape<E> {
    /// A recording tape.
    pub fn new() -> Self {
        GradTape { recording: true, nodes: Vec::new(), tracked: HashSet::new() }
    }

    /// A non-recording tape: same forward semantics, no gradient state.
    pub fn no_grad() -> Self {
        GradTape { recording: false, nodes: Vec::new(), tracked: HashSet::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    fn tracks(&self, t: &Tensor<E>) -> bool {
        t.requires_grad() || self.tracked.contains(&t.id())
    }

    fn record(&mut self, out: &Tensor<E>, node: Node<E>) {
        self.tracked.insert(out.id());
        self.nodes.push(node);
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Matrix product of rank-2 tensors `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul requires rank-2 tensors, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![E::zero(); m * n];
        E::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out, false);
        let out = Tensor::wrap(vec![m, n], out);
        let (da, db) = (self.tracks(a), self.tracks(b));
        if self.recording && (da || db) {
            self.record(&out, Node::Matmul { a: a.clone(), b: b.clone(), da, db, out: out.id() });
        }
        Ok(out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 2 {
            return Err(Error::Shape(format!("transpose requires rank 2, got {:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let src = x.data();
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::wrap(vec![c, r], out);
        if self.recording && self.tracks(x) {
            self.record(&out, Node::Transpose { x: x.id(), rows: r, cols: c, out: out.id() });
        }
        Ok(out)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::wrap(a.shape().to_vec(), out);
        let (da, db) = (self.tracks(a), self.tracks(b));
        if self.recording && (da || db) {
            self.record(&out, Node::Add { a: a.id(), b: b.id(), da, db, len: a.len(), out: out.id() });
        }
        Ok(out)
    }

    /// `[r,c] + [c]` with the row vector broadcast over rows.
    pub fn add_row(&mut self, a: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        if a.rank() != 2 || bias.rank() != 1 || a.shape()[1] != bias.shape()[0] {
            return Err(Error::Shape(format!(
                "add_row expects [r,c] + [c], got {:?} + {:?}",
                a.shape(),
                bias.shape()
            )));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let bv = bias.data();
        let mut out = Vec::with_capacity(r * c);
        for row in a.data().chunks_exact(c) {
            out.extend(row.iter().zip(bv).map(|(&x, &y)| x + y));
        }
        let out = Tensor::wrap(vec![r, c], out);
        let (da, db) = (self.tracks(a), self.tracks(bias));
        if self.recording && (da || db) {
            self.record(
                &out,
                Node::AddRow { a: a.id(), bias: bias.id(), da, db, rows: r, cols: c, out: out.id() },
            );
        }
        Ok(out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::wrap(a.shape().to_vec(), out);
        let (da, db) = (self.tracks(a), self.tracks(b));
        if self.recording && (da || db) {
            self.record(&out, Node::Mul { a: a.clone(), b: b.clone(), da, db, out: out.id() });
        }
        Ok(out)
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, x: &Tensor<E>, factor: f64) -> Result<Tensor<E>> {
        let f = E::from_f64(factor);
        let out: Vec<E> = x.data().iter().map(|&v| v * f).collect();
        let out = Tensor::wrap(x.shape().to_vec(), out);
        if self.recording && self.tracks(x) {
            self.record(&out, Node::Scale { x: x.id(), factor: f, len: x.len(), out: out.id() });
        }
        Ok(out)
    }

    /// `max(0, x)` elementwise. The gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let out: Vec<E> = x.data().iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
        let out = Tensor::wrap(x.shape().to_vec(), out);
        if self.recording && self.tracks(x) {
            self.record(&out, Node::Relu { x: x.clone(), out: out.id() });
        }
        Ok(out)
    }

    /// Exact GELU: `0.5 · x · (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<E> = x
            .data()
            .iter()
            .map(|&v| half * v * (E::one() + (v * inv_sqrt2).erf()))
            .collect();
        let out = Tensor::wrap(x.shape().to_vec(), out);
        if self.recording && self.tracks(x) {
            self.record(&out, Node::Gelu { x: x.clone(), out: out.id() });
        }
        Ok(out)
    }

    /// Softmax along `axis`, computed with unconditional max-subtraction.
    pub fn softmax(&mut self, x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        if axis >= x.rank() {
            return Err(Error::Invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let lane = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let outer: usize = x.shape()[..axis].iter().product();
        let src = x.data();
        let mut out = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = E::neg_infinity();
                for j in 0..lane {
                    let v = src[base + j * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = E::zero();
                for j in 0..lane {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    denom = denom + e;
                }
                for j in 0..lane {
                    out[base + j * inner] = out[base + j * inner] / denom;
                }
            }
        }
        let out = Tensor::wrap(x.shape().to_vec(), out);
        if self.recording && self.tracks(x) {
            self.record(
                &out,
                Node::Softmax { x: x.id(), y: out.clone(), axis, out: out.id() },
            );
        }
        Ok(out)
    }

    /// Per-last-axis standardization followed by the affine map
    /// `gamma * xhat + beta`. `eps` sits inside the square root.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let cols = *x.shape().last().expect("non-empty shape");
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} must match last axis {cols}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.len() / cols;
        let epsv = E::from_f64(eps);
        let src = x.data();
        let gv = gamma.data();
        let bv = beta.data();
        let mut out = vec![E::zero(); x.len()];
        let mut xhat = vec![E::zero(); x.len()];
        let mut inv_std = vec![E::zero(); rows];
        let inv_cols = E::one() / E::from_f64(cols as f64);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mut mean = E::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_cols;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_cols;
            let s = E::one() / (var + epsv).sqrt();
            inv_std[r] = s;
            for j in 0..cols {
                let h = (row[j] - mean) * s;
                xhat[r * cols + j] = h;
                out[r * cols + j] = gv[j] * h + bv[j];
            }
        }
        let out = Tensor::wrap(x.shape().to_vec(), out);
        let (dx, dgamma, dbeta) = (self.tracks(x), self.tracks(gamma), self.tracks(beta));
        if self.recording && (dx || dgamma || dbeta) {
            self.record(
                &out,
                Node::LayerNorm {
                    x: x.id(),
                    gamma: gamma.clone(),
                    beta: beta.id(),
                    dx,
                    dgamma,
                    dbeta,
                    xhat: Arc::new(xhat),
                    inv_std: Arc::new(inv_std),
                    rows,
                    cols,
                    out: out.id(),
                },
            );
        }
        Ok(out)
    }

    /// Window maximum over an `[H,W,C]` map. Ties resolve to the first
    /// element in scan order, so backward routing is deterministic.
    pub fn max_pool2d(
        &mut self,
        x: &Tensor<E>,
        size: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor<E>> {
        if x.rank() != 3 {
            return Err(Error::Shape(format!("max_pool2d expects [H,W,C], got {:?}", x.shape())));
        }
        if size == 0 || stride == 0 {
            return Err(Error::Invalid("pool size and stride must be >= 1".into()));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < size || w < size || (h - size) % stride != 0 || (w - size) % stride != 0 {
                    return Err(Error::Shape(format!(
                        "valid pooling of {h}x{w} needs (dim - {size}) divisible by {stride}"
                    )));
                }
                ((h - size) / stride + 1, (w - size) / stride + 1, 0isize, 0isize)
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + size).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + size).saturating_sub(w);
                (out_h, out_w, (pad_h / 2) as isize, (pad_w / 2) as isize)
            }
        };
        let src = x.data();
        let mut out = vec![E::zero(); out_h * out_w * c];
        let mut argmax = vec![0u32; out_h * out_w * c];
        for oi in 0..out_h {
            for oj in 0..out_w {
                let i0 = oi as isize * stride as isize - pad_top;
                let j0 = oj as isize * stride as isize - pad_left;
                for ch in 0..c {
                    let mut best = E::neg_infinity();
                    let mut best_idx = 0u32;
                    for di in 0..size as isize {
                        let ii = i0 + di;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..size as isize {
                            let jj = j0 + dj;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let idx = (ii as usize * w + jj as usize) * c + ch;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = (oi * out_w + oj) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out = Tensor::wrap(vec![out_h, out_w, c], out);
        if self.recording && self.tracks(x) {
            self.record(
                &out,
                Node::MaxPool { x: x.id(), x_len: x.len(), argmax: Arc::new(argmax), out: out.id() },
            );
        }
        Ok(out)
    }

    /// Index-map copy: `out[i] = x[idx[i]]`, with `idx[i] == -1` producing 0
    /// (used for zero padding). Backward scatter-adds in scan order.
    pub fn gather(
        &mut self,
        x: &Tensor<E>,
        idx: Arc<Vec<i32>>,
        out_shape: &[usize],
    ) -> Result<Tensor<E>> {
        let n = checked_shape_len(out_shape)?;
        if n != idx.len() {
            return Err(Error::Shape(format!(
                "gather index count {} does not match output shape {:?}",
                idx.len(),
                out_shape
            )));
        }
        let src = x.data();
        let x_len = src.len() as i32;
        let mut out = vec![E::zero(); n];
        for (o, &i) in out.iter_mut().zip(idx.iter()) {
            if i >= 0 {
                if i >= x_len {
                    return Err(Error::Invalid(format!("gather index {i} out of bounds ({x_len})")));
                }
                *o = src[i as usize];
            }
        }
        let out = Tensor::wrap(out_shape.to_vec(), out);
        if self.recording && self.tracks(x) {
            self.record(
                &out,
                Node::Gather { x: x.id(), x_len: x.len(), idx, out: out.id() },
            );
        }
        Ok(out)
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        let lead = &parts[0].shape()[..rank - 1];
        for p in parts {
            if p.rank() != rank || &p.shape()[..rank - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat_last leading dims differ: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![E::zero(); rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::wrap(shape, out);
        let tracked: Vec<(TensorId, bool, usize)> = parts
            .iter()
            .zip(&widths)
            .map(|(p, &w)| (p.id(), self.tracks(p), w))
            .collect();
        if self.recording && tracked.iter().any(|&(_, t, _)| t) {
            self.record(&out, Node::ConcatLast { parts: tracked, rows, out: out.id() });
        }
        Ok(out)
    }

    /// Column means of a rank-2 tensor: `[n,d] -> [d]`.
    pub fn mean_rows(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 2 {
            return Err(Error::Shape(format!("mean_rows expects rank 2, got {:?}", x.shape())));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let inv = E::one() / E::from_f64(rows as f64);
        let mut out = vec![E::zero(); cols];
        for row in x.data().chunks_exact(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        let out = Tensor::wrap(vec![cols], out);
        if self.recording && self.tracks(x) {
            self.record(&out, Node::MeanRows { x: x.id(), rows, cols, out: out.id() });
        }
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut acc = E::zero();
        for &v in x.data() {
            acc = acc + v;
        }
        let out = Tensor::scalar(acc);
        if self.recording && self.tracks(x) {
            self.record(&out, Node::Sum { x: x.id(), len: x.len(), out: out.id() });
        }
        Ok(out)
    }

    /// Extract one element (by flat index) as a scalar tensor.
    pub fn select(&mut self, x: &Tensor<E>, index: usize) -> Result<Tensor<E>> {
        if index >= x.len() {
            return Err(Error::Invalid(format!(
                "select index {index} out of bounds for {} elements",
                x.len()
            )));
        }
        let out = Tensor::scalar(x.data()[index]);
        if self.recording && self.tracks(x) {
            self.record(&out, Node::Select { x: x.id(), len: x.len(), index, out: out.id() });
        }
        Ok(out)
    }

    /// Same data, new shape; element counts must agree.
    pub fn reshape(&mut self, x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        let n = checked_shape_len(shape)?;
        if n != x.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let out = x.reshaped_view(shape.to_vec());
        if self.recording && self.tracks(x) {
            self.record(&out, Node::Reshape { x: x.id(), len: x.len(), out: out.id() });
        }
        Ok(out)
    }

    /// Negative log-likelihood of one probability row: `-ln(clip(p[target]))`
    /// with predictions clipped to `[1e-7, 1 - 1e-7]`.
    pub fn nll_row(&mut self, probs: &Tensor<E>, target: usize) -> Result<Tensor<E>> {
        if probs.rank() != 1 {
            return Err(Error::Shape(format!("nll_row expects a rank-1 row, got {:?}", probs.shape())));
        }
        if target >= probs.len() {
            return Err(Error::Invalid(format!(
                "target class {target} out of range for {} classes",
                probs.len()
            )));
        }
        let lo = E::from_f64(CLIP_EPS);
        let hi = E::from_f64(1.0 - CLIP_EPS);
        let p = probs.data()[target];
        let clipped = if p < lo {
            lo
        } else if p > hi {
            hi
        } else {
            p
        };
        let out = Tensor::scalar(-clipped.ln());
        if self.recording && self.tracks(probs) {
            self.record(&out, Node::NllRow { probs: probs.clone(), target, out: out.id() });
        }
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulate gradients of every tracked tensor with respect to the
    /// scalar `root`. The tape is left intact; replaying is bit-identical.
    pub fn backward(&self, root: &Tensor<E>) -> Result<Gradients<E>> {
        if root.len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        if !self.tracked.contains(&root.id()) && !root.requires_grad() {
            return Err(Error::Tape("backward root was not produced under this tape".into()));
        }
        let mut grads: HashMap<TensorId, Vec<E>> = HashMap::new();
        grads.insert(root.id(), vec![E::one()]);

        for node in self.nodes.iter().rev() {
            let out_id = node_out(node);
            let Some(upstream) = grads.remove(&out_id) else {
                continue; // not on the path to the root
            };
            self.push_back(node, &upstream, &mut grads);
            grads.insert(out_id, upstream);
        }
        Ok(Gradients { grads })
    }

    fn push_back(&self, node: &Node<E>, up: &[E], grads: &mut HashMap<TensorId, Vec<E>>) {
        match node {
            Node::Matmul { a, b, da, db, .. } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if *da {
                    // dA = dC · B^T
                    let buf = entry(grads, a.id(), m * k);
                    E::gemm(m, n, k, up, n as isize, 1, b.data(), 1, n as isize, buf, true);
                }
                if *db {
                    // dB = A^T · dC
                    let buf = entry(grads, b.id(), k * n);
                    E::gemm(k, m, n, a.data(), 1, k as isize, up, n as isize, 1, buf, true);
                }
            }
            Node::Transpose { x, rows, cols, .. } => {
                let buf = entry(grads, *x, rows * cols);
                for i in 0..*rows {
                    for j in 0..*cols {
                        buf[i * cols + j] = buf[i * cols + j] + up[j * rows + i];
                    }
                }
            }
            Node::Add { a, b, da, db, len, .. } => {
                if *da {
                    add_into(entry(grads, *a, *len), up);
                }
                if *db {
                    add_into(entry(grads, *b, *len), up);
                }
            }
            Node::AddRow { a, bias, da, db, rows, cols, .. } => {
                if *da {
                    add_into(entry(grads, *a, rows * cols), up);
                }
                if *db {
                    let buf = entry(grads, *bias, *cols);
                    for row in up.chunks_exact(*cols) {
                        for (g, &u) in buf.iter_mut().zip(row) {
                            *g = *g + u;
                        }
                    }
                }
            }
            Node::Mul { a, b, da, db, .. } => {
                if *da {
                    let buf = entry(grads, a.id(), a.len());
                    for ((g, &u), &bv) in buf.iter_mut().zip(up).zip(b.data()) {
                        *g = *g + u * bv;
                    }
                }
                if *db {
                    let buf = entry(grads, b.id(), b.len());
                    for ((g, &u), &av) in buf.iter_mut().zip(up).zip(a.data()) {
                        *g = *g + u * av;
                    }
                }
            }
            Node::Scale { x, factor, len, .. } => {
                let buf = entry(grads, *x, *len);
                for (g, &u) in buf.iter_mut().zip(up) {
                    *g = *g + u * *factor;
                }
            }
            Node::Relu { x, .. } => {
                let buf = entry(grads, x.id(), x.len());
                for ((g, &u), &v) in buf.iter_mut().zip(up).zip(x.data()) {
                    if v > E::zero() {
                        *g = *g + u;
                    }
                }
            }
            Node::Gelu { x, .. } => {
                let half = E::from_f64(0.5);
                let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let buf = entry(grads, x.id(), x.len());
                for ((g, &u), &v) in buf.iter_mut().zip(up).zip(x.data()) {
                    let cdf = half * (E::one() + (v * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                    *g = *g + u * (cdf + v * pdf);
                }
            }
            Node::Softmax { x, y, axis, .. } => {
                let lane = y.shape()[*axis];
                let inner: usize = y.shape()[*axis + 1..].iter().product();
                let outer: usize = y.shape()[..*axis].iter().product();
                let yv = y.data();
                let buf = entry(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = E::zero();
                        for j in 0..lane {
                            let idx = base + j * inner;
                            dot = dot + up[idx] * yv[idx];
                        }
                        for j in 0..lane {
                            let idx = base + j * inner;
                            buf[idx] = buf[idx] + yv[idx] * (up[idx] - dot);
                        }
                    }
                }
            }
            Node::LayerNorm { x, gamma, beta, dx, dgamma, dbeta, xhat, inv_std, rows, cols, .. } => {
                let gv = gamma.data();
                let inv_cols = E::one() / E::from_f64(*cols as f64);
                if *dgamma {
                    let buf = entry(grads, gamma.id(), *cols);
                    for r in 0..*rows {
                        for j in 0..*cols {
                            buf[j] = buf[j] + up[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if *dbeta {
                    let buf = entry(grads, *beta, *cols);
                    for r in 0..*rows {
                        for j in 0..*cols {
                            buf[j] = buf[j] + up[r * cols + j];
                        }
                    }
                }
                if *dx {
                    let buf = entry(grads, *x, rows * cols);
                    for r in 0..*rows {
                        let mut mean_dh = E::zero();
                        let mut mean_dh_h = E::zero();
                        for j in 0..*cols {
                            let dh = up[r * cols + j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * cols + j];
                        }
                        mean_dh = mean_dh * inv_cols;
                        mean_dh_h = mean_dh_h * inv_cols;
                        let s = inv_std[r];
                        for j in 0..*cols {
                            let dh = up[r * cols + j] * gv[j];
                            buf[r * cols + j] =
                                buf[r * cols + j] + s * (dh - mean_dh - xhat[r * cols + j] * mean_dh_h);
                        }
                    }
                }
            }
            Node::MaxPool { x, x_len, argmax, .. } => {
                let buf = entry(grads, *x, *x_len);
                for (&src, &u) in argmax.iter().zip(up) {
                    buf[src as usize] = buf[src as usize] + u;
                }
            }
            Node::Gather { x, x_len, idx, .. } => {
                let buf = entry(grads, *x, *x_len);
                for (&i, &u) in idx.iter().zip(up) {
                    if i >= 0 {
                        buf[i as usize] = buf[i as usize] + u;
                    }
                }
            }
            Node::ConcatLast { parts, rows, .. } => {
                let total: usize = parts.iter().map(|&(_, _, w)| w).sum();
                let mut off = 0;
                for &(id, tracked, w) in parts {
                    if tracked {
                        let buf = entry(grads, id, rows * w);
                        for r in 0..*rows {
                            for j in 0..w {
                                buf[r * w + j] = buf[r * w + j] + up[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Node::MeanRows { x, rows, cols, .. } => {
                let inv = E::one() / E::from_f64(*rows as f64);
                let buf = entry(grads, *x, rows * cols);
                for r in 0..*rows {
                    for j in 0..*cols {
                        buf[r * cols + j] = buf[r * cols + j] + up[j] * inv;
                    }
                }
            }
            Node::Sum { x, len, .. } => {
                let buf = entry(grads, *x, *len);
                for g in buf.iter_mut() {
                    *g = *g + up[0];
                }
            }
            Node::Select { x, len, index, .. } => {
                let buf = entry(grads, *x, *len);
                buf[*index] = buf[*index] + up[0];
            }
            Node::Reshape { x, len, .. } => {
                add_into(entry(grads, *x, *len), up);
            }
            Node::NllRow { probs, target, .. } => {
                let lo = E::from_f64(CLIP_EPS);
                let hi = E::from_f64(1.0 - CLIP_EPS);
                let p = probs.data()[*target];
                let buf = entry(grads, probs.id(), probs.len());
                // Outside the clip range the loss is constant in p.
                if p >= lo && p <= hi {
                    buf[*target] = buf[*target] - up[0] / p;
                }
            }
        }
    }
}

fn node_out<E: Element>(node: &Node<E>) -> TensorId {
    match node {
        Node::Matmul { out, .. }
        | Node::Transpose { out, .. }
        | Node::Add { out, .. }
        | Node::AddRow { out, .. }
        | Node::Mul { out, .. }
        | Node::Scale { out, .. }
        | Node::Relu { out, .. }
        | Node::Gelu { out, .. }
        | Node::Softmax { out, .. }
        | Node::LayerNorm { out, .. }
        | Node::MaxPool { out, .. }
        | Node::Gather { out, .. }
        | Node::ConcatLast { out, .. }
        | Node::MeanRows { out, .. }
        | Node::Sum { out, .. }
        | Node::Select { out, .. }
        | Node::Reshape { out, .. }
        | Node::NllRow { out, .. } => *out,
    }
}

fn entry<E: Element>(grads: &mut HashMap<TensorId, Vec<E>>, id: TensorId, len: usize) -> &mut Vec<E> {
    grads.entry(id).or_insert_with(|| vec![E::zero(); len])
}

fn add_into<E: Element>(buf: &mut [E], up: &[E]) {
    for (g, &u) in buf.iter_mut().zip(up) {
        *g = *g + u;
    }
}

fn checked_shape_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Invalid("shape must have at least one dimension".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Invalid("dimensions must be >= 1".into()));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Invalid(format!("shape {shape:?} overflows element count")))?;
    }
    Ok(n)
}
