//! Layer vocabulary of the classifier: VGG-style convolutions, pooling,
//! the four-branch inception block, patch extraction/encoding, multi-head
//! self-attention, the transformer block, and pooling heads.
//!
//! Layers are pure functions of `(input, params)` executed on a [`GradTape`];
//! parameters are read-only during forward/backward.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{Element, GradTape, Padding, Tensor};

/// Default epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

// Gather index maps are pure functions of the convolution geometry and get
// rebuilt every call otherwise; memoize them across passes.
type ConvKey = (usize, usize, usize, usize, usize, usize, bool);

fn conv_index_cache() -> &'static Mutex<HashMap<ConvKey, Arc<Vec<i32>>>> {
    static CACHE: OnceLock<Mutex<HashMap<ConvKey, Arc<Vec<i32>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

// ── Convolution ───────────────────────────────────────────────────────────

/// Parameters of one 2-D convolution: kernel `[kh, kw, in_ch, out_ch]`,
/// bias `[out_ch]`.
#[derive(Debug, Clone)]
pub struct Conv2DParams<E: Element = f32> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: Padding,
}

impl<E: Element> Conv2DParams<E> {
    pub fn new(kernel: Tensor<E>, bias: Tensor<E>, stride: usize, padding: Padding) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv kernel must be [kh,kw,in,out], got {:?}",
                kernel.shape()
            )));
        }
        if bias.shape() != [kernel.shape()[3]] {
            return Err(Error::Shape(format!(
                "conv bias {:?} must match out channels {}",
                bias.shape(),
                kernel.shape()[3]
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv stride must be >= 1".into()));
        }
        Ok(Conv2DParams { kernel, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    /// `kh * kw * in_ch * out_ch + out_ch`.
    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Output spatial dims and top/left padding for a convolution or pool.
fn conv_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, isize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(Error::Shape(format!(
                    "kernel {kernel} larger than input {input} without padding"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, (pad_total / 2) as isize))
        }
    }
}

/// Cross-correlation of `x: [H,W,C_in]` with the kernel, plus bias.
/// `Same` padding preserves spatial dims at stride 1.
///
/// Implemented as an index-gather into a `[H_out*W_out, kh*kw*C_in]` matrix
/// followed by a matrix product with the `[kh*kw*C_in, C_out]` kernel view,
/// so both gradients fall out of the tape primitives.
pub fn conv2d<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    params: &Conv2DParams<E>,
) -> Result<Tensor<E>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("conv2d expects [H,W,C], got {:?}", x.shape())));
    }
    let (h, w, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (params.kernel.shape()[0], params.kernel.shape()[1]);
    if params.in_channels() != c_in {
        return Err(Error::Shape(format!(
            "conv2d input has {c_in} channels, kernel expects {}",
            params.in_channels()
        )));
    }
    let c_out = params.out_channels();
    let (out_h, pad_top) = conv_geometry(h, kh, params.stride, params.padding)?;
    let (out_w, pad_left) = conv_geometry(w, kw, params.stride, params.padding)?;

    let cols = kh * kw * c_in;
    let key: ConvKey = (h, w, c_in, kh, kw, params.stride, params.padding == Padding::Same);
    let cached = conv_index_cache().lock().unwrap().get(&key).cloned();
    let idx = match cached {
        Some(idx) => idx,
        None => {
            let mut idx = Vec::with_capacity(out_h * out_w * cols);
            for oi in 0..out_h {
                for oj in 0..out_w {
                    let i0 = oi as isize * params.stride as isize - pad_top;
                    let j0 = oj as isize * params.stride as isize - pad_left;
                    for di in 0..kh as isize {
                        let ii = i0 + di;
                        let row_ok = ii >= 0 && ii < h as isize;
                        for dj in 0..kw as isize {
                            let jj = j0 + dj;
                            if row_ok && jj >= 0 && jj < w as isize {
                                let base = ((ii as usize * w + jj as usize) * c_in) as i32;
                                for ci in 0..c_in as i32 {
                                    idx.push(base + ci);
                                }
                            } else {
                                for _ in 0..c_in {
                                    idx.push(-1);
                                }
                            }
                        }
                    }
                }
            }
            let idx = Arc::new(idx);
            let mut cache = conv_index_cache().lock().unwrap();
            if cache.len() >= 64 {
                cache.clear();
            }
            cache.insert(key, Arc::clone(&idx));
            idx
        }
    };
    let patches = tape.gather(x, idx, &[out_h * out_w, cols])?;
    let kmat = tape.reshape(&params.kernel, &[cols, c_out])?;
    let y = tape.matmul(&patches, &kmat)?;
    let y = tape.add_row(&y, &params.bias)?;
    tape.reshape(&y, &[out_h, out_w, c_out])
}

/// Window maximum over non-overlapping `size x size` windows (the VGG path
/// uses 2/2, which requires even spatial dims).
pub fn maxpool2d<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    size: usize,
    stride: usize,
) -> Result<Tensor<E>> {
    tape.max_pool2d(x, size, stride, Padding::Valid)
}

// ── Dense ─────────────────────────────────────────────────────────────────

/// Affine map on the last axis: `[..., m] · [m,n] + [n]`.
pub fn dense<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    if weight.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != weight.shape()[1] {
        return Err(Error::Shape(format!(
            "dense expects weight [m,n] and bias [n], got {:?} / {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let m = weight.shape()[0];
    let last = *x.shape().last().expect("non-empty shape");
    if last != m {
        return Err(Error::Shape(format!(
            "dense input {:?} does not match weight rows {m}",
            x.shape()
        )));
    }
    let rows = x.len() / m;
    let flat = tape.reshape(x, &[rows, m])?;
    let y = tape.matmul(&flat, weight)?;
    let y = tape.add_row(&y, bias)?;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = weight.shape()[1];
    tape.reshape(&y, &out_shape)
}

pub fn dense_param_count(m: usize, n: usize) -> usize {
    m * n + n
}

// ── Inception block ───────────────────────────────────────────────────────

/// Branch widths of the four-branch factorized inception block:
/// 1x1 | 1x1 -> {1x3, 3x1} | 1x1 -> 3x3 -> {1x3, 3x1} | pool -> 1x1.
/// The paired branches contribute twice their width to the concat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InceptionConfig {
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3_reduce: usize,
    pub b3_mid: usize,
    pub b3: usize,
    pub b4: usize,
}

/// Channel count the block must produce.
pub const INCEPTION_OUT_CHANNELS: usize = 512;

impl Default for InceptionConfig {
    fn default() -> Self {
        // 64 + 2*64 + 2*96 + 128 = 512
        InceptionConfig { b1: 64, b2_reduce: 64, b2: 64, b3_reduce: 64, b3_mid: 96, b3: 96, b4: 128 }
    }
}

impl InceptionConfig {
    pub fn out_channels(&self) -> usize {
        self.b1 + 2 * self.b2 + 2 * self.b3 + self.b4
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("b1", self.b1),
            ("b2_reduce", self.b2_reduce),
            ("b2", self.b2),
            ("b3_reduce", self.b3_reduce),
            ("b3_mid", self.b3_mid),
            ("b3", self.b3),
            ("b4", self.b4),
        ] {
            if w == 0 {
                return Err(Error::Config(format!("inception width {name} must be >= 1")));
            }
        }
        if self.out_channels() != INCEPTION_OUT_CHANNELS {
            return Err(Error::Config(format!(
                "inception branch widths sum to {} output channels, need {}",
                self.out_channels(),
                INCEPTION_OUT_CHANNELS
            )));
        }
        Ok(())
    }

    /// Parameter count for a given input channel count.
    pub fn param_count(&self, in_ch: usize) -> usize {
        let conv = |kh: usize, kw: usize, cin: usize, cout: usize| kh * kw * cin * cout + cout;
        conv(1, 1, in_ch, self.b1)
            + conv(1, 1, in_ch, self.b2_reduce)
            + conv(1, 3, self.b2_reduce, self.b2)
            + conv(3, 1, self.b2_reduce, self.b2)
            + conv(1, 1, in_ch, self.b3_reduce)
            + conv(3, 3, self.b3_reduce, self.b3_mid)
            + conv(1, 3, self.b3_mid, self.b3)
            + conv(3, 1, self.b3_mid, self.b3)
            + conv(1, 1, in_ch, self.b4)
    }
}

/// Parameter tensors of the inception block, one [`Conv2DParams`] per
/// convolution. All convolutions are stride-1 `Same` with ReLU after.
#[derive(Debug, Clone)]
pub struct InceptionParams<E: Element = f32> {
    pub config: InceptionConfig,
    pub b1: Conv2DParams<E>,
    pub b2_reduce: Conv2DParams<E>,
    pub b2_h: Conv2DParams<E>,
    pub b2_v: Conv2DParams<E>,
    pub b3_reduce: Conv2DParams<E>,
    pub b3_mid: Conv2DParams<E>,
    pub b3_h: Conv2DParams<E>,
    pub b3_v: Conv2DParams<E>,
    pub b4_proj: Conv2DParams<E>,
}

fn conv_relu<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    p: &Conv2DParams<E>,
) -> Result<Tensor<E>> {
    let y = conv2d(tape, x, p)?;
    tape.relu(&y)
}

/// Branch 1: a single 1x1 convolution.
pub fn inception_branch1<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    conv1x1: &Conv2DParams<E>,
) -> Result<Tensor<E>> {
    conv_relu(tape, x, conv1x1)
}

/// Branch 2: 1x1 reduce, then parallel 1x3 and 3x1 convolutions,
/// channel-concatenated.
pub fn inception_branch2<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    reduce: &Conv2DParams<E>,
    horiz: &Conv2DParams<E>,
    vert: &Conv2DParams<E>,
) -> Result<Tensor<E>> {
    let r = conv_relu(tape, x, reduce)?;
    let h = conv_relu(tape, &r, horiz)?;
    let v = conv_relu(tape, &r, vert)?;
    tape.concat_last(&[&h, &v])
}

/// Branch 3: 1x1 reduce, 3x3, then parallel 1x3 and 3x1, concatenated.
pub fn inception_branch3<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    reduce: &Conv2DParams<E>,
    mid: &Conv2DParams<E>,
    horiz: &Conv2DParams<E>,
    vert: &Conv2DParams<E>,
) -> Result<Tensor<E>> {
    let r = conv_relu(tape, x, reduce)?;
    let m = conv_relu(tape, &r, mid)?;
    let h = conv_relu(tape, &m, horiz)?;
    let v = conv_relu(tape, &m, vert)?;
    tape.concat_last(&[&h, &v])
}

/// Branch 4: 3x3 same-padded max pool, then a 1x1 projection.
pub fn inception_branch4<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    proj: &Conv2DParams<E>,
) -> Result<Tensor<E>> {
    let p = tape.max_pool2d(x, 3, 1, Padding::Same)?;
    conv_relu(tape, &p, proj)
}

/// Multi-level feature extraction: four branches at stride 1 with `Same`
/// padding, ReLU after every convolution, channel-concatenated to exactly
/// 512 output channels.
pub fn inception_forward<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    params: &InceptionParams<E>,
) -> Result<Tensor<E>> {
    params.config.validate()?;
    if x.rank() != 3 || x.shape()[2] != params.b1.in_channels() {
        return Err(Error::Shape(format!(
            "inception input {:?} does not match configured {} channels",
            x.shape(),
            params.b1.in_channels()
        )));
    }
    let b1 = inception_branch1(tape, x, &params.b1)?;
    let b2 = inception_branch2(tape, x, &params.b2_reduce, &params.b2_h, &params.b2_v)?;
    let b3 = inception_branch3(tape, x, &params.b3_reduce, &params.b3_mid, &params.b3_h, &params.b3_v)?;
    let b4 = inception_branch4(tape, x, &params.b4_proj)?;
    let out = tape.concat_last(&[&b1, &b2, &b3, &b4])?;
    debug_assert_eq!(*out.shape().last().unwrap(), INCEPTION_OUT_CHANNELS);
    Ok(out)
}

// ── Patch pipeline ────────────────────────────────────────────────────────

/// Split an `[F,F,C]` map into non-overlapping, top-left-aligned `p x p`
/// patches; the right/bottom remainder is discarded. Each output row is a
/// row-major flattened patch, giving `[n^2, p^2*C]` with `n = floor(F/p)`.
pub fn extract_patches<E: Element>(
    tape: &mut GradTape<E>,
    fmap: &Tensor<E>,
    p: usize,
) -> Result<Tensor<E>> {
    if fmap.rank() != 3 {
        return Err(Error::Shape(format!("extract_patches expects [F,F,C], got {:?}", fmap.shape())));
    }
    let (f_h, f_w, c) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
    if p == 0 {
        return Err(Error::Invalid("patch size must be >= 1".into()));
    }
    if p > f_h || p > f_w {
        return Err(Error::Invalid(format!(
            "patch size {p} exceeds feature map {f_h}x{f_w}"
        )));
    }
    let n_h = f_h / p;
    let n_w = f_w / p;
    let row_len = p * p * c;
    let mut idx = Vec::with_capacity(n_h * n_w * row_len);
    for pi in 0..n_h {
        for pj in 0..n_w {
            for di in 0..p {
                for dj in 0..p {
                    let base = (((pi * p + di) * f_w) + (pj * p + dj)) * c;
                    for ci in 0..c {
                        idx.push((base + ci) as i32);
                    }
                }
            }
        }
    }
    tape.gather(fmap, Arc::new(idx), &[n_h * n_w, row_len])
}

/// Linear projection plus learned positional embedding.
#[derive(Debug, Clone)]
pub struct PatchEncoderParams<E: Element = f32> {
    /// `[p^2 * C, d]`
    pub projection: Tensor<E>,
    /// `[d]`
    pub bias: Tensor<E>,
    /// `[n_patches, d]`
    pub positions: Tensor<E>,
}

impl<E: Element> PatchEncoderParams<E> {
    pub fn param_count(&self) -> usize {
        self.projection.len() + self.bias.len() + self.positions.len()
    }
}

pub fn patch_encoder_param_count(patch_len: usize, n_patches: usize, dim: usize) -> usize {
    patch_len * dim + dim + n_patches * dim
}

/// Row-wise affine projection of flattened patches, then per-position
/// addition of the positional embedding.
pub fn patch_encode<E: Element>(
    tape: &mut GradTape<E>,
    patches: &Tensor<E>,
    params: &PatchEncoderParams<E>,
) -> Result<Tensor<E>> {
    if patches.rank() != 2 {
        return Err(Error::Shape(format!("patch_encode expects [n,p^2*C], got {:?}", patches.shape())));
    }
    if params.positions.rank() != 2 || params.positions.shape()[0] != patches.shape()[0] {
        return Err(Error::Shape(format!(
            "positional embedding {:?} does not cover {} patches",
            params.positions.shape(),
            patches.shape()[0]
        )));
    }
    let projected = dense(tape, patches, &params.projection, &params.bias)?;
    tape.add(&projected, &params.positions)
}

// ── Attention ─────────────────────────────────────────────────────────────

/// Q/K/V projections of one attention head.
#[derive(Debug, Clone)]
pub struct AttentionHeadParams<E: Element = f32> {
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
}

/// Per-head projections plus the output projection `[h*key_dim, d]`.
#[derive(Debug, Clone)]
pub struct AttentionParams<E: Element = f32> {
    pub heads: Vec<AttentionHeadParams<E>>,
    pub out_w: Tensor<E>,
    pub out_b: Tensor<E>,
}

impl<E: Element> AttentionParams<E> {
    pub fn param_count(&self) -> usize {
        let head: usize = self
            .heads
            .iter()
            .map(|h| h.wq.len() + h.bq.len() + h.wk.len() + h.bk.len() + h.wv.len() + h.bv.len())
            .sum();
        head + self.out_w.len() + self.out_b.len()
    }
}

/// `3h(d*key_dim + key_dim) + (h*key_dim*d + d)`.
pub fn attention_param_count(d: usize, heads: usize, key_dim: usize) -> usize {
    3 * heads * (d * key_dim + key_dim) + (heads * key_dim * d + d)
}

/// `softmax(Q K^T / sqrt(dk)) V`; every attention weight row sums to 1.
pub fn scaled_dot_attention<E: Element>(
    tape: &mut GradTape<E>,
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::Shape("attention expects rank-2 Q, K, V".into()));
    }
    let dk = q.shape()[1];
    if k.shape()[1] != dk {
        return Err(Error::Shape(format!(
            "Q width {dk} differs from K width {}",
            k.shape()[1]
        )));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::Shape(format!(
            "K rows {} differ from V rows {}",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&scores, 1.0 / (dk as f64).sqrt())?;
    let weights = tape.softmax(&scaled, 1)?;
    tape.matmul(&weights, v)
}

/// Per-head scaled dot-product attention over projections of the same `x`,
/// head outputs concatenated and linearly projected back to width `d`.
pub fn multi_head_attention<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    params: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    if params.heads.is_empty() {
        return Err(Error::Invalid("attention needs at least one head".into()));
    }
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = dense(tape, x, &head.wq, &head.bq)?;
        let k = dense(tape, x, &head.wk, &head.bk)?;
        let v = dense(tape, x, &head.wv, &head.bv)?;
        head_outputs.push(scaled_dot_attention(tape, &q, &k, &v)?);
    }
    let refs: Vec<&Tensor<E>> = head_outputs.iter().collect();
    let concat = tape.concat_last(&refs)?;
    dense(tape, &concat, &params.out_w, &params.out_b)
}

// ── Transformer block ─────────────────────────────────────────────────────

/// Pre-norm transformer block: `y = MHA(LN1(x)) + x`,
/// `out = MLP(LN2(y)) + y` with a GELU between the two MLP layers.
#[derive(Debug, Clone)]
pub struct TransformerBlockParams<E: Element = f32> {
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub attention: AttentionParams<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
    pub fc1_w: Tensor<E>,
    pub fc1_b: Tensor<E>,
    pub fc2_w: Tensor<E>,
    pub fc2_b: Tensor<E>,
}

impl<E: Element> TransformerBlockParams<E> {
    pub fn param_count(&self) -> usize {
        self.ln1_gamma.len()
            + self.ln1_beta.len()
            + self.attention.param_count()
            + self.ln2_gamma.len()
            + self.ln2_beta.len()
            + self.fc1_w.len()
            + self.fc1_b.len()
            + self.fc2_w.len()
            + self.fc2_b.len()
    }
}

/// Closed-form block parameter count for width `d`, `heads` heads of
/// `key_dim`, and MLP hidden width `hidden`.
pub fn transformer_block_param_count(d: usize, heads: usize, key_dim: usize, hidden: usize) -> usize {
    attention_param_count(d, heads, key_dim)
        + 2 * d // ln1
        + 2 * d // ln2
        + dense_param_count(d, hidden)
        + dense_param_count(hidden, d)
}

pub fn transformer_block<E: Element>(
    tape: &mut GradTape<E>,
    x: &Tensor<E>,
    params: &TransformerBlockParams<E>,
) -> Result<Tensor<E>> {
    let normed = tape.layer_norm(x, &params.ln1_gamma, &params.ln1_beta, LAYER_NORM_EPS)?;
    let attended = multi_head_attention(tape, &normed, &params.attention)?;
    let y = tape.add(&attended, x)?;

    let normed2 = tape.layer_norm(&y, &params.ln2_gamma, &params.ln2_beta, LAYER_NORM_EPS)?;
    let hidden = dense(tape, &normed2, &params.fc1_w, &params.fc1_b)?;
    let activated = tape.gelu(&hidden)?;
    let mlp = dense(tape, &activated, &params.fc2_w, &params.fc2_b)?;
    tape.add(&mlp, &y)
}

/// Column means of the token sequence: `[n,d] -> [d]`.
pub fn global_avg_pool_1d<E: Element>(tape: &mut GradTape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    tape.mean_rows(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Init};

    fn conv<E: Element>(shape: [usize; 4], seed: u64) -> Conv2DParams<E> {
        let kernel = Tensor::new(
            &shape,
            Init::Uniform { lo: -0.5, hi: 0.5, seed },
        )
        .unwrap();
        let bias = Tensor::new(&[shape[3]], Init::Uniform { lo: -0.1, hi: 0.1, seed: seed + 1 }).unwrap();
        Conv2DParams::new(kernel, bias, 1, Padding::Same).unwrap()
    }

    #[test]
    fn conv2d_single_pixel() {
        // 1x1x1 input [2], 1x1 kernel [3], bias [1] -> 2*3+1 = 7
        let mut tape = GradTape::no_grad();
        let x = Tensor::from_vec(&[1, 1, 1], vec![2.0f32]).unwrap();
        let p = Conv2DParams::new(
            Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap(),
            Tensor::from_vec(&[1], vec![1.0]).unwrap(),
            1,
            Padding::Valid,
        )
        .unwrap();
        let y = conv2d(&mut tape, &x, &p).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv2d_vgg_first_layer_param_count() {
        let p = conv::<f32>([3, 3, 3, 64], 1);
        assert_eq!(p.param_count(), 1792);
    }

    #[test]
    fn conv2d_zero_kernel_gives_bias() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::<f32>::new(&[4, 4, 2], Init::Uniform { lo: -1.0, hi: 1.0, seed: 9 }).unwrap();
        let p = Conv2DParams::new(
            Tensor::zeros(&[3, 3, 2, 3]).unwrap(),
            Tensor::filled(&[3], 2.5f32).unwrap(),
            1,
            Padding::Same,
        )
        .unwrap();
        let y = conv2d(&mut tape, &x, &p).unwrap();
        assert_eq!(y.shape(), &[4, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv2d_same_preserves_dims() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::<f32>::zeros(&[7, 5, 2]).unwrap();
        let p = conv::<f32>([3, 3, 2, 4], 12);
        let y = conv2d(&mut tape, &x, &p).unwrap();
        assert_eq!(y.shape(), &[7, 5, 4]);
    }

    #[test]
    fn conv2d_kernel_larger_than_input_errors() {
        let mut tape = GradTape::<f32>::no_grad();
        let x = Tensor::<f32>::zeros(&[2, 2, 1]).unwrap();
        let p = Conv2DParams::new(
            Tensor::zeros(&[3, 3, 1, 1]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
            1,
            Padding::Valid,
        )
        .unwrap();
        assert!(conv2d(&mut tape, &x, &p).is_err());
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // independent oracle: direct nested-loop cross-correlation
        let mut tape = GradTape::no_grad();
        let x = Tensor::<f64>::new(&[5, 5, 2], Init::Uniform { lo: -1.0, hi: 1.0, seed: 21 }).unwrap();
        let p = Conv2DParams::<f64>::new(
            Tensor::new(&[3, 3, 2, 3], Init::Uniform { lo: -1.0, hi: 1.0, seed: 22 }).unwrap(),
            Tensor::new(&[3], Init::Uniform { lo: -1.0, hi: 1.0, seed: 23 }).unwrap(),
            1,
            Padding::Same,
        )
        .unwrap();
        let y = conv2d(&mut tape, &x, &p).unwrap();
        let (h, w, cin, cout) = (5usize, 5usize, 2usize, 3usize);
        for oi in 0..h {
            for oj in 0..w {
                for co in 0..cout {
                    let mut acc = p.bias.data()[co];
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let ii = oi as isize + di as isize - 1;
                            let jj = oj as isize + dj as isize - 1;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[(ii as usize * w + jj as usize) * cin + ci]
                                    * p.kernel.data()[((di * 3 + dj) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let got = y.data()[(oi * w + oj) * cout + co];
                    assert!((got - acc).abs() < 1e-12, "({oi},{oj},{co}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn maxpool2d_halves_dims() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::<f32>::new(&[8, 8, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed: 3 }).unwrap();
        let y = maxpool2d(&mut tape, &x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[4, 4, 3]);
    }

    #[test]
    fn dense_param_counts_match_output_head() {
        assert_eq!(dense_param_count(16, 4), 68);
        assert_eq!(dense_param_count(16, 38), 646);
    }

    #[test]
    fn dense_identity() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[3]).unwrap();
        let y = dense(&mut tape, &x, &eye, &zero).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dense_rank1_input() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = dense(&mut tape, &x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1]);
        assert_eq!(y.data(), &[11.5]);
    }

    #[test]
    fn inception_default_config_arithmetic() {
        let cfg = InceptionConfig::default();
        assert_eq!(cfg.out_channels(), 512);
        cfg.validate().unwrap();
        // derived by summing kh*kw*cin*cout + cout over all nine convolutions
        assert_eq!(cfg.param_count(128), 176_864);
    }

    #[test]
    fn inception_rejects_bad_widths() {
        let cfg = InceptionConfig { b4: 100, ..InceptionConfig::default() };
        assert!(cfg.validate().is_err());
    }

    fn tiny_inception_params() -> InceptionParams<f32> {
        // widths 128 + 2*96 + 2*64 + 64 = 512 exercises a non-default split
        let cfg = InceptionConfig { b1: 128, b2_reduce: 32, b2: 96, b3_reduce: 16, b3_mid: 24, b3: 64, b4: 64 };
        InceptionParams {
            config: cfg,
            b1: conv([1, 1, 8, 128], 31),
            b2_reduce: conv([1, 1, 8, 32], 32),
            b2_h: conv([1, 3, 32, 96], 33),
            b2_v: conv([3, 1, 32, 96], 34),
            b3_reduce: conv([1, 1, 8, 16], 35),
            b3_mid: conv([3, 3, 16, 24], 36),
            b3_h: conv([1, 3, 24, 64], 37),
            b3_v: conv([3, 1, 24, 64], 38),
            b4_proj: conv([1, 1, 8, 64], 39),
        }
    }

    #[test]
    fn inception_output_channels_are_512() {
        let mut tape = GradTape::no_grad();
        let params = tiny_inception_params();
        let x = Tensor::<f32>::new(&[6, 6, 8], Init::Uniform { lo: -1.0, hi: 1.0, seed: 40 }).unwrap();
        let y = inception_forward(&mut tape, &x, &params).unwrap();
        assert_eq!(y.shape(), &[6, 6, 512]);
    }

    #[test]
    fn inception_zero_input_gives_bias_response() {
        let mut tape = GradTape::no_grad();
        let mut params = tiny_inception_params();
        // zero biases -> zero output on zero input
        for p in [
            &mut params.b1,
            &mut params.b2_reduce,
            &mut params.b2_h,
            &mut params.b2_v,
            &mut params.b3_reduce,
            &mut params.b3_mid,
            &mut params.b3_h,
            &mut params.b3_v,
            &mut params.b4_proj,
        ] {
            p.bias = Tensor::zeros(p.bias.shape()).unwrap();
        }
        let x = Tensor::<f32>::zeros(&[4, 4, 8]).unwrap();
        let y = inception_forward(&mut tape, &x, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // constant positive biases propagate to a constant-positive response
        let mut biased = tiny_inception_params();
        biased.b1.bias = Tensor::filled(&[128], 1.0f32).unwrap();
        biased.b1.kernel = Tensor::zeros(biased.b1.kernel.shape()).unwrap();
        let y = inception_forward(&mut tape, &x, &biased).unwrap();
        assert!(y.data()[..128].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn extract_patches_small_exhaustive() {
        let mut tape = GradTape::no_grad();
        // F=4, p=2, C=1: 4 patches, each the matching 2x2 block
        let x = Tensor::from_vec(
            &[4, 4, 1],
            (0..16).map(|v| v as f32).collect(),
        )
        .unwrap();
        let patches = extract_patches(&mut tape, &x, 2).unwrap();
        assert_eq!(patches.shape(), &[4, 4]);
        assert_eq!(patches.data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 12.0, 13.0, 10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn extract_patches_counts() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::<f32>::zeros(&[56, 56, 2]).unwrap();
        assert_eq!(extract_patches(&mut tape, &x, 5).unwrap().shape(), &[121, 50]);
        assert_eq!(extract_patches(&mut tape, &x, 7).unwrap().shape(), &[64, 98]);
        assert!(extract_patches(&mut tape, &x, 57).is_err());
    }

    #[test]
    fn extract_patches_inverse_scatter_reconstructs() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::<f32>::new(&[7, 7, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed: 50 }).unwrap();
        let p = 3;
        let patches = extract_patches(&mut tape, &x, p).unwrap();
        let n = 7 / p;
        // inverse scatter of every patch row back into the cropped region
        let mut recon = vec![f32::NAN; (n * p) * (n * p) * 3];
        for pi in 0..n {
            for pj in 0..n {
                let row = &patches.data()[(pi * n + pj) * p * p * 3..][..p * p * 3];
                for di in 0..p {
                    for dj in 0..p {
                        for c in 0..3 {
                            recon[(((pi * p + di) * (n * p)) + pj * p + dj) * 3 + c] =
                                row[(di * p + dj) * 3 + c];
                        }
                    }
                }
            }
        }
        for i in 0..n * p {
            for j in 0..n * p {
                for c in 0..3 {
                    assert_eq!(recon[(i * (n * p) + j) * 3 + c], x.data()[(i * 7 + j) * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn patch_encoder_param_count_canonical() {
        // p=5, C=512, d=16, 121 patches: 12800*16+16 + 121*16 = 206,752
        assert_eq!(patch_encoder_param_count(12_800, 121, 16), 206_752);
    }

    #[test]
    fn patch_encode_zero_projection_yields_positions() {
        let mut tape = GradTape::no_grad();
        let patches = Tensor::<f32>::new(&[4, 6], Init::Uniform { lo: -1.0, hi: 1.0, seed: 60 }).unwrap();
        let params = PatchEncoderParams {
            projection: Tensor::zeros(&[6, 3]).unwrap(),
            bias: Tensor::zeros(&[3]).unwrap(),
            positions: Tensor::new(&[4, 3], Init::Uniform { lo: -1.0, hi: 1.0, seed: 61 }).unwrap(),
        };
        let y = patch_encode(&mut tape, &patches, &params).unwrap();
        assert_eq!(y.data(), params.positions.data());
    }

    #[test]
    fn patch_encode_identical_patches_differ_by_embedding() {
        let mut tape = GradTape::no_grad();
        let row: Vec<f32> = vec![0.25, -0.5, 1.0, 0.125];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let patches = Tensor::from_vec(&[2, 4], data).unwrap();
        let params = PatchEncoderParams {
            projection: Tensor::new(&[4, 2], Init::Uniform { lo: -1.0, hi: 1.0, seed: 62 }).unwrap(),
            bias: Tensor::new(&[2], Init::Uniform { lo: -1.0, hi: 1.0, seed: 63 }).unwrap(),
            positions: Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 0.5, -0.25]).unwrap(),
        };
        let y = patch_encode(&mut tape, &patches, &params).unwrap();
        let diff0 = y.data()[2] - y.data()[0];
        let diff1 = y.data()[3] - y.data()[1];
        assert!((diff0 - 0.5).abs() < 1e-6);
        assert!((diff1 + 0.25).abs() < 1e-6);
    }

    #[test]
    fn patch_encode_position_length_mismatch_errors() {
        let mut tape = GradTape::<f32>::no_grad();
        let patches = Tensor::<f32>::zeros(&[4, 6]).unwrap();
        let params = PatchEncoderParams {
            projection: Tensor::zeros(&[6, 3]).unwrap(),
            bias: Tensor::zeros(&[3]).unwrap(),
            positions: Tensor::zeros(&[5, 3]).unwrap(),
        };
        assert!(patch_encode(&mut tape, &patches, &params).is_err());
    }

    #[test]
    fn attention_param_count_canonical() {
        // 3*4*(16*16+16) + (4*16*16+16) = 4304
        assert_eq!(attention_param_count(16, 4, 16), 4304);
    }

    #[test]
    fn scaled_dot_attention_single_row_passes_value() {
        let mut tape = GradTape::no_grad();
        let q = Tensor::from_vec(&[1, 2], vec![0.3f32, -0.7]).unwrap();
        let k = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let v = Tensor::from_vec(&[1, 3], vec![5.0, 6.0, 7.0]).unwrap();
        let y = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
        assert_eq!(y.data(), v.data());
    }

    #[test]
    fn scaled_dot_attention_sharp_key_selects_value() {
        let mut tape = GradTape::no_grad();
        let q = Tensor::from_vec(&[1, 2], vec![10.0f32, 0.0]).unwrap();
        let k = Tensor::from_vec(&[2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let v = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
        // softmax([100/sqrt(2), 0]) puts > 1 - 1e-8 on the first key
        assert!((y.data()[0] as f64) > 1.0 - 1e-8);
        assert!((y.data()[1] as f64) < 1e-8);
    }

    #[test]
    fn scaled_dot_attention_zero_query_averages_values() {
        let mut tape = GradTape::no_grad();
        let q = Tensor::<f32>::zeros(&[1, 2]).unwrap();
        let k = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 2.0, 2.0]).unwrap();
        let v = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = scaled_dot_attention(&mut tape, &q, &k, &v).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-6);
    }

    fn mha_params(d: usize, heads: usize, key_dim: usize, seed: u64) -> AttentionParams<f32> {
        let mut s = seed;
        let mut next = || {
            s += 1;
            s
        };
        let head = |s1: u64, s2: u64, s3: u64| AttentionHeadParams {
            wq: Tensor::new(&[d, key_dim], Init::Uniform { lo: -0.5, hi: 0.5, seed: s1 }).unwrap(),
            bq: Tensor::zeros(&[key_dim]).unwrap(),
            wk: Tensor::new(&[d, key_dim], Init::Uniform { lo: -0.5, hi: 0.5, seed: s2 }).unwrap(),
            bk: Tensor::zeros(&[key_dim]).unwrap(),
            wv: Tensor::new(&[d, key_dim], Init::Uniform { lo: -0.5, hi: 0.5, seed: s3 }).unwrap(),
            bv: Tensor::zeros(&[key_dim]).unwrap(),
        };
        AttentionParams {
            heads: (0..heads).map(|_| head(next(), next(), next())).collect(),
            out_w: Tensor::new(&[heads * key_dim, d], Init::Uniform { lo: -0.5, hi: 0.5, seed: next() }).unwrap(),
            out_b: Tensor::zeros(&[d]).unwrap(),
        }
    }

    #[test]
    fn mha_zero_projections_give_constant_bias_rows() {
        let mut tape = GradTape::no_grad();
        let d = 4;
        let mut params = mha_params(d, 2, 3, 70);
        for h in &mut params.heads {
            h.wq = Tensor::zeros(h.wq.shape()).unwrap();
            h.wk = Tensor::zeros(h.wk.shape()).unwrap();
            h.wv = Tensor::zeros(h.wv.shape()).unwrap();
        }
        params.out_w = Tensor::zeros(params.out_w.shape()).unwrap();
        params.out_b = Tensor::from_vec(&[4], vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        let x = Tensor::<f32>::new(&[3, 4], Init::Uniform { lo: -1.0, hi: 1.0, seed: 71 }).unwrap();
        let y = multi_head_attention(&mut tape, &x, &params).unwrap();
        for row in y.data().chunks_exact(d) {
            assert_eq!(row, params.out_b.data());
        }
    }

    #[test]
    fn mha_is_permutation_equivariant() {
        let mut tape = GradTape::no_grad();
        let params = mha_params(4, 2, 3, 80);
        let x = Tensor::<f32>::new(&[5, 4], Init::Uniform { lo: -1.0, hi: 1.0, seed: 81 }).unwrap();
        let y = multi_head_attention(&mut tape, &x, &params).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = vec![0.0f32; x.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 4..(dst + 1) * 4].copy_from_slice(&x.data()[src * 4..(src + 1) * 4]);
        }
        let xp = Tensor::from_vec(&[5, 4], permuted).unwrap();
        let yp = multi_head_attention(&mut tape, &xp, &params).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                let a = yp.data()[dst * 4 + j];
                let b = y.data()[src * 4 + j];
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // the weight matrix itself: softmax rows must sum to 1
        let mut tape = GradTape::no_grad();
        let q = Tensor::<f32>::new(&[6, 3], Init::Uniform { lo: -2.0, hi: 2.0, seed: 90 }).unwrap();
        let k = Tensor::<f32>::new(&[6, 3], Init::Uniform { lo: -2.0, hi: 2.0, seed: 91 }).unwrap();
        let kt = tape.transpose(&k).unwrap();
        let scores = tape.matmul(&q, &kt).unwrap();
        let scaled = tape.scale(&scores, 1.0 / 3f64.sqrt()).unwrap();
        let weights = tape.softmax(&scaled, 1).unwrap();
        for row in weights.data().chunks_exact(6) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    fn block_params(d: usize, heads: usize, key_dim: usize, hidden: usize, seed: u64) -> TransformerBlockParams<f32> {
        TransformerBlockParams {
            ln1_gamma: Tensor::filled(&[d], 1.0).unwrap(),
            ln1_beta: Tensor::zeros(&[d]).unwrap(),
            attention: mha_params(d, heads, key_dim, seed),
            ln2_gamma: Tensor::filled(&[d], 1.0).unwrap(),
            ln2_beta: Tensor::zeros(&[d]).unwrap(),
            fc1_w: Tensor::new(&[d, hidden], Init::Uniform { lo: -0.5, hi: 0.5, seed: seed + 100 }).unwrap(),
            fc1_b: Tensor::zeros(&[hidden]).unwrap(),
            fc2_w: Tensor::new(&[hidden, d], Init::Uniform { lo: -0.5, hi: 0.5, seed: seed + 101 }).unwrap(),
            fc2_b: Tensor::zeros(&[d]).unwrap(),
        }
    }

    #[test]
    fn transformer_block_param_count_canonical() {
        assert_eq!(transformer_block_param_count(16, 4, 16, 32), 5440);
        assert_eq!(4 * transformer_block_param_count(16, 4, 16, 32), 21_760);
    }

    #[test]
    fn transformer_block_zero_weights_is_identity() {
        let mut tape = GradTape::no_grad();
        let d = 4;
        let mut params = block_params(d, 2, 3, 8, 110);
        for h in &mut params.attention.heads {
            for t in [&mut h.wq, &mut h.wk, &mut h.wv] {
                *t = Tensor::zeros(t.shape()).unwrap();
            }
        }
        params.attention.out_w = Tensor::zeros(params.attention.out_w.shape()).unwrap();
        params.fc1_w = Tensor::zeros(params.fc1_w.shape()).unwrap();
        params.fc2_w = Tensor::zeros(params.fc2_w.shape()).unwrap();
        let x = Tensor::<f32>::new(&[5, 4], Init::Uniform { lo: -1.0, hi: 1.0, seed: 111 }).unwrap();
        let y = transformer_block(&mut tape, &x, &params).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = GradTape::no_grad();
        let x = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_1d(&mut tape, &x).unwrap().data(), &[2.0, 3.0]);
        let single = Tensor::from_vec(&[1, 3], vec![5.0f32, 6.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool_1d(&mut tape, &single).unwrap().data(), &[5.0, 6.0, 7.0]);
        let c = Tensor::<f32>::filled(&[4, 2], 1.25).unwrap();
        assert_eq!(global_avg_pool_1d(&mut tape, &c).unwrap().data(), &[1.25, 1.25]);
    }

    // gradient checks for the layer ops in shadow precision

    fn conv64(shape: [usize; 4], seed: u64) -> Conv2DParams<f64> {
        Conv2DParams::new(
            Tensor::new(&shape, Init::Uniform { lo: -0.6, hi: 0.6, seed }).unwrap(),
            Tensor::new(&[shape[3]], Init::Uniform { lo: -0.2, hi: 0.2, seed: seed + 1 }).unwrap(),
            1,
            Padding::Same,
        )
        .unwrap()
    }

    #[test]
    fn conv2d_gradients_check_out() {
        let x = Tensor::<f64>::new(&[5, 4, 2], Init::Uniform { lo: -1.0, hi: 1.0, seed: 200 }).unwrap();
        let p = conv64([3, 3, 2, 3], 201);
        let kernel = p.kernel.clone();
        let bias = p.bias.clone();
        let err = grad_check(
            |tape, ins| {
                let params = Conv2DParams::new(ins[1].clone(), ins[2].clone(), 1, Padding::Same)?;
                let y = conv2d(tape, &ins[0], &params)?;
                tape.sum(&y)
            },
            &[x, kernel, bias],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "conv2d grad error {err}");
    }

    #[test]
    fn transformer_block_gradients_check_out() {
        let d = 4;
        let params = {
            // rebuild in f64
            TransformerBlockParams::<f64> {
                ln1_gamma: Tensor::new(&[d], Init::Uniform { lo: 0.5, hi: 1.5, seed: 301 }).unwrap(),
                ln1_beta: Tensor::new(&[d], Init::Uniform { lo: -0.3, hi: 0.3, seed: 302 }).unwrap(),
                attention: AttentionParams {
                    heads: vec![AttentionHeadParams {
                        wq: Tensor::new(&[d, 3], Init::Uniform { lo: -0.5, hi: 0.5, seed: 303 }).unwrap(),
                        bq: Tensor::new(&[3], Init::Uniform { lo: -0.1, hi: 0.1, seed: 304 }).unwrap(),
                        wk: Tensor::new(&[d, 3], Init::Uniform { lo: -0.5, hi: 0.5, seed: 305 }).unwrap(),
                        bk: Tensor::new(&[3], Init::Uniform { lo: -0.1, hi: 0.1, seed: 306 }).unwrap(),
                        wv: Tensor::new(&[d, 3], Init::Uniform { lo: -0.5, hi: 0.5, seed: 307 }).unwrap(),
                        bv: Tensor::new(&[3], Init::Uniform { lo: -0.1, hi: 0.1, seed: 308 }).unwrap(),
                    }],
                    out_w: Tensor::new(&[3, d], Init::Uniform { lo: -0.5, hi: 0.5, seed: 309 }).unwrap(),
                    out_b: Tensor::new(&[d], Init::Uniform { lo: -0.1, hi: 0.1, seed: 310 }).unwrap(),
                },
                ln2_gamma: Tensor::new(&[d], Init::Uniform { lo: 0.5, hi: 1.5, seed: 311 }).unwrap(),
                ln2_beta: Tensor::new(&[d], Init::Uniform { lo: -0.3, hi: 0.3, seed: 312 }).unwrap(),
                fc1_w: Tensor::new(&[d, 6], Init::Uniform { lo: -0.5, hi: 0.5, seed: 313 }).unwrap(),
                fc1_b: Tensor::new(&[6], Init::Uniform { lo: -0.1, hi: 0.1, seed: 314 }).unwrap(),
                fc2_w: Tensor::new(&[6, d], Init::Uniform { lo: -0.5, hi: 0.5, seed: 315 }).unwrap(),
                fc2_b: Tensor::new(&[d], Init::Uniform { lo: -0.1, hi: 0.1, seed: 316 }).unwrap(),
            }
        };
        let x = Tensor::<f64>::new(&[3, d], Init::Uniform { lo: -1.0, hi: 1.0, seed: 300 }).unwrap();
        let w = Tensor::<f64>::new(&[3, d], Init::Uniform { lo: -1.0, hi: 1.0, seed: 317 }).unwrap();
        let err = grad_check(
            |tape, ins| {
                let y = transformer_block(tape, &ins[0], &params)?;
                let wy = tape.mul(&y, &w)?;
                tape.sum(&wy)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "transformer block grad error {err}");
    }
}
