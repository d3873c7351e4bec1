//! Saliency explanations: gradient-weighted class activation maps over any
//! named 2-D feature map, LIME-style local linear surrogates over a regular
//! segment grid, and embedding export for external projection tools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Trace};
use crate::tensor::{GradTape, Tensor};

/// Per-pixel saliency map, max-normalized to `[0,1]` (all-zero allowed).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub layer: String,
    pub class_index: usize,
    /// Peak of the un-normalized map; 0 means the map was all zero.
    pub raw_max: f32,
}

impl Heatmap {
    /// `(row, col)` of the maximum value.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// JSON sidecar written next to the PGM.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "layer": self.layer,
            "class": self.class_index,
            "max_raw": self.raw_max,
            "height": self.height,
            "width": self.width,
        })
    }
}

/// Combine a `[F,F,K]` activation with the gradient of a class score with
/// respect to it: channel weights are spatial gradient means, the map is
/// `relu(sum_k w_k A_k)` upsampled to `(out_h, out_w)` and max-normalized.
pub fn cam_from_gradients(
    activation: &Tensor,
    gradient: &Tensor,
    out_h: usize,
    out_w: usize,
    layer: &str,
    class_index: usize,
) -> Result<Heatmap> {
    if activation.rank() != 3 {
        return Err(Error::Shape(format!(
            "layer {layer} output is not a 2-D feature map: {:?}",
            activation.shape()
        )));
    }
    if gradient.shape() != activation.shape() {
        return Err(Error::Shape("gradient and activation shapes differ".into()));
    }
    let (h, w, k) = (activation.shape()[0], activation.shape()[1], activation.shape()[2]);
    let spatial = (h * w) as f32;
    let mut weights = vec![0.0f32; k];
    for px in gradient.data().chunks_exact(k) {
        for (wk, &g) in weights.iter_mut().zip(px) {
            *wk += g;
        }
    }
    for wk in &mut weights {
        *wk /= spatial;
    }
    let mut cam = vec![0.0f32; h * w];
    for (i, px) in activation.data().chunks_exact(k).enumerate() {
        let mut acc = 0.0f32;
        for (&wk, &a) in weights.iter().zip(px) {
            acc += wk * a;
        }
        cam[i] = acc.max(0.0);
    }
    let cam_t = Tensor::from_vec(&[h, w, 1], cam)?;
    let up = resize_bilinear(&cam_t, out_h, out_w)?;
    let mut values = up.data().to_vec();
    let raw_max = values.iter().cloned().fold(0.0f32, f32::max);
    if raw_max > 0.0 {
        for v in &mut values {
            *v /= raw_max;
        }
    }
    Ok(Heatmap { values, height: out_h, width: out_w, layer: layer.to_string(), class_index, raw_max })
}

/// Grad-CAM for `class_idx` against a named 2-D layer (default caller
/// choice: `inception`, the last convolutional map before patching).
/// The gradient source is the pre-softmax class score.
pub fn grad_cam(m: &ModelGraph, image: &Tensor, class_idx: usize, layer: &str) -> Result<Heatmap> {
    if class_idx >= m.config().num_classes {
        return Err(Error::Invalid(format!(
            "class {class_idx} out of range for {} classes",
            m.config().num_classes
        )));
    }
    if !m.layer_names().contains(&layer) {
        return Err(Error::Invalid(format!("unknown layer {layer:?}")));
    }
    let mut tape = GradTape::new();
    let mut trace = Trace { activations: Vec::new() };
    let fwd = m.forward(&mut tape, image, Some(&mut trace))?;
    let activation = trace
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("layer {layer:?} produced no activation")))?;
    let score = tape.select(&fwd.logits, class_idx)?;
    let grads = tape.backward(&score)?;
    let gradient = grads
        .get(activation)
        .ok_or_else(|| Error::Invalid(format!("no gradient reaches layer {layer:?}")))?;
    let s = m.config().input_size;
    cam_from_gradients(activation, &gradient, s, s, layer, class_idx)
}

// ── LIME ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LimeConfig {
    pub rows: usize,
    pub cols: usize,
    pub n_samples: usize,
    pub top_k: usize,
    pub seed: u64,
    /// L2 penalty on segment weights (the intercept is unpenalized).
    pub lambda: f64,
    /// Kernel width of `exp(-D^2 / sigma^2)` over normalized Hamming distance.
    pub sigma: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig { rows: 8, cols: 8, n_samples: 512, top_k: 5, seed: 0, lambda: 1e-3, sigma: 0.25 }
    }
}

/// Per-segment surrogate weights over a `rows x cols` grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LimeExplanation {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Segment ids sorted by descending weight.
    pub top_k: Vec<usize>,
    pub r2: f64,
}

impl LimeExplanation {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("explanation serializes")
    }
}

/// Pixel bounds `(r0, r1, c0, c1)` of a segment in a `rows x cols` grid
/// over an `h x w` image; edge segments absorb the remainder.
pub fn segment_bounds(
    h: usize,
    w: usize,
    rows: usize,
    cols: usize,
    segment: usize,
) -> (usize, usize, usize, usize) {
    let (si, sj) = (segment / cols, segment % cols);
    let r0 = si * h / rows;
    let r1 = if si + 1 == rows { h } else { (si + 1) * h / rows };
    let c0 = sj * w / cols;
    let c1 = if sj + 1 == cols { w } else { (sj + 1) * w / cols };
    (r0, r1, c0, c1)
}

/// Fit a weighted, L2-regularized linear surrogate to a black-box batch
/// classifier over seeded binary segment masks. Masked segments are filled
/// with the per-image mean color. `predict` receives image batches and
/// returns one probability row per image.
pub fn lime_explain(
    predict: &mut dyn FnMut(&[Tensor]) -> Result<Vec<Vec<f32>>>,
    image: &Tensor,
    class_idx: usize,
    cfg: &LimeConfig,
) -> Result<LimeExplanation> {
    let segments = cfg.rows * cfg.cols;
    if segments == 0 {
        return Err(Error::Invalid("segment grid must be non-empty".into()));
    }
    // seeded masks; entry 1 keeps the segment, 0 replaces it with the mean
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masks: Vec<Vec<u8>> = (0..cfg.n_samples)
        .map(|_| (0..segments).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect())
        .collect();
    lime_explain_with_masks(predict, image, class_idx, cfg, &masks)
}

/// [`lime_explain`] over a caller-supplied perturbation design. Masks hold
/// one bit per segment; 1 keeps the segment.
pub fn lime_explain_with_masks(
    predict: &mut dyn FnMut(&[Tensor]) -> Result<Vec<Vec<f32>>>,
    image: &Tensor,
    class_idx: usize,
    cfg: &LimeConfig,
    masks: &[Vec<u8>],
) -> Result<LimeExplanation> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::Shape(format!("lime expects an [H,W,3] image, got {:?}", image.shape())));
    }
    let segments = cfg.rows * cfg.cols;
    if segments == 0 {
        return Err(Error::Invalid("segment grid must be non-empty".into()));
    }
    if masks.len() < segments + 1 {
        return Err(Error::Invalid(format!(
            "n_samples {} too small for {segments} segments (need at least {})",
            masks.len(),
            segments + 1
        )));
    }
    if masks.iter().any(|m| m.len() != segments) {
        return Err(Error::Invalid("mask length does not match segment count".into()));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut mean = [0.0f32; 3];
    for px in image.data().chunks_exact(3) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= (h * w) as f32;
    }

    // black-box responses, batched, reassembled in mask order
    let mut responses = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(16) {
        let batch: Vec<Tensor> = chunk
            .iter()
            .map(|mask| apply_mask(image, mask, cfg, &mean))
            .collect::<Result<Vec<_>>>()?;
        let probs = predict(&batch)?;
        if probs.len() != batch.len() {
            return Err(Error::Invalid(format!(
                "black box returned {} rows for {} images",
                probs.len(),
                batch.len()
            )));
        }
        for row in probs {
            let p = row.get(class_idx).copied().ok_or_else(|| {
                Error::Invalid(format!("black box row too short for class {class_idx}"))
            })?;
            responses.push(p as f64);
        }
    }

    // sample weights from normalized Hamming distance to the all-ones mask
    let kernel: Vec<f64> = masks
        .iter()
        .map(|mask| {
            let masked = mask.iter().filter(|&&b| b == 0).count();
            let d = masked as f64 / segments as f64;
            (-d * d / (cfg.sigma * cfg.sigma)).exp()
        })
        .collect();

    let (intercept, weights, r2) = ridge_fit(masks, &responses, &kernel, cfg.lambda, segments)?;
    let mut order: Vec<usize> = (0..segments).collect();
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(cfg.top_k.min(segments));
    Ok(LimeExplanation { rows: cfg.rows, cols: cfg.cols, weights, intercept, top_k: order, r2 })
}

fn apply_mask(image: &Tensor, mask: &[u8], cfg: &LimeConfig, mean: &[f32; 3]) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut data = image.data().to_vec();
    for (seg, &keep) in mask.iter().enumerate() {
        if keep == 1 {
            continue;
        }
        let (r0, r1, c0, c1) = segment_bounds(h, w, cfg.rows, cfg.cols, seg);
        for r in r0..r1 {
            for c in c0..c1 {
                for ch in 0..3 {
                    data[(r * w + c) * 3 + ch] = mean[ch];
                }
            }
        }
    }
    Tensor::from_vec(image.shape(), data)
}

/// Weighted ridge regression by normal equations: features are the mask
/// bits plus an unpenalized intercept column. Returns (intercept, weights,
/// weighted R^2).
fn ridge_fit(
    masks: &[Vec<u8>],
    responses: &[f64],
    kernel: &[f64],
    lambda: f64,
    segments: usize,
) -> Result<(f64, Vec<f64>, f64)> {
    let dim = segments + 1;
    let mut ata = vec![0.0f64; dim * dim];
    let mut atb = vec![0.0f64; dim];
    let mut feat = vec![0.0f64; dim];
    for ((mask, &y), &wt) in masks.iter().zip(responses).zip(kernel) {
        feat[0] = 1.0;
        for (f, &b) in feat[1..].iter_mut().zip(mask) {
            *f = b as f64;
        }
        for i in 0..dim {
            let wf = wt * feat[i];
            atb[i] += wf * y;
            for j in i..dim {
                ata[i * dim + j] += wf * feat[j];
            }
        }
    }
    // mirror the upper triangle; penalize everything but the intercept
    for i in 0..dim {
        for j in 0..i {
            ata[i * dim + j] = ata[j * dim + i];
        }
    }
    for i in 1..dim {
        ata[i * dim + i] += lambda;
    }
    let solution = solve_linear(&mut ata, &mut atb, dim)?;

    // weighted R^2 of the fit
    let wsum: f64 = kernel.iter().sum();
    let ybar: f64 = responses.iter().zip(kernel).map(|(&y, &w)| y * w).sum::<f64>() / wsum;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for ((mask, &y), &wt) in masks.iter().zip(responses).zip(kernel) {
        let mut pred = solution[0];
        for (k, &b) in mask.iter().enumerate() {
            pred += solution[k + 1] * b as f64;
        }
        ss_res += wt * (y - pred) * (y - pred);
        ss_tot += wt * (y - ybar) * (y - ybar);
    }
    let r2 = if ss_tot < 1e-12 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((solution[0], solution[1..].to_vec(), r2))
}

/// Gaussian elimination with partial pivoting on a dense `n x n` system.
fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Numeric("singular system in surrogate fit".into()));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

// ── Embeddings ────────────────────────────────────────────────────────────

/// Per-image output of the global-average-pool layer (pre-classifier),
/// as `[N, embed_dim]` rows for external projection tools.
pub fn extract_embeddings(m: &ModelGraph, images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Invalid("no images to embed".into()));
    }
    let d = m.config().embed_dim;
    let mut out = Vec::with_capacity(images.len() * d);
    for image in images {
        let mut tape = GradTape::no_grad();
        let mut trace = Trace { activations: Vec::new() };
        m.forward(&mut tape, image, Some(&mut trace))?;
        let gap = trace
            .get("gap")
            .ok_or_else(|| Error::Invalid("model trace lacks gap output".into()))?;
        out.extend_from_slice(gap.data());
    }
    Tensor::from_vec(&[images.len(), d], out)
}
