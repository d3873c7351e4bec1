//! Model assembly: the VGG front, inception block, patch pipeline and
//! transformer stack wired per the published layer table, plus parameter
//! and FLOP accounting and checkpoint persistence.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    self, AttentionHeadParams, AttentionParams, Conv2DParams, InceptionConfig, InceptionParams,
    PatchEncoderParams, TransformerBlockParams, INCEPTION_OUT_CHANNELS, LAYER_NORM_EPS,
};
use crate::tensor::{GradTape, Init, Padding, Tensor};

/// Published reference total for the canonical 4-class configuration.
pub const TABLE2_TOTAL: usize = 850_500;

/// Published reference count for the inception block.
pub const TABLE2_INCEPTION: usize = 361_728;

/// Patch sizes covered by the patch-size sweep.
pub const ALLOWED_PATCH_SIZES: [usize; 5] = [1, 3, 5, 7, 9];

/// FLOP counting convention used by [`count_flops`].
pub const FLOPS_CONVENTION: &str = "2 FLOPs per multiply-accumulate, matmul-lowered ops only";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantXViTConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub inception: InceptionConfig,
    pub transformer_depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for PlantXViTConfig {
    fn default() -> Self {
        PlantXViTConfig {
            input_size: 224,
            num_classes: 4,
            patch_size: 5,
            inception: InceptionConfig::default(),
            transformer_depth: 4,
            embed_dim: 16,
            heads: 4,
            mlp_hidden: 32,
            seed: 0,
        }
    }
}

impl PlantXViTConfig {
    /// The 224x224x3, 4-class reference configuration.
    pub fn canonical() -> Self {
        Self::default()
    }

    pub fn new(input_size: usize, num_classes: usize) -> Self {
        PlantXViTConfig { input_size, num_classes, ..Self::default() }
    }

    /// Per-head projection width; tied to the embedding width.
    pub fn key_dim(&self) -> usize {
        self.embed_dim
    }

    /// Spatial side of the inception output (two 2x2 pools after the input).
    pub fn feature_map_size(&self) -> usize {
        self.input_size / 4
    }

    /// Patches per side: `floor((input_size/4) / patch_size)`.
    pub fn patches_per_side(&self) -> usize {
        self.feature_map_size() / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        let n = self.patches_per_side();
        n * n
    }

    /// Flattened patch length `p^2 * 512`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * INCEPTION_OUT_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if !ALLOWED_PATCH_SIZES.contains(&self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} not in {:?}",
                self.patch_size, ALLOWED_PATCH_SIZES
            )));
        }
        if self.patch_size > self.input_size / 4 {
            return Err(Error::Config(format!(
                "patch_size {} exceeds feature map side {}",
                self.patch_size,
                self.input_size / 4
            )));
        }
        if self.transformer_depth == 0 {
            return Err(Error::Config("transformer_depth must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("embed_dim, heads and mlp_hidden must be >= 1".into()));
        }
        self.inception.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Input,
    Conv { out_ch: usize },
    MaxPool,
    Inception,
    Patches,
    PatchEncoder,
    Transformer,
    FinalNorm,
    GlobalPool,
    Output,
}

#[derive(Debug, Clone)]
struct LayerSpec {
    name: String,
    kind: LayerKind,
}

fn layer_plan(cfg: &PlantXViTConfig) -> Vec<LayerSpec> {
    let mut plan = vec![
        LayerSpec { name: "input".into(), kind: LayerKind::Input },
        LayerSpec { name: "vgg1.conv1".into(), kind: LayerKind::Conv { out_ch: 64 } },
        LayerSpec { name: "vgg1.conv2".into(), kind: LayerKind::Conv { out_ch: 64 } },
        LayerSpec { name: "vgg1.pool".into(), kind: LayerKind::MaxPool },
        LayerSpec { name: "vgg2.conv1".into(), kind: LayerKind::Conv { out_ch: 128 } },
        LayerSpec { name: "vgg2.conv2".into(), kind: LayerKind::Conv { out_ch: 128 } },
        LayerSpec { name: "vgg2.pool".into(), kind: LayerKind::MaxPool },
        LayerSpec { name: "inception".into(), kind: LayerKind::Inception },
        LayerSpec { name: "patches".into(), kind: LayerKind::Patches },
        LayerSpec { name: "patch_encoder".into(), kind: LayerKind::PatchEncoder },
    ];
    for i in 1..=cfg.transformer_depth {
        plan.push(LayerSpec { name: format!("transformer{i}"), kind: LayerKind::Transformer });
    }
    plan.push(LayerSpec { name: "norm".into(), kind: LayerKind::FinalNorm });
    plan.push(LayerSpec { name: "gap".into(), kind: LayerKind::GlobalPool });
    plan.push(LayerSpec { name: "output".into(), kind: LayerKind::Output });
    plan
}

/// Ordered, named layer list with its parameter store.
pub struct ModelGraph {
    config: PlantXViTConfig,
    layers: Vec<LayerSpec>,
    params: IndexMap<String, Tensor>,
}

/// Captured per-layer outputs of one traced forward pass. Convolution
/// activations are recorded post-ReLU; `logits` is the pre-softmax head.
pub struct Trace {
    pub activations: Vec<(String, Tensor)>,
}

impl Trace {
    fn new() -> Self {
        Trace { activations: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.activations
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// One forward pass of one sample.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub probs: Tensor,
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    params: IndexMap<String, Tensor>,
}

impl ParamBuilder {
    fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let seed = self.rng.random::<u64>();
        let t = Tensor::new(shape, Init::HeUniform { fan_in, seed })?.with_requires_grad();
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    fn fill(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        let t = Tensor::filled(shape, value)?.with_requires_grad();
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let seed = self.rng.random::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
        let t = Tensor::from_vec(shape, data)?.with_requires_grad();
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    fn conv(&mut self, prefix: &str, kh: usize, kw: usize, cin: usize, cout: usize) -> Result<()> {
        self.he(&format!("{prefix}.kernel"), &[kh, kw, cin, cout], kh * kw * cin)?;
        self.fill(&format!("{prefix}.bias"), &[cout], 0.0)
    }
}

/// Build the classifier with seeded He-uniform kernels, zero biases,
/// N(0, 0.02) positional embeddings and identity layer-norm affines.
/// Deterministic given `cfg.seed`.
pub fn build_model(cfg: &PlantXViTConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut b = ParamBuilder { rng: ChaCha8Rng::seed_from_u64(cfg.seed), params: IndexMap::new() };
    let d = cfg.embed_dim;
    let kd = cfg.key_dim();

    b.conv("vgg1.conv1", 3, 3, 3, 64)?;
    b.conv("vgg1.conv2", 3, 3, 64, 64)?;
    b.conv("vgg2.conv1", 3, 3, 64, 128)?;
    b.conv("vgg2.conv2", 3, 3, 128, 128)?;

    let inc = &cfg.inception;
    b.conv("inception.b1", 1, 1, 128, inc.b1)?;
    b.conv("inception.b2.reduce", 1, 1, 128, inc.b2_reduce)?;
    b.conv("inception.b2.h", 1, 3, inc.b2_reduce, inc.b2)?;
    b.conv("inception.b2.v", 3, 1, inc.b2_reduce, inc.b2)?;
    b.conv("inception.b3.reduce", 1, 1, 128, inc.b3_reduce)?;
    b.conv("inception.b3.mid", 3, 3, inc.b3_reduce, inc.b3_mid)?;
    b.conv("inception.b3.h", 1, 3, inc.b3_mid, inc.b3)?;
    b.conv("inception.b3.v", 3, 1, inc.b3_mid, inc.b3)?;
    b.conv("inception.b4.proj", 1, 1, 128, inc.b4)?;

    let patch_len = cfg.patch_len();
    b.he("patch_encoder.projection", &[patch_len, d], patch_len)?;
    b.fill("patch_encoder.bias", &[d], 0.0)?;
    b.normal("patch_encoder.positions", &[cfg.num_patches(), d], 0.02)?;

    for i in 1..=cfg.transformer_depth {
        let p = format!("transformer{i}");
        b.fill(&format!("{p}.ln1.gamma"), &[d], 1.0)?;
        b.fill(&format!("{p}.ln1.beta"), &[d], 0.0)?;
        for h in 0..cfg.heads {
            for proj in ["wq", "wk", "wv"] {
                b.he(&format!("{p}.attn.h{h}.{proj}"), &[d, kd], d)?;
            }
            for bias in ["bq", "bk", "bv"] {
                b.fill(&format!("{p}.attn.h{h}.{bias}"), &[kd], 0.0)?;
            }
        }
        b.he(&format!("{p}.attn.out.kernel"), &[cfg.heads * kd, d], cfg.heads * kd)?;
        b.fill(&format!("{p}.attn.out.bias"), &[d], 0.0)?;
        b.fill(&format!("{p}.ln2.gamma"), &[d], 1.0)?;
        b.fill(&format!("{p}.ln2.beta"), &[d], 0.0)?;
        b.he(&format!("{p}.mlp.fc1.kernel"), &[d, cfg.mlp_hidden], d)?;
        b.fill(&format!("{p}.mlp.fc1.bias"), &[cfg.mlp_hidden], 0.0)?;
        b.he(&format!("{p}.mlp.fc2.kernel"), &[cfg.mlp_hidden, d], cfg.mlp_hidden)?;
        b.fill(&format!("{p}.mlp.fc2.bias"), &[d], 0.0)?;
    }

    b.fill("norm.gamma", &[d], 1.0)?;
    b.fill("norm.beta", &[d], 0.0)?;
    b.he("output.kernel", &[d, cfg.num_classes], d)?;
    b.fill("output.bias", &[cfg.num_classes], 0.0)?;

    Ok(ModelGraph { config: cfg.clone(), layers: layer_plan(cfg), params: b.params })
}

impl ModelGraph {
    pub fn config(&self) -> &PlantXViTConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn total_param_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    fn get(&self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    fn conv_view(&self, prefix: &str) -> Result<Conv2DParams> {
        Conv2DParams::new(
            self.get(&format!("{prefix}.kernel"))?,
            self.get(&format!("{prefix}.bias"))?,
            1,
            Padding::Same,
        )
    }

    fn inception_view(&self) -> Result<InceptionParams> {
        Ok(InceptionParams {
            config: self.config.inception,
            b1: self.conv_view("inception.b1")?,
            b2_reduce: self.conv_view("inception.b2.reduce")?,
            b2_h: self.conv_view("inception.b2.h")?,
            b2_v: self.conv_view("inception.b2.v")?,
            b3_reduce: self.conv_view("inception.b3.reduce")?,
            b3_mid: self.conv_view("inception.b3.mid")?,
            b3_h: self.conv_view("inception.b3.h")?,
            b3_v: self.conv_view("inception.b3.v")?,
            b4_proj: self.conv_view("inception.b4.proj")?,
        })
    }

    fn attention_view(&self, prefix: &str) -> Result<AttentionParams> {
        let heads = (0..self.config.heads)
            .map(|h| {
                Ok(AttentionHeadParams {
                    wq: self.get(&format!("{prefix}.h{h}.wq"))?,
                    bq: self.get(&format!("{prefix}.h{h}.bq"))?,
                    wk: self.get(&format!("{prefix}.h{h}.wk"))?,
                    bk: self.get(&format!("{prefix}.h{h}.bk"))?,
                    wv: self.get(&format!("{prefix}.h{h}.wv"))?,
                    bv: self.get(&format!("{prefix}.h{h}.bv"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionParams {
            heads,
            out_w: self.get(&format!("{prefix}.out.kernel"))?,
            out_b: self.get(&format!("{prefix}.out.bias"))?,
        })
    }

    fn block_view(&self, prefix: &str) -> Result<TransformerBlockParams> {
        Ok(TransformerBlockParams {
            ln1_gamma: self.get(&format!("{prefix}.ln1.gamma"))?,
            ln1_beta: self.get(&format!("{prefix}.ln1.beta"))?,
            attention: self.attention_view(&format!("{prefix}.attn"))?,
            ln2_gamma: self.get(&format!("{prefix}.ln2.gamma"))?,
            ln2_beta: self.get(&format!("{prefix}.ln2.beta"))?,
            fc1_w: self.get(&format!("{prefix}.mlp.fc1.kernel"))?,
            fc1_b: self.get(&format!("{prefix}.mlp.fc1.bias"))?,
            fc2_w: self.get(&format!("{prefix}.mlp.fc2.kernel"))?,
            fc2_b: self.get(&format!("{prefix}.mlp.fc2.bias"))?,
        })
    }

    /// Forward one `[S,S,3]` sample, optionally capturing every layer output.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        x: &Tensor,
        mut trace: Option<&mut Trace>,
    ) -> Result<ForwardOutput> {
        let s = self.config.input_size;
        if x.shape() != [s, s, 3] {
            return Err(Error::Shape(format!(
                "model expects [{s},{s},3] input, got {:?}",
                x.shape()
            )));
        }
        let mut capture = |name: &str, t: &Tensor| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.activations.push((name.to_string(), t.clone()));
            }
        };
        let mut cur = x.clone();
        capture("input", &cur);
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Input => continue,
                LayerKind::Conv { .. } => {
                    let p = self.conv_view(&layer.name)?;
                    let y = layers::conv2d(tape, &cur, &p)?;
                    cur = tape.relu(&y)?;
                }
                LayerKind::MaxPool => {
                    cur = layers::maxpool2d(tape, &cur, 2, 2)?;
                }
                LayerKind::Inception => {
                    let p = self.inception_view()?;
                    cur = layers::inception_forward(tape, &cur, &p)?;
                }
                LayerKind::Patches => {
                    cur = layers::extract_patches(tape, &cur, self.config.patch_size)?;
                }
                LayerKind::PatchEncoder => {
                    let p = PatchEncoderParams {
                        projection: self.get("patch_encoder.projection")?,
                        bias: self.get("patch_encoder.bias")?,
                        positions: self.get("patch_encoder.positions")?,
                    };
                    cur = layers::patch_encode(tape, &cur, &p)?;
                }
                LayerKind::Transformer => {
                    let p = self.block_view(&layer.name)?;
                    cur = layers::transformer_block(tape, &cur, &p)?;
                }
                LayerKind::FinalNorm => {
                    let gamma = self.get("norm.gamma")?;
                    let beta = self.get("norm.beta")?;
                    cur = tape.layer_norm(&cur, &gamma, &beta, LAYER_NORM_EPS)?;
                }
                LayerKind::GlobalPool => {
                    cur = layers::global_avg_pool_1d(tape, &cur)?;
                }
                LayerKind::Output => {
                    let w = self.get("output.kernel")?;
                    let b = self.get("output.bias")?;
                    let logits = layers::dense(tape, &cur, &w, &b)?;
                    capture("logits", &logits);
                    let probs = tape.softmax(&logits, 0)?;
                    capture("probs", &probs);
                    return Ok(ForwardOutput { logits, probs });
                }
            }
            capture(&layer.name, &cur);
        }
        Err(Error::Config("layer plan missing output layer".into()))
    }

    /// Copy sample `b` out of a `[B,S,S,3]` batch.
    pub fn slice_sample(batch: &Tensor, b: usize) -> Result<Tensor> {
        if batch.rank() != 4 {
            return Err(Error::Shape(format!("expected [B,H,W,C], got {:?}", batch.shape())));
        }
        let per = batch.len() / batch.shape()[0];
        if b >= batch.shape()[0] {
            return Err(Error::Invalid(format!("sample {b} out of range")));
        }
        Tensor::from_vec(
            &batch.shape()[1..],
            batch.data()[b * per..(b + 1) * per].to_vec(),
        )
    }
}

/// Batch prediction: rows are probability vectors.
pub fn predict(m: &ModelGraph, batch: &Tensor) -> Result<Tensor> {
    if batch.rank() != 4 || batch.shape()[3] != 3 {
        return Err(Error::Shape(format!("predict expects [B,H,W,3], got {:?}", batch.shape())));
    }
    let bsz = batch.shape()[0];
    let c = m.config().num_classes;
    let mut out = Vec::with_capacity(bsz * c);
    for b in 0..bsz {
        let sample = ModelGraph::slice_sample(batch, b)?;
        let mut tape = GradTape::no_grad();
        let fwd = m.forward(&mut tape, &sample, None)?;
        out.extend_from_slice(fwd.probs.data());
    }
    Tensor::from_vec(&[bsz, c], out)
}

// ── Parameter table ───────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamRow {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    /// Published reference count when the row maps onto the reference table.
    pub table2: Option<usize>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: usize,
    /// Total minus the inception row.
    pub fixed_sum: usize,
    pub table2_total: usize,
}

/// Per-layer parameter counts with output shapes; the reference column is
/// populated wherever the configured row has a published counterpart.
pub fn count_params(m: &ModelGraph) -> ParamTable {
    let cfg = m.config();
    let s = cfg.input_size;
    let d = cfg.embed_dim;
    let n2 = cfg.num_patches();
    let canonical_block = cfg.embed_dim == 16 && cfg.heads == 4 && cfg.mlp_hidden == 32;
    let mut rows = Vec::new();
    for layer in &m.layers {
        let (shape, params, table2): (Vec<usize>, usize, Option<usize>) = match layer.kind {
            LayerKind::Input => (vec![s, s, 3], 0, Some(0)),
            LayerKind::Conv { out_ch } => {
                let kernel = m.param(&format!("{}.kernel", layer.name)).expect("conv kernel");
                let count = kernel.len() + out_ch;
                let side = if layer.name.starts_with("vgg1") { s } else { s / 2 };
                (vec![side, side, out_ch], count, Some(count))
            }
            LayerKind::MaxPool => {
                let (side, ch) = if layer.name.starts_with("vgg1") { (s / 2, 64) } else { (s / 4, 128) };
                (vec![side, side, ch], 0, Some(0))
            }
            LayerKind::Inception => (
                vec![s / 4, s / 4, INCEPTION_OUT_CHANNELS],
                cfg.inception.param_count(128),
                Some(TABLE2_INCEPTION),
            ),
            LayerKind::Patches => (vec![n2, cfg.patch_len()], 0, Some(0)),
            LayerKind::PatchEncoder => {
                let count = layers::patch_encoder_param_count(cfg.patch_len(), n2, d);
                let reference = (s == 224 && cfg.patch_size == 5 && d == 16).then_some(206_752);
                (vec![n2, d], count, reference)
            }
            LayerKind::Transformer => {
                let count =
                    layers::transformer_block_param_count(d, cfg.heads, cfg.key_dim(), cfg.mlp_hidden);
                (vec![n2, d], count, canonical_block.then_some(5440))
            }
            LayerKind::FinalNorm => (vec![n2, d], 2 * d, (d == 16).then_some(32)),
            LayerKind::GlobalPool => (vec![d], 0, Some(0)),
            LayerKind::Output => {
                let count = layers::dense_param_count(d, cfg.num_classes);
                let reference = (d == 16 && cfg.num_classes == 4).then_some(68);
                (vec![cfg.num_classes], count, reference)
            }
        };
        rows.push(ParamRow { name: layer.name.clone(), output_shape: shape, params, table2 });
    }
    let total: usize = rows.iter().map(|r| r.params).sum();
    let inception: usize = rows
        .iter()
        .find(|r| r.name == "inception")
        .map(|r| r.params)
        .unwrap_or(0);
    ParamTable { rows, total, fixed_sum: total - inception, table2_total: TABLE2_TOTAL }
}

// ── FLOPs ─────────────────────────────────────────────────────────────────

/// FLOPs of one forward pass at the configured input size, counting matrix
/// multiplies only at 2 FLOPs per multiply-accumulate.
pub fn count_flops(m: &ModelGraph) -> u64 {
    let cfg = m.config();
    let s = cfg.input_size as u64;
    let conv = |kh: u64, kw: u64, cin: u64, cout: u64, side: u64| 2 * kh * kw * cin * cout * side * side;
    let mut flops = 0u64;
    // VGG front
    flops += conv(3, 3, 3, 64, s);
    flops += conv(3, 3, 64, 64, s);
    flops += conv(3, 3, 64, 128, s / 2);
    flops += conv(3, 3, 128, 128, s / 2);
    // inception at s/4
    let f = s / 4;
    let inc = &cfg.inception;
    flops += conv(1, 1, 128, inc.b1 as u64, f);
    flops += conv(1, 1, 128, inc.b2_reduce as u64, f);
    flops += conv(1, 3, inc.b2_reduce as u64, inc.b2 as u64, f);
    flops += conv(3, 1, inc.b2_reduce as u64, inc.b2 as u64, f);
    flops += conv(1, 1, 128, inc.b3_reduce as u64, f);
    flops += conv(3, 3, inc.b3_reduce as u64, inc.b3_mid as u64, f);
    flops += conv(1, 3, inc.b3_mid as u64, inc.b3 as u64, f);
    flops += conv(3, 1, inc.b3_mid as u64, inc.b3 as u64, f);
    flops += conv(1, 1, 128, inc.b4 as u64, f);
    // patch projection
    let n2 = cfg.num_patches() as u64;
    let d = cfg.embed_dim as u64;
    let kd = cfg.key_dim() as u64;
    let h = cfg.heads as u64;
    flops += 2 * cfg.patch_len() as u64 * d * n2;
    // transformer stack
    let per_block = 3 * h * 2 * n2 * d * kd      // Q,K,V projections
        + h * 2 * n2 * n2 * kd                   // Q K^T
        + h * 2 * n2 * n2 * kd                   // weights · V
        + 2 * n2 * (h * kd) * d                  // output projection
        + 2 * n2 * d * cfg.mlp_hidden as u64     // MLP in
        + 2 * n2 * cfg.mlp_hidden as u64 * d; // MLP out
    flops += cfg.transformer_depth as u64 * per_block;
    // classifier head
    flops += 2 * d * cfg.num_classes as u64;
    flops
}

// ── Checkpoints ───────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"PXVT";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Exact on-disk size of a checkpoint of this model.
pub fn checkpoint_byte_size(m: &ModelGraph) -> u64 {
    let mut size = 4 + 4 + 4u64;
    for (name, t) in m.params() {
        size += 2 + name.len() as u64 + 1 + 1 + 8 * t.rank() as u64 + 4 * t.len() as u64;
    }
    size
}

/// Write the parameter store: magic, version, tensor count, then per tensor
/// name length (u16), UTF-8 name, dtype code, rank, dims as u64, raw
/// row-major little-endian values. No padding between records.
pub fn save_checkpoint(m: &ModelGraph, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::with_capacity(checkpoint_byte_size(m) as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.params().len() as u32).to_le_bytes());
    for (name, t) in m.params() {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_checkpoint_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected PXVT".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype} for {name}")));
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name.clone(), Tensor::from_vec(&shape, data)?));
    }
    if cur.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint records".into()));
    }
    Ok(tensors)
}

/// Build a model from `cfg` and restore every parameter from the file.
/// The file must carry exactly the parameters the configuration defines.
pub fn load_checkpoint(path: &Path, cfg: &PlantXViTConfig) -> Result<ModelGraph> {
    let mut model = build_model(cfg)?;
    let tensors = read_checkpoint_tensors(path)?;
    let mut seen = 0usize;
    for (name, tensor) in tensors {
        let slot = model
            .params
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} not in model")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "shape mismatch for {name}: file {:?}, model {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        model
            .params
            .get_mut(&name)
            .expect("slot checked")
            .replace_data(tensor.data().to_vec());
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint restored {seen} of {} parameters",
            model.params.len()
        )));
    }
    Ok(model)
}

/// Restore only parameters whose name starts with `prefix` (for example
/// `vgg` to transfer the pre-trained convolutional front). Remaining
/// parameters keep their seeded initialization. Returns how many tensors
/// were loaded.
pub fn load_checkpoint_prefix(m: &mut ModelGraph, path: &Path, prefix: &str) -> Result<usize> {
    let tensors = read_checkpoint_tensors(path)?;
    let mut loaded = 0usize;
    for (name, tensor) in tensors {
        if !name.starts_with(prefix) {
            continue;
        }
        let slot = m
            .params
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} not in model")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "shape mismatch for {name}: file {:?}, model {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        m.params
            .get_mut(&name)
            .expect("slot checked")
            .replace_data(tensor.data().to_vec());
        loaded += 1;
    }
    Ok(loaded)
}
