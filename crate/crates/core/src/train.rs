//! Training: the categorical cross-entropy loss, the five optimizers of the
//! sweep (SGD, RMSProp, Adamax, Adam, Nadam), stratified dataset splitting
//! and the epoch loop. The loop is single-writer over model parameters and
//! fully seeded, so identical configurations reproduce identical
//! trajectories bitwise.

use std::collections::HashMap;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{GradTape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
    Adamax,
    Adam,
    Nadam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::RmsProp,
        OptimizerKind::Adamax,
        OptimizerKind::Adam,
        OptimizerKind::Nadam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adamax => "adamax",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Nadam => "nadam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adamax" => Ok(OptimizerKind::Adamax),
            "adam" => Ok(OptimizerKind::Adam),
            "nadam" => Ok(OptimizerKind::Nadam),
            other => Err(Error::Config(format!("unknown optimizer kind {other:?}"))),
        }
    }
}

/// Optimizer state: hyperparameters plus per-parameter moment buffers,
/// keyed by parameter name so they survive tensor replacement.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub rho: f32,
    pub eps: f32,
    pub momentum: f32,
    step: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f32) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            eps: 1e-7,
            momentum: 0.0,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one optimizer step over named gradients. Parameters without an
/// entry in `grads` are left untouched.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut indexmap::IndexMap<String, Tensor>,
    grads: &HashMap<String, Vec<f32>>,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let lr = state.learning_rate;
    let (b1, b2) = (state.beta1, state.beta2);
    // bias corrections computed in f64 to keep long runs accurate
    let bc1 = 1.0 - (b1 as f64).powi(t as i32);
    let bc2 = 1.0 - (b2 as f64).powi(t as i32);

    for (name, param) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.len() != param.len() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} elements, parameter has {}",
                g.len(),
                param.len()
            )));
        }
        let mut data = param.data().to_vec();
        match state.kind {
            OptimizerKind::Sgd => {
                if state.momentum == 0.0 {
                    for (p, &gi) in data.iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                } else {
                    let buf = state
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for ((p, &gi), b) in data.iter_mut().zip(g).zip(buf.iter_mut()) {
                        *b = state.momentum * *b + gi;
                        *p -= lr * *b;
                    }
                }
            }
            OptimizerKind::RmsProp => {
                let v = state
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for ((p, &gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = state.rho * *vi + (1.0 - state.rho) * gi * gi;
                    *p -= lr * gi / (vi.sqrt() + state.eps);
                }
            }
            OptimizerKind::Adam => {
                let m = state
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let v = state
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (((p, &gi), mi), vi) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let m_hat = (*mi as f64 / bc1) as f32;
                    let v_hat = (*vi as f64 / bc2) as f32;
                    *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
                }
            }
            OptimizerKind::Adamax => {
                let m = state
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let u = state
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (((p, &gi), mi), ui) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(u.iter_mut()) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *ui = (b2 * *ui).max(gi.abs());
                    *p -= (lr as f64 / bc1) as f32 * *mi / (*ui + state.eps);
                }
            }
            OptimizerKind::Nadam => {
                let m = state
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let v = state
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (((p, &gi), mi), vi) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let m_hat = (*mi as f64 / bc1) as f32;
                    let v_hat = (*vi as f64 / bc2) as f32;
                    // Nesterov-corrected first moment
                    let m_bar = b1 * m_hat + (1.0 - b1) * (gi as f64 / bc1) as f32;
                    *p -= lr * m_bar / (v_hat.sqrt() + state.eps);
                }
            }
        }
        param.replace_data(data);
    }
    Ok(())
}

// ── Loss ──────────────────────────────────────────────────────────────────

/// Batch-mean categorical cross-entropy: `-(1/n) sum y_i log yhat_i`,
/// predictions clipped to `[1e-7, 1-1e-7]` before the log.
pub fn cross_entropy(y_true: &Tensor, y_pred: &Tensor) -> Result<f64> {
    if y_true.shape() != y_pred.shape() || y_true.rank() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy expects matching [B,C], got {:?} and {:?}",
            y_true.shape(),
            y_pred.shape()
        )));
    }
    let clip = crate::tensor::CLIP_EPS;
    let b = y_true.shape()[0];
    let mut total = 0.0f64;
    for (t, p) in y_true.data().iter().zip(y_pred.data()) {
        let clamped = (*p as f64).clamp(clip, 1.0 - clip);
        total -= *t as f64 * clamped.ln();
    }
    Ok(total / b as f64)
}

// ── Splitting ─────────────────────────────────────────────────────────────

/// Stratified, seeded, disjoint and exhaustive split. Per class, counts are
/// floors of the fractions; leftover samples go to the training split.
pub fn split_dataset(
    ds: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    ds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..ds.num_classes() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = (fv * n as f64).floor() as usize;
        let n_test = (fe * n as f64).floor() as usize;
        let n_train = n - n_val - n_test; // floor(train) plus any remainder
        parts[0].extend(&idx[..n_train]);
        parts[1].extend(&idx[n_train..n_train + n_val]);
        parts[2].extend(&idx[n_train + n_val..]);
    }
    let build = |indices: &[usize]| DatasetManifest {
        samples: indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        class_names: ds.class_names.clone(),
    };
    Ok((build(&parts[0]), build(&parts[1]), build(&parts[2])))
}

// ── Epoch loop ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub seed: u64,
    pub splits: (f64, f64, f64),
    /// Global-norm gradient clipping; off by default.
    pub grad_clip: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            seed: 0,
            splits: (0.8, 0.1, 0.1),
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

/// Owns the split datasets, optimizer state and epoch RNG for one run.
pub struct Trainer<'a> {
    model: &'a mut ModelGraph,
    train_set: DatasetManifest,
    val_set: DatasetManifest,
    test_set: DatasetManifest,
    optimizer: OptimizerState,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut ModelGraph, ds: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if ds.num_classes() != model.config().num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model expects {}",
                ds.num_classes(),
                model.config().num_classes
            )));
        }
        let (train_set, val_set, test_set) = split_dataset(ds, cfg.splits, cfg.seed)?;
        if train_set.is_empty() {
            return Err(Error::Data("train split is empty".into()));
        }
        let optimizer = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
        Ok(Trainer {
            model,
            train_set,
            val_set,
            test_set,
            optimizer,
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
        })
    }

    pub fn train_set(&self) -> &DatasetManifest {
        &self.train_set
    }

    pub fn val_set(&self) -> &DatasetManifest {
        &self.val_set
    }

    pub fn test_set(&self) -> &DatasetManifest {
        &self.test_set
    }

    pub fn model(&self) -> &ModelGraph {
        self.model
    }

    /// Forward/backward over seeded batches, one optimizer step per batch.
    /// Training loss/accuracy are running measures over the epoch.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        self.epoch += 1;
        let n = self.train_set.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let inv_batch = 1.0 / batch.len() as f64;
            let mut acc: HashMap<String, Vec<f32>> = HashMap::new();
            for &i in batch {
                let sample = &self.train_set.samples[i];
                let mut tape = GradTape::new();
                let fwd = self.model.forward(&mut tape, &sample.pixels, None)?;
                let loss = tape.nll_row(&fwd.probs, sample.label)?;
                let scaled = tape.scale(&loss, inv_batch)?;
                let grads = tape.backward(&scaled)?;
                for (name, param) in self.model.params() {
                    if let Some(g) = grads.raw(param.id()) {
                        match acc.get_mut(name) {
                            Some(buf) => {
                                for (b, &gi) in buf.iter_mut().zip(g) {
                                    *b += gi;
                                }
                            }
                            None => {
                                acc.insert(name.clone(), g.to_vec());
                            }
                        }
                    }
                }
                let sample_loss = loss.item()? as f64;
                if !sample_loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {} on {}",
                        self.epoch, sample.source
                    )));
                }
                loss_sum += sample_loss;
                if argmax(fwd.probs.data()) == sample.label {
                    correct += 1;
                }
            }
            if let Some(max_norm) = self.cfg.grad_clip {
                clip_global_norm(&mut acc, max_norm);
            }
            optimizer_step(&mut self.optimizer, self.model.params_mut(), &acc)?;
        }

        let (val_loss, val_acc) = if self.val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_split(self.model, &self.val_set)?;
            (Some(l), Some(a))
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_loss,
            val_acc,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn clip_global_norm(grads: &mut HashMap<String, Vec<f32>>, max_norm: f32) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm as f64 && norm > 0.0 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Mean clipped NLL and accuracy of a model over a manifest (no gradients).
pub fn evaluate_split(model: &ModelGraph, ds: &DatasetManifest) -> Result<(f64, f64)> {
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for sample in &ds.samples {
        let mut tape = GradTape::no_grad();
        let fwd = model.forward(&mut tape, &sample.pixels, None)?;
        let nll = tape.nll_row(&fwd.probs, sample.label)?;
        loss += nll.item()? as f64;
        if argmax(fwd.probs.data()) == sample.label {
            correct += 1;
        }
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Train for `cfg.epochs` epochs (or until `on_epoch` returns `false`),
/// streaming records to the callback.
pub fn fit(
    model: &mut ModelGraph,
    ds: &DatasetManifest,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::new(model, ds, cfg)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let record = trainer.run_epoch()?;
        let go_on = on_epoch(&record);
        records.push(record);
        if !go_on {
            break;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::model::{build_model, PlantXViTConfig};
    use indexmap::IndexMap;

    fn one_param(value: &[f32]) -> IndexMap<String, Tensor> {
        let mut map = IndexMap::new();
        map.insert(
            "w".to_string(),
            Tensor::from_vec(&[value.len()], value.to_vec()).unwrap().with_requires_grad(),
        );
        map
    }

    fn grads_of(value: &[f32]) -> HashMap<String, Vec<f32>> {
        let mut map = HashMap::new();
        map.insert("w".to_string(), value.to_vec());
        map
    }

    #[test]
    fn sgd_definition() {
        let mut params = one_param(&[1.0]);
        let mut state = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        optimizer_step(&mut state, &mut params, &grads_of(&[0.5])).unwrap();
        assert!((params["w"].data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut params = one_param(&[0.0]);
        let mut state = OptimizerState::new(OptimizerKind::Adam, 1e-4);
        optimizer_step(&mut state, &mut params, &grads_of(&[1.0])).unwrap();
        let delta = params["w"].data()[0] as f64;
        // m_hat = 1, v_hat = 1 after bias correction: step = lr/(1+eps)
        let expected = -1e-4 / (1.0 + 1e-7);
        assert!((delta - expected).abs() / expected.abs() < 1e-6, "delta {delta}");
        assert!((delta + 9.9999e-5).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_is_identity_for_all_kinds() {
        for kind in OptimizerKind::ALL {
            let mut params = one_param(&[0.7, -0.3]);
            let before = params["w"].clone();
            let mut state = OptimizerState::new(kind, 0.0);
            optimizer_step(&mut state, &mut params, &grads_of(&[0.5, -2.0])).unwrap();
            optimizer_step(&mut state, &mut params, &grads_of(&[-1.5, 0.25])).unwrap();
            assert_eq!(params["w"], before, "{kind:?}");
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        for kind in OptimizerKind::ALL {
            let mut params = one_param(&[0.7]);
            let mut state = OptimizerState::new(kind, 0.1);
            optimizer_step(&mut state, &mut params, &grads_of(&[0.0])).unwrap();
            let drift = (params["w"].data()[0] - 0.7).abs();
            assert!(drift <= 1e-7, "{kind:?} drifted by {drift}");
        }
    }

    #[test]
    fn adaptive_kinds_are_scale_invariant() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Nadam, OptimizerKind::Adamax] {
            for &g in &[0.01f32, 0.5, 3.0] {
                let step_of = |grad: f32| {
                    let mut params = one_param(&[0.0]);
                    let mut state = OptimizerState::new(kind, 1e-3);
                    optimizer_step(&mut state, &mut params, &grads_of(&[grad])).unwrap();
                    params["w"].data()[0]
                };
                let a = step_of(g);
                let b = step_of(10.0 * g);
                assert!(a.signum() == b.signum(), "{kind:?} direction flipped");
                let ratio = (b / a) as f64;
                assert!((0.99..=1.01).contains(&ratio), "{kind:?} ratio {ratio} at g={g}");
            }
        }
    }

    #[test]
    fn rmsprop_follows_stated_update() {
        let mut params = one_param(&[1.0]);
        let mut state = OptimizerState::new(OptimizerKind::RmsProp, 0.01);
        optimizer_step(&mut state, &mut params, &grads_of(&[2.0])).unwrap();
        // v = 0.1*4 = 0.4; p -= 0.01*2/(sqrt(0.4)+1e-7)
        let expected = 1.0 - 0.01 * 2.0 / (0.4f32.sqrt() + 1e-7);
        assert!((params["w"].data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn unknown_kind_is_a_parse_error() {
        assert!(OptimizerKind::from_str("adagrad").is_err());
        assert_eq!(OptimizerKind::from_str("NAdam").unwrap(), OptimizerKind::Nadam);
    }

    #[test]
    fn cross_entropy_fixtures() {
        // perfect prediction
        let t = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let p = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&t, &p).unwrap() <= 1e-6);
        // uniform 4-class
        let t = Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let p = Tensor::from_vec(&[1, 4], vec![0.25; 4]).unwrap();
        let l = cross_entropy(&t, &p).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-9);
        assert!((l - 1.386294).abs() < 1e-6);
        // batch mean of the two
        let t = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let p = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]).unwrap();
        let both = cross_entropy(&t, &p).unwrap();
        let single = cross_entropy(
            &Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            &Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert!((both - (single + l) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_tape_loss() {
        let probs = Tensor::from_vec(&[3], vec![0.2, 0.5, 0.3]).unwrap();
        let mut tape = GradTape::no_grad();
        let node = tape.nll_row(&probs, 1).unwrap();
        let t = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let p = Tensor::from_vec(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        let batch = cross_entropy(&t, &p).unwrap();
        assert!((node.item().unwrap() as f64 - batch).abs() < 1e-6);
    }

    #[test]
    fn split_exact_and_stratified() {
        let ds = synth_dataset(&SynthSpec { classes: 2, per_class: 50, image_size: 8, seed: 1 }).unwrap();
        let (train, val, test) = split_dataset(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 10);
        assert_eq!(test.len(), 10);
        assert_eq!(train.per_class_counts(), vec![40, 40]);
        assert_eq!(val.per_class_counts(), vec![5, 5]);
        assert_eq!(test.per_class_counts(), vec![5, 5]);
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let ds = synth_dataset(&SynthSpec { classes: 2, per_class: 16, image_size: 8, seed: 1 }).unwrap();
        let (train, val, test) = split_dataset(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(train.per_class_counts(), vec![14, 14]);
        assert_eq!(val.per_class_counts(), vec![1, 1]);
        assert_eq!(test.per_class_counts(), vec![1, 1]);
    }

    #[test]
    fn split_deterministic_disjoint_exhaustive() {
        let ds = synth_dataset(&SynthSpec { classes: 3, per_class: 11, image_size: 8, seed: 5 }).unwrap();
        let (t1, v1, e1) = split_dataset(&ds, (0.6, 0.2, 0.2), 42).unwrap();
        let (t2, v2, e2) = split_dataset(&ds, (0.6, 0.2, 0.2), 42).unwrap();
        let sources = |m: &DatasetManifest| m.samples.iter().map(|s| s.source.clone()).collect::<Vec<_>>();
        assert_eq!(sources(&t1), sources(&t2));
        assert_eq!(sources(&v1), sources(&v2));
        assert_eq!(sources(&e1), sources(&e2));

        let mut all = sources(&t1);
        all.extend(sources(&v1));
        all.extend(sources(&e1));
        all.sort();
        let mut expected = sources(&ds);
        expected.sort();
        assert_eq!(all.len(), ds.len());
        all.dedup();
        assert_eq!(all, expected); // disjoint and exhaustive

        let other = split_dataset(&ds, (0.6, 0.2, 0.2), 43).unwrap();
        assert_ne!(sources(&other.0), sources(&t1));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = synth_dataset(&SynthSpec { classes: 2, per_class: 4, image_size: 8, seed: 1 }).unwrap();
        assert!(split_dataset(&ds, (0.5, 0.2, 0.2), 1).is_err());
    }

    fn tiny_cfg() -> PlantXViTConfig {
        PlantXViTConfig { input_size: 16, num_classes: 2, patch_size: 1, seed: 11, ..Default::default() }
    }

    fn tiny_ds() -> DatasetManifest {
        synth_dataset(&SynthSpec { classes: 2, per_class: 5, image_size: 16, seed: 11 }).unwrap()
    }

    #[test]
    fn zero_lr_training_leaves_model_and_loss_constant() {
        let mut model = build_model(&tiny_cfg()).unwrap();
        let before: Vec<(String, Tensor)> =
            model.params().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            splits: (1.0, 0.0, 0.0),
            seed: 11,
            ..Default::default()
        };
        let records = fit(&mut model, &tiny_ds(), &cfg, |_| true).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].train_loss, records[1].train_loss);
        for (name, t) in before {
            assert_eq!(&t, model.param(&name).unwrap(), "{name}");
        }
    }

    #[test]
    fn training_trajectory_is_seed_reproducible() {
        let run = || {
            let mut model = build_model(&tiny_cfg()).unwrap();
            let cfg = TrainConfig { epochs: 3, seed: 21, learning_rate: 1e-3, ..Default::default() };
            fit(&mut model, &tiny_ds(), &cfg, |_| true).unwrap()
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.train_acc, rb.train_acc);
            assert_eq!(ra.val_loss.map(f64::to_bits), rb.val_loss.map(f64::to_bits));
        }
    }

    #[test]
    fn small_sgd_step_does_not_increase_fixed_batch_loss() {
        let mut model = build_model(&tiny_cfg()).unwrap();
        let ds = tiny_ds();
        let loss_before = evaluate_split(&model, &ds).unwrap().0;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: ds.len(),
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-6,
            splits: (1.0, 0.0, 0.0),
            seed: 11,
            ..Default::default()
        };
        fit(&mut model, &ds, &cfg, |_| true).unwrap();
        let loss_after = evaluate_split(&model, &ds).unwrap().0;
        assert!(loss_after <= loss_before + 1e-9, "{loss_before} -> {loss_after}");
    }

    #[test]
    fn loss_decreases_on_learnable_synth_data() {
        let mut model = build_model(&tiny_cfg()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 1e-3,
            splits: (1.0, 0.0, 0.0),
            seed: 11,
            ..Default::default()
        };
        let records = fit(&mut model, &tiny_ds(), &cfg, |_| true).unwrap();
        assert!(records.last().unwrap().train_loss < records[0].train_loss);
    }

    #[test]
    fn grad_clip_caps_update_size() {
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), vec![3.0f32, 4.0]);
        clip_global_norm(&mut grads, 1.0);
        let norm: f32 = grads["a"].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
