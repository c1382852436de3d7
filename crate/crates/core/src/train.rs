//! AdamW optimization with cosine annealing, gradient clipping, gradient
//! accumulation and early stopping on validation accuracy.

use crate::nnet::{Classifier, HeadArchitecture, Mode, NetError};
use crate::scalar::{argmax, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient at parameter {index} (step {step})")]
    NonFiniteGradient { index: usize, step: u64 },
    #[error("non-finite training loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    /// Floor of the cosine schedule.
    pub eta_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.26e-4,
            weight_decay: 1.52e-6,
            epochs: 75,
            batch_size: 16,
            accumulation_steps: 20,
            clip_norm: 1.0,
            patience: 5,
            seed: 0,
            eta_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation_steps == 0 || self.patience == 0 {
            return bad("epochs, batch_size, accumulation_steps and patience must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(0.0..=self.learning_rate).contains(&self.eta_min) {
            return bad(format!("eta_min {} must lie in [0, learning_rate]", self.eta_min));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("betas must lie in [0,1) and epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self, learning_rate: f64) -> AdamHyper {
        AdamHyper { learning_rate, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamHyper { learning_rate, weight_decay, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![S::zero(); len], v: vec![S::zero(); len], step: 0 }
    }
}

/// One AdamW update: bias-corrected Adam step plus decoupled weight decay,
/// `w ← w·(1 − αλ) − α·m̂/(√v̂ + ε)`.
pub fn adamw_step<S: Scalar>(params: &mut [S], grads: &[S], state: &mut AdamState<S>, hp: &AdamHyper) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state length differs");
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index, step: state.step + 1 });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(hp.beta1), S::of(hp.beta2));
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let lr = S::of(hp.learning_rate);
    let decay = S::one() - lr * S::of(hp.weight_decay);
    let eps = S::of(hp.epsilon);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Cosine annealing from `eta_max` at `step = 0` to `eta_min` at `step = total`.
pub fn cosine_lr(step: usize, total: usize, eta_max: f64, eta_min: f64) -> f64 {
    assert!(total > 0, "cosine schedule needs a positive horizon");
    if step == 0 {
        return eta_max;
    }
    if step >= total {
        return eta_min;
    }
    let progress = step as f64 / total as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over gradient buffers.
pub fn global_norm<S: Scalar>(grads: &[Vec<S>]) -> S {
    grads.iter().flatten().map(|&g| g * g).sum::<S>().sqrt()
}

/// Scales all buffers by `clip_norm / norm` when their global norm exceeds
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients<S: Scalar>(grads: &mut [Vec<S>], clip_norm: f64) -> S {
    let norm = global_norm(grads);
    let clip = S::of(clip_norm);
    if norm > clip {
        let scale = clip / norm;
        grads.iter_mut().flatten().for_each(|g| *g = *g * scale);
    }
    norm
}

/// Inputs with class targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<S> {
    pub inputs: Vec<Vec<S>>,
    pub targets: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(inputs: Vec<Vec<S>>, targets: Vec<usize>) -> Self {
        assert_eq!(inputs.len(), targets.len(), "inputs and targets differ in length");
        Dataset { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Mean loss and mean gradient over one mini-batch.
pub fn batch_gradient<S: Scalar>(
    model: &Classifier<S>,
    data: &Dataset<S>,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(S, Vec<Vec<S>>), TrainError> {
    let mut grads = model.zero_grads();
    let mut loss = S::zero();
    for &i in batch {
        loss = loss + model.accumulate(&data.inputs[i], data.targets[i], Mode::Train, rng, &mut grads)?;
    }
    let n = S::of(batch.len().max(1) as f64);
    grads.iter_mut().flatten().for_each(|g| *g = *g / n);
    Ok((loss / n, grads))
}

/// Average of the per-batch mean gradients over several mini-batches.
///
/// With equal-sized batches this equals the mean gradient of their union,
/// so `k` accumulated batches of size `b` step like one batch of `k·b`.
pub fn accumulated_gradient<S: Scalar>(
    model: &Classifier<S>,
    data: &Dataset<S>,
    batches: &[&[usize]],
    rng: &mut ChaCha8Rng,
) -> Result<(S, Vec<Vec<S>>), TrainError> {
    let mut total = model.zero_grads();
    let mut loss = S::zero();
    for batch in batches {
        let (l, g) = batch_gradient(model, data, batch, rng)?;
        loss = loss + l;
        for (t, gi) in total.iter_mut().zip(&g) {
            t.iter_mut().zip(gi).for_each(|(a, &b)| *a = *a + b);
        }
    }
    let k = S::of(batches.len().max(1) as f64);
    total.iter_mut().flatten().for_each(|g| *g = *g / k);
    Ok((loss / k, total))
}

/// Fraction of samples whose argmax class equals the target.
pub fn accuracy<S: Scalar>(model: &Classifier<S>, data: &Dataset<S>) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, &t) in data.inputs.iter().zip(&data.targets) {
        if argmax(&model.predict_proba(x)?) == Some(t) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
}

impl EpochRecord {
    /// `epoch,train_loss,val_acc,lr` progress line.
    pub fn log_line(&self) -> String {
        let val = self.val_accuracy.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!("{},{:.6},{},{:e}", self.epoch, self.train_loss, val, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub optimizer_steps: u64,
    pub early_stopped: bool,
    pub warnings: Vec<String>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains a fresh head of `arch` initialized from `config.seed`.
pub fn train_model<S: Scalar>(
    arch: HeadArchitecture,
    train: &Dataset<S>,
    val: &Dataset<S>,
    config: &TrainConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<(Classifier<S>, TrainReport), TrainError> {
    let model = Classifier::new(arch, config.seed)?;
    train_from(model, train, val, config, progress)
}

/// Trains an initialized head.
///
/// Each epoch shuffles the training set with a seed derived from
/// `(config.seed, epoch)`, averages the gradients of `accumulation_steps`
/// mini-batches per optimizer step, clips, and applies AdamW with a cosine
/// learning-rate schedule over all planned steps. Training stops once
/// validation accuracy has not strictly improved for `patience` epochs; the
/// parameters of the best epoch are returned.
pub fn train_from<S: Scalar>(
    mut model: Classifier<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(Classifier<S>, TrainReport), TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let classes = model.num_classes();
    if let Some(&bad) = train.targets.iter().chain(&val.targets).find(|&&t| t >= classes) {
        return Err(NetError::ShapeMismatch { expected: classes, found: bad + 1 }.into());
    }
    let mut warnings = Vec::new();
    let seen: BTreeSet<usize> = train.targets.iter().copied().collect();
    let unseen: BTreeSet<usize> = val.targets.iter().copied().filter(|t| !seen.contains(t)).collect();
    if !unseen.is_empty() {
        let msg = format!("{} validation classes have no training samples: {:?}", unseen.len(), unseen);
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(config.accumulation_steps);
    let total_steps = steps_per_epoch * config.epochs;
    let mut states: Vec<AdamState<S>> = model.nets.iter().map(|n| AdamState::new(n.param_count())).collect();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x0d50_7a11));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Classifier<S>)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut early_stopped = false;

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch)));
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut loss_sum = 0.0;
        let mut lr = config.learning_rate;
        for group in batches.chunks(config.accumulation_steps) {
            let (loss, mut grads) = accumulated_gradient(&model, train, group, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            loss_sum += loss.as_f64() * group.len() as f64;
            clip_gradients(&mut grads, config.clip_norm);
            lr = cosine_lr(step, total_steps, config.learning_rate, config.eta_min);
            let hp = config.adam(lr);
            for ((net, state), g) in model.nets.iter_mut().zip(states.iter_mut()).zip(&grads) {
                adamw_step(net.params_mut(), g, state, &hp)?;
            }
            step += 1;
        }
        let train_loss = loss_sum / batches.len() as f64;
        let val_accuracy = if val.is_empty() { None } else { Some(accuracy(&model, val)?) };
        let record = EpochRecord { epoch, train_loss, val_accuracy, lr };
        progress(&record);
        records.push(record);

        match val_accuracy {
            Some(acc) => {
                if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                    best = Some((acc, epoch, model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        early_stopped = true;
                        break;
                    }
                }
            }
            None => best = Some((f64::NAN, epoch, model.clone())),
        }
    }
    let stopped_epoch = records.len();
    let (best_acc, best_epoch, best_model) = best.expect("at least one epoch ran");
    let report = TrainReport {
        epochs: records,
        stopped_epoch,
        best_epoch,
        best_val_accuracy: if val.is_empty() { None } else { Some(best_acc) },
        optimizer_steps: step as u64,
        early_stopped,
        warnings,
    };
    Ok((best_model, report))
}
