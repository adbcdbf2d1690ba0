//! Mini-batch Adam training with a held-out validation split and early stopping.
//!
//! All randomness is derived from `TrainConfig::seed`: substream 0 shuffles
//! the train/validation split, substream `e` shuffles epoch `e` (1-based).
//! Each epoch shuffles the same canonical training order, so a run resumed
//! after `k` epochs sees exactly the batches an uninterrupted run would.

use std::io::Write;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_indices, EvalReport};
use crate::nn::{ArchConfig, Gradients, MultiOutputModel};
use crate::optim::{adam_step, combined_loss, softmax_ce_grad, AdamConfig, AdamState, HeadWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub head_weights: HeadWeights,
    pub patience: usize,
    pub min_delta: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            head_weights: HeadWeights::default(),
            patience: 5,
            min_delta: 1e-4,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie strictly between 0 and 1");
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return bad("min_delta must be non-negative");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Training history row; `epoch` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_base: f64,
    pub train_exp: f64,
    pub val_total: f64,
    pub val_base_acc: f64,
    pub val_exp_acc: f64,
}

/// Validation metrics the trainer monitors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub total_loss: f64,
    pub base_accuracy: f64,
    pub exp_accuracy: f64,
}

impl From<&EvalReport> for Validation {
    fn from(r: &EvalReport) -> Self {
        Validation {
            total_loss: r.mean_loss,
            base_accuracy: r.base_accuracy,
            exp_accuracy: r.exp_accuracy,
        }
    }
}

/// Tracks the best validation loss and how long it has been since a real improvement.
///
/// The restored parameters follow every strict decrease, while the patience
/// counter only resets on a decrease of more than `min_delta`, so the returned
/// parameters are never worse than any earlier epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    reference: f64,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    /// The loss is the lowest seen so far.
    pub is_best: bool,
    /// Patience is exhausted.
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper {
            patience,
            min_delta,
            best: f64::INFINITY,
            reference: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Observation {
        let is_best = loss < self.best;
        if is_best {
            self.best = loss;
        }
        if loss < self.reference - self.min_delta {
            self.reference = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            is_best,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Optimiser position needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub adam: AdamState,
    pub epochs_completed: usize,
}

/// Deterministic train/validation split of `n` samples.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to hold out a validation set, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::substream(seed, 0).shuffle(&mut order);
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let train = order.split_off(n_val);
    Ok((train, order))
}

/// Training order for `epoch` (1-based).
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    Rng::substream(seed, epoch as u64).shuffle(&mut order);
    order
}

fn check_dataset(model: &MultiOutputModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (nb, ne) = (model.base_classes(), model.exp_classes());
    for (i, s) in data.samples.iter().enumerate() {
        let (label, classes) = if s.base_label >= nb {
            (s.base_label, nb)
        } else if s.exp_label >= ne {
            (s.exp_label, ne)
        } else {
            continue;
        };
        return Err(Error::Sample {
            index: i as u64,
            source: Box::new(Error::ClassOutOfRange { index: label, classes }),
        });
    }
    Ok(())
}

/// Summed per-sample losses `[total, base, exponent]` and the mean gradient of one mini-batch.
pub fn batch_gradients(
    model: &MultiOutputModel,
    data: &Dataset,
    batch: &[usize],
    weights: HeadWeights,
) -> Result<([f64; 3], Gradients)> {
    let images: Vec<&Tensor> = batch.iter().map(|&i| &data.samples[i].image).collect();
    let fwd = model.forward_batch(&images)?;
    let (nb, ne) = (model.base_classes(), model.exp_classes());
    let inv = 1.0 / batch.len() as f32;
    let mut gb = Vec::with_capacity(batch.len() * nb);
    let mut ge = Vec::with_capacity(batch.len() * ne);
    let mut sums = [0.0f64; 3];
    for (k, &i) in batch.iter().enumerate() {
        let s = &data.samples[i];
        let b = Tensor::from_vec(&[nb], fwd.base_logits.data()[k * nb..(k + 1) * nb].to_vec())?;
        let e = Tensor::from_vec(&[ne], fwd.exp_logits.data()[k * ne..(k + 1) * ne].to_vec())?;
        let loss = combined_loss(&b, &e, s.base_label, s.exp_label, weights)?;
        sums[0] += loss.total;
        sums[1] += loss.base_loss;
        sums[2] += loss.exp_loss;
        let wb = weights.base as f32 * inv;
        let we = weights.exponent as f32 * inv;
        gb.extend(softmax_ce_grad(&b, s.base_label)?.data().iter().map(|g| g * wb));
        ge.extend(softmax_ce_grad(&e, s.exp_label)?.data().iter().map(|g| g * we));
    }
    let grads = model.backward(
        &fwd.trace,
        &Tensor::from_vec(&[batch.len(), nb], gb)?,
        &Tensor::from_vec(&[batch.len(), ne], ge)?,
    )?;
    Ok((sums, grads))
}

/// Stepwise trainer; [`train`] drives it to completion.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    model: MultiOutputModel,
    adam: AdamState,
    epochs_completed: usize,
    stopper: EarlyStopper,
    best: Option<(usize, MultiOutputModel)>,
    history: Vec<EpochRecord>,
    stopped: bool,
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: MultiOutputModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Parameters after the last completed epoch.
    pub last_model: MultiOutputModel,
    pub resume: ResumeState,
}

impl<'a> Trainer<'a> {
    pub fn new(model: MultiOutputModel, data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(config.adam, &model.params());
        Self::resume(
            model,
            ResumeState {
                adam,
                epochs_completed: 0,
            },
            data,
            config,
        )
    }

    /// Continues a run from saved parameters and optimiser state. Early
    /// stopping restarts from scratch.
    pub fn resume(model: MultiOutputModel, state: ResumeState, data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_dataset(&model, data)?;
        let shapes_match = state.adam.m.len() == model.params().len()
            && model
                .params()
                .iter()
                .zip(state.adam.m.iter().zip(&state.adam.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !shapes_match {
            return Err(Error::ArchitectureMismatch("optimiser state does not match the model".into()));
        }
        let (train_idx, val_idx) = split_indices(data.len(), config.validation_fraction, config.seed)?;
        let mut adam = state.adam;
        adam.config = config.adam;
        Ok(Trainer {
            stopper: EarlyStopper::new(config.patience, config.min_delta),
            config,
            data,
            train_idx,
            val_idx,
            model,
            adam,
            epochs_completed: state.epochs_completed,
            best: None,
            history: Vec::new(),
            stopped: false,
        })
    }

    pub fn model(&self) -> &MultiOutputModel {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn validation_indices(&self) -> &[usize] {
        &self.val_idx
    }

    /// Epoch and parameters with the lowest validation loss so far.
    pub fn best(&self) -> Option<(usize, &MultiOutputModel)> {
        self.best.as_ref().map(|(e, m)| (*e, m))
    }

    pub fn resume_state(&self) -> ResumeState {
        ResumeState {
            adam: self.adam.clone(),
            epochs_completed: self.epochs_completed,
        }
    }

    /// True once patience ran out or the configured epoch count was reached.
    pub fn finished(&self) -> bool {
        self.stopped || self.epochs_completed >= self.config.epochs
    }

    /// One pass over the training split, without validation.
    pub fn train_epoch(&mut self) -> Result<[f64; 3]> {
        let epoch = self.epochs_completed + 1;
        let order = epoch_order(&self.train_idx, self.config.seed, epoch);
        let mut sums = [0.0f64; 3];
        for batch in order.chunks(self.config.batch_size) {
            let (s, grads) = batch_gradients(&self.model, self.data, batch, self.config.head_weights)?;
            if !grads.tensors.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite("batch gradient"));
            }
            for (acc, v) in sums.iter_mut().zip(s) {
                *acc += v;
            }
            adam_step(&mut self.model.params_mut(), &grads.tensors, &mut self.adam)?;
        }
        self.epochs_completed = epoch;
        let n = order.len() as f64;
        Ok(sums.map(|s| s / n))
    }

    /// Trains one epoch, validates with the built-in evaluator and updates early stopping.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.run_epoch_with(&mut |m: &MultiOutputModel, d: &Dataset, idx: &[usize]| {
            evaluate_indices(m, d, idx).map(|r| Validation::from(&r))
        })
    }

    /// [`run_epoch`](Self::run_epoch) with a caller-supplied validation function.
    pub fn run_epoch_with<V>(&mut self, validate: &mut V) -> Result<EpochRecord>
    where
        V: FnMut(&MultiOutputModel, &Dataset, &[usize]) -> Result<Validation>,
    {
        let [train_total, train_base, train_exp] = self.train_epoch()?;
        let val = validate(&self.model, self.data, &self.val_idx)?;
        let record = EpochRecord {
            epoch: self.epochs_completed,
            train_total,
            train_base,
            train_exp,
            val_total: val.total_loss,
            val_base_acc: val.base_accuracy,
            val_exp_acc: val.exp_accuracy,
        };
        let obs = self.stopper.observe(val.total_loss);
        if obs.is_best {
            self.best = Some((record.epoch, self.model.clone()));
        }
        self.stopped = obs.stop;
        self.history.push(record);
        Ok(record)
    }

    pub fn run(self) -> Result<TrainOutcome> {
        self.run_with(&mut |m: &MultiOutputModel, d: &Dataset, idx: &[usize]| {
            evaluate_indices(m, d, idx).map(|r| Validation::from(&r))
        })
    }

    pub fn run_with<V>(mut self, validate: &mut V) -> Result<TrainOutcome>
    where
        V: FnMut(&MultiOutputModel, &Dataset, &[usize]) -> Result<Validation>,
    {
        while !self.finished() {
            self.run_epoch_with(validate)?;
        }
        let resume = self.resume_state();
        let (best_epoch, model) = match self.best {
            Some(b) => b,
            None => (self.epochs_completed, self.model.clone()),
        };
        Ok(TrainOutcome {
            model,
            best_epoch,
            stopped_early: self.stopped && self.epochs_completed < self.config.epochs,
            history: self.history,
            last_model: self.model,
            resume,
        })
    }
}

/// Default architecture sized to the dataset's image and label ranges.
pub fn arch_for(data: &Dataset) -> ArchConfig {
    ArchConfig {
        input_h: data.image_size.0,
        input_w: data.image_size.1,
        base_classes: data.base_classes(),
        exp_classes: data.exp_classes(),
        ..ArchConfig::default()
    }
}

/// Initialises `arch` from `init_seed` and trains it on `data`.
pub fn train(arch: &ArchConfig, init_seed: u64, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let model = MultiOutputModel::new(arch, init_seed)?;
    Trainer::new(model, data, config.clone())?.run()
}

/// History CSV: `epoch,train_total,train_base,train_exp,val_total,val_base_acc,val_exp_acc`.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "train_total",
        "train_base",
        "train_exp",
        "val_total",
        "val_base_acc",
        "val_exp_acc",
    ])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_total.to_string(),
            r.train_base.to_string(),
            r.train_exp.to_string(),
            r.val_total.to_string(),
            r.val_base_acc.to_string(),
            r.val_exp_acc.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
