//! Optimization protocol: softmax cross-entropy with weight decay, Adamax,
//! step-decay learning rate and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::{augment, to_batch, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::layers::Mode;
use crate::network::{argmax_channels, Model};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability floor applied before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Whether the decay interval counts epochs or optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Epoch,
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_every: usize,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(initial: f64, decay_every: usize, factor: f64) -> Result<Self> {
        if !(initial > 0.0) || decay_every == 0 || !(factor >= 1.0) {
            return Err(Error::invalid(format!(
                "learning-rate schedule needs initial > 0, interval >= 1 and factor >= 1 \
                 (got {initial}, {decay_every}, {factor})"
            )));
        }
        Ok(LrSchedule {
            initial,
            decay_every,
            factor,
        })
    }

    /// `initial / factor^floor(index / decay_every)`.
    pub fn at(&self, index: usize) -> f64 {
        let k = (index / self.decay_every) as i32;
        self.initial / self.factor.powi(k)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            decay_every: 15,
            factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub schedule_unit: ScheduleUnit,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub shuffle: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop at the end of the first epoch whose train pixel accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// Write a checkpoint every this many epochs (a final one is always written).
    pub checkpoint_every: Option<usize>,
    pub adamax: AdamaxConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 16,
            schedule: LrSchedule::default(),
            schedule_unit: ScheduleUnit::Epoch,
            epochs: 300,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            shuffle: true,
            max_steps: None,
            target_accuracy: None,
            checkpoint_every: None,
            adamax: AdamaxConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        LrSchedule::new(self.schedule.initial, self.schedule.decay_every, self.schedule.factor)?;
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint interval must be at least 1"));
        }
        self.adamax.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamaxConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adamax needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// First moment `m` and infinity norm `u` per parameter.
#[derive(Clone, Debug)]
pub struct AdamaxState<T: Scalar = f64> {
    pub config: AdamaxConfig,
    pub t: u64,
    pub m: BTreeMap<ParamId, Tensor<T>>,
    pub u: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> AdamaxState<T> {
    pub fn new(config: AdamaxConfig) -> Self {
        AdamaxState {
            config,
            t: 0,
            m: BTreeMap::new(),
            u: BTreeMap::new(),
        }
    }

    /// One update of every trainable parameter in `params`. `grads` must be
    /// keyed by exactly those parameters.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>, lr: f64) -> Result<()> {
        let expected: Vec<ParamId> = params.trainable().collect();
        if !expected.iter().copied().eq(grads.keys().copied()) {
            let missing = expected.iter().find(|id| !grads.contains_key(id));
            let extra = grads.keys().find(|id| !expected.contains(id));
            let detail = match (missing, extra) {
                (Some(&id), _) => format!("no gradient for {}", params.get(id).name),
                (_, Some(id)) => format!("gradient for unknown or frozen parameter #{}", id.index()),
                _ => unreachable!("key sets differ"),
            };
            return Err(Error::invalid(format!("Adamax key mismatch: {detail}")));
        }
        for (&id, g) in grads {
            g.expect_shape(params.shape_of(id), params.get(id).name.clone())?;
        }

        self.t += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let step = T::lit(lr / (1.0 - self.config.beta1.powi(self.t as i32)));
        for (&id, g) in grads {
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let u = self.u.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let theta = params.value_mut(id);
            let iter = theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(u.data_mut())
                .zip(g.data());
            for (((p, m), u), &g) in iter {
                *m = b1 * *m + (T::one() - b1) * g;
                *u = (b2 * *u).max(g.abs());
                *p -= step * *m / (*u + eps);
            }
        }
        Ok(())
    }
}

/// Per-pixel class distribution of `(n, classes, h, w)` logits.
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape().c < 2 {
        return Err(Error::invalid(format!(
            "softmax needs at least 2 classes, got {}",
            logits.shape().c
        )));
    }
    Ok(kernels::softmax_channels(logits))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    pub data: T,
    pub regularization: T,
    /// Pixels whose true-class probability fell below the floor.
    pub clamped: usize,
}

/// `(lambda / 2) * sum of squared convolution weights`.
pub fn weight_penalty<T: Scalar>(params: &ParamStore<T>, weight_decay: f64) -> T {
    let sq: T = params
        .entries()
        .filter(|(_, e)| e.kind.regularized())
        .map(|(_, e)| e.value.data().iter().map(|&w| w * w).sum::<T>())
        .sum();
    T::lit(weight_decay / 2.0) * sq
}

/// Loss evaluated directly on probabilities: mean true-class negative log
/// probability over batch and pixels plus the weight penalty.
pub fn loss_value<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    params: &ParamStore<T>,
    weight_decay: f64,
) -> Result<LossValue<T>> {
    let mut g = Graph::new();
    let p = g.input(probs.clone());
    let (v, clamped) = g.nll(p, labels, T::lit(PROB_FLOOR))?;
    let data = g.value(v).item();
    let regularization = weight_penalty(params, weight_decay);
    Ok(LossValue {
        total: data + regularization,
        data,
        regularization,
        clamped,
    })
}

/// Appends the regularized cross-entropy of `logits` to `graph`. Every
/// convolution weight is bound once more so the penalty's gradient adds to
/// the data gradient.
pub fn loss_graph<T: Scalar>(
    graph: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    params: &ParamStore<T>,
    weight_decay: f64,
) -> Result<(Var, usize)> {
    let probs = graph.softmax(logits);
    let (data, clamped) = graph.nll(probs, labels, T::lit(PROB_FLOOR))?;
    if weight_decay == 0.0 {
        return Ok((data, clamped));
    }
    let mut penalty: Option<Var> = None;
    for (id, e) in params.entries().filter(|(_, e)| e.kind == ParamKind::ConvWeight) {
        let w = graph.param(id, e.value.clone());
        let sq = graph.sum_squares(w);
        penalty = Some(match penalty {
            Some(acc) => graph.add(acc, sq)?,
            None => sq,
        });
    }
    let Some(penalty) = penalty else {
        return Ok((data, clamped));
    };
    let scaled = graph.scale(penalty, T::lit(weight_decay / 2.0));
    Ok((graph.add(data, scaled)?, clamped))
}

/// Fraction of pixels whose argmax class matches the label.
pub fn pixel_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let predicted = argmax_channels(logits);
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Loss before the update.
    pub loss: f64,
    /// Train-mode pixel accuracy before the update.
    pub accuracy: f64,
    pub clamped: usize,
}

/// Optimizer state plus a step counter; drives one update at a time.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f64> {
    pub config: TrainingConfig,
    pub optimizer: AdamaxState<T>,
    pub steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: AdamaxState::new(config.adamax),
            config,
            steps: 0,
        })
    }

    /// Forward, loss, backward and one Adamax update at learning rate `lr`.
    pub fn step(&mut self, model: &mut Model<T>, batch: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepOutcome> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let logits = model.forward(&mut g, x, Mode::Train)?;
        let (loss, clamped) = loss_graph(&mut g, logits, labels, &model.params, self.config.weight_decay)?;
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss_value} at step {}",
                self.steps + 1
            )));
        }
        let accuracy = pixel_accuracy(g.value(logits), labels);
        let grads = g.backward_scalar(loss)?;
        drop(g);
        let grads = grads.into_params();
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at step {}",
                model.params.get(*id).name,
                self.steps + 1
            )));
        }
        self.optimizer.step(&mut model.params, &grads, lr)?;
        self.steps += 1;
        Ok(StepOutcome {
            loss: loss_value,
            accuracy,
            clamped,
        })
    }
}

/// One logged epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    /// Sample-weighted mean loss over the epoch's batches.
    pub loss: f64,
    /// Train-mode pixel accuracy over the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub steps: usize,
    pub clamped_pixels: usize,
    /// Stopped because the target accuracy was reached.
    pub reached_target: bool,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.accuracy)
    }
}

pub const LOG_HEADER: &str = "epoch,step,lr,loss,accuracy";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e},{:.12e},{:.8}", r.epoch, r.step, r.lr, r.loss, r.accuracy);
    }
    s
}

/// File names written by [`train`] under its output directory.
pub const FINAL_CHECKPOINT: &str = "final.rdun";
pub const LOG_FILE: &str = "train_log.csv";

/// Trains `model` on `samples`. With `out_dir` set, writes the CSV log,
/// periodic checkpoints and a final checkpoint there.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    config: &TrainingConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in samples {
        s.validate(model.config.classes)?;
        if (s.height, s.width) != (model.config.height, model.config.width) {
            return Err(Error::shape(
                "train",
                format!(
                    "{}x{} sample for a {}x{} model",
                    s.height, s.width, model.config.height, model.config.width
                ),
            ));
        }
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch_size = config.batch_size.min(samples.len());
    let mut report = TrainReport {
        rows: Vec::new(),
        steps: 0,
        clamped_pixels: 0,
        reached_target: false,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    'epochs: for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut hits, mut pixels, mut seen) = (0.0, 0.0, 0usize, 0usize);
        let mut lr = config.schedule.at(epoch);
        for chunk in order.chunks(batch_size) {
            if config.max_steps.is_some_and(|m| trainer.steps >= m) {
                break;
            }
            let prepared: Vec<Sample>;
            let refs: Vec<&Sample> = if config.augment {
                prepared = chunk.iter().map(|&i| augment(&samples[i], &mut rng)).collect();
                prepared.iter().collect()
            } else {
                chunk.iter().map(|&i| &samples[i]).collect()
            };
            let (batch, labels) = to_batch::<T>(&refs)?;
            lr = match config.schedule_unit {
                ScheduleUnit::Epoch => config.schedule.at(epoch),
                ScheduleUnit::Step => config.schedule.at(trainer.steps),
            };
            let out = trainer.step(model, &batch, &labels, lr)?;
            loss_sum += out.loss * chunk.len() as f64;
            seen += chunk.len();
            hits += out.accuracy * labels.len() as f64;
            pixels += labels.len();
            report.clamped_pixels += out.clamped;
        }
        if seen == 0 {
            break;
        }
        let row = LogRow {
            epoch,
            step: trainer.steps,
            lr,
            loss: loss_sum / seen as f64,
            accuracy: hits / pixels as f64,
        };
        report.rows.push(row);
        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if (epoch + 1) % every == 0 {
                checkpoint::save(&model.params, &dir.join(format!("epoch{:04}.rdun", epoch + 1)))?;
            }
        }
        if config.target_accuracy.is_some_and(|t| row.accuracy >= t) {
            report.reached_target = true;
            break 'epochs;
        }
    }
    report.steps = trainer.steps;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join(LOG_FILE), log_csv(&report.rows))?;
        checkpoint::save(&model.params, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(report)
}
