//! Training objectives and the mini-batch loop.

mod log;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use log::{EpochRecord, StopReason, TrainLog};

use crate::datapipe::{ClassMap, WindowSet};
use crate::error::{Error, Result};
use crate::modelzoo::{HeadKind, Model};
use crate::numcore::{Adam, AdamConfig, Mode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sum over classes of binary cross-entropy, averaged over the batch.
    OvrnBce,
    /// Categorical cross-entropy on the probability of the true class.
    SoftmaxCe,
    /// Log-free agreement objective `-(1/N) ΣΣ [t p + (1-t)(1-p)]`.
    LinearAgreement,
}

impl LossKind {
    /// Natural objective for a head: cross-entropy for softmax, summed
    /// binary cross-entropy for one-vs-rest.
    pub fn for_head(head: HeadKind) -> Self {
        match head {
            HeadKind::Softmax => LossKind::SoftmaxCe,
            HeadKind::Ovrn => LossKind::OvrnBce,
        }
    }

    pub(crate) fn apply(self, tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
        match self {
            LossKind::OvrnBce => tape.binary_cross_entropy(probs, labels),
            LossKind::SoftmaxCe => tape.cross_entropy(probs, labels),
            LossKind::LinearAgreement => tape.linear_agreement(probs, labels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub convergence_tol: f64,
    pub patience: usize,
    pub seed: u64,
    /// `None` picks [`LossKind::for_head`].
    pub loss_kind: Option<LossKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 5e-4,
            max_epochs: 200,
            convergence_tol: 1e-4,
            patience: 5,
            seed: 0,
            loss_kind: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config(format!("convergence_tol must be positive, got {}", self.convergence_tol)));
        }
        Ok(())
    }
}

fn evaluate_loss(kind: LossKind, probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let loss = kind.apply(&mut tape, p, labels)?;
    Ok(tape.value(loss).item())
}

/// Summed binary cross-entropy over `K` one-vs-rest outputs, averaged over
/// the batch. Labels are 0-based class indices.
pub fn ovrn_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    evaluate_loss(LossKind::OvrnBce, probs, labels)
}

pub fn softmax_ce(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    evaluate_loss(LossKind::SoftmaxCe, probs, labels)
}

pub fn linear_agreement_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    evaluate_loss(LossKind::LinearAgreement, probs, labels)
}

/// 0-based class index of every window. Unlabelled windows and states outside
/// the class map are errors: training only ever sees known classes.
pub fn class_labels(windows: &WindowSet, classes: &ClassMap) -> Result<Vec<usize>> {
    windows
        .states()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let s = s.ok_or_else(|| Error::Invalid(format!("training window {i} has no state label")))?;
            classes
                .index_of(s)
                .ok_or_else(|| Error::Invalid(format!("training window {i} has state {s}, not a known class")))
        })
        .collect()
}

/// Train `model` in place on normalised, labelled windows. Returns the log
/// of every completed epoch; the model keeps the final-epoch parameters.
pub fn train(model: &mut Model, windows: &WindowSet, classes: &ClassMap, config: &TrainConfig) -> Result<TrainLog> {
    train_observed(model, windows, classes, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    model: &mut Model,
    windows: &WindowSet,
    classes: &ClassMap,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    config.validate()?;
    let k = model.spec().classes;
    if classes.len() != k {
        return Err(Error::SpecMismatch(format!(
            "model head has {k} classes, training data has {}",
            classes.len()
        )));
    }
    if windows.is_empty() {
        return Err(Error::Invalid("no training windows".into()));
    }
    let labels = class_labels(windows, classes)?;
    let loss_kind = config.loss_kind.unwrap_or_else(|| LossKind::for_head(model.spec().head));
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), model.params().values());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let started = Instant::now();

    let mut records = Vec::new();
    let mut stalled = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(windows.batch(chunk));
            let fwd = model.forward(&mut tape, x, Mode::Train)?;
            let loss = loss_kind.apply(&mut tape, fwd.output, &batch_labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch + 1 });
            }
            loss_sum += value * chunk.len() as f64;
            let probs = tape.value(fwd.output);
            correct += batch_labels.iter().enumerate().filter(|&(r, &y)| argmax(probs.row(r)) == y).count();

            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = fwd.params.iter().map(|&p| grads.wrt(p)).collect();
            adam.step(model.params_mut().values_mut(), &grads)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / windows.len() as f64,
            accuracy: correct as f64 / windows.len() as f64,
        };
        on_epoch(&record);
        if let Some(prev) = records.last().map(|r: &EpochRecord| r.mean_loss) {
            if prev - record.mean_loss < config.convergence_tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
        records.push(record);
        if stalled >= config.patience {
            stop_reason = StopReason::Converged;
            break;
        }
    }

    let log = TrainLog {
        epochs: records,
        stop_reason,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    model.classes = Some(classes.clone());
    model.metadata.epochs = log.epochs.len();
    model.metadata.final_loss = log.final_loss();
    Ok(log)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
