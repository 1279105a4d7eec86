//! Minibatch training with Adam and validation-loss early stopping.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::class::LczClass;
use crate::error::{Error, Result};
use crate::nn::adam::{adam_step, AdamConfig, AdamState};
use crate::nn::loss::{argmax_rows, softmax_cross_entropy};
use crate::nn::model::{batch_tensor, DropoutMask, MscnnModel};
use crate::raster::Patch;
use crate::rng;
use crate::sampling::SampleSet;
use crate::scalar::Scalar;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stopping: bool,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Run a finite-difference spot check of the model gradient before training.
    pub gradient_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 96,
            max_epochs: 500,
            early_stop_patience: 15,
            early_stopping: true,
            seed: 0,
            adam: AdamConfig::default(),
            gradient_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.early_stop_patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size, max_epochs and early_stop_patience must be at least 1".into()));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; 0 if no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub gradient_check_error: Option<f64>,
}

/// Patience counter over a validation-loss sequence. A loss improves when it
/// is strictly below the best seen so far.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

fn labels_of(set: &SampleSet) -> Vec<usize> {
    set.labels.iter().map(|l| l.index()).collect()
}

/// Splits shuffled indices into batches; a trailing batch of one is merged
/// into its predecessor because training-mode batch norm needs two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Mean loss and accuracy of eval-mode predictions.
pub fn evaluate<T: Scalar>(model: &MscnnModel<T>, set: &SampleSet) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let labels = labels_of(set);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (chunk, lab) in set.patches.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let logits = model.forward_eval(&batch_tensor(&refs)?)?;
        let (loss, _) = softmax_cross_entropy(&logits, lab, model.arch.n_classes)?;
        loss_sum += loss.as_f64() * lab.len() as f64;
        correct += argmax_rows(&logits, model.arch.n_classes).iter().zip(lab).filter(|(p, l)| p == l).count();
    }
    Ok((loss_sum / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Eval-mode class predictions.
pub fn predict<T: Scalar>(model: &MscnnModel<T>, patches: &[&Patch]) -> Result<Vec<LczClass>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_BATCH) {
        let logits = model.forward_eval(&batch_tensor(chunk)?)?;
        for i in argmax_rows(&logits, model.arch.n_classes) {
            out.push(LczClass::from_code(i as u8)?);
        }
    }
    Ok(out)
}

/// Generic training loop. `validate` returns (loss, accuracy) for the current
/// weights; `on_epoch` sees each record and may stop training early. The
/// weights of the best validation epoch are restored before returning.
pub fn fit<T: Scalar>(
    model: &mut MscnnModel<T>,
    train: &SampleSet,
    cfg: &TrainConfig,
    mut validate: impl FnMut(&MscnnModel<T>) -> Result<(f64, f64)>,
    mut on_epoch: impl FnMut(&MscnnModel<T>, &EpochRecord) -> ControlFlow<()>,
) -> Result<History> {
    cfg.validate()?;
    model.check()?;
    if train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let labels = labels_of(train);
    let mut history = History::default();
    if cfg.gradient_check {
        let n = train.len().min(2);
        let refs: Vec<&Patch> = train.patches[..n].iter().collect();
        let err = crate::nn::gradcheck::spot_check_model(model, &batch_tensor::<f64>(&refs)?, &labels[..n], 32, cfg.seed)?;
        log::info!("gradient spot check: max relative error {err:.3e}");
        history.gradient_check_error = Some(err);
    }
    let infos = model.param_info();
    let trainable: Vec<usize> = (0..infos.len()).filter(|&i| !model.frozen[infos[i].layer]).collect();
    let mut adam = AdamState::<T>::new(&trainable.iter().map(|&i| infos[i].len).collect::<Vec<_>>());
    let mut shuffle_rng = rng::stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = rng::stream(cfg.seed, DROPOUT_STREAM);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best: Option<MscnnModel<T>> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let refs: Vec<&Patch> = idx.iter().map(|&i| &train.patches[i]).collect();
            let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let x = batch_tensor::<T>(&refs)?;
            let (logits, cache) = model.forward_train(&x, DropoutMask::Sample(&mut dropout_rng))?;
            let (loss, grad) = softmax_cross_entropy(&logits, &lab, model.arch.n_classes)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi + 1 });
            }
            loss_sum += loss.as_f64() * lab.len() as f64;
            correct += argmax_rows(&logits, model.arch.n_classes).iter().zip(&lab).filter(|(p, l)| p == l).count();
            if trainable.is_empty() {
                continue;
            }
            let mut grads = model.backward(&cache, &grad)?;
            let g: Vec<Vec<T>> = trainable
                .iter()
                .map(|&i| grads[i].take().ok_or_else(|| Error::ShapeMismatch(format!("missing gradient for {}", infos[i].name))))
                .collect::<Result<_>>()?;
            let mut all = model.params_mut();
            let mut slots: Vec<Option<&mut [T]>> = all.drain(..).map(Some).collect();
            let mut params: Vec<&mut [T]> = trainable.iter().map(|&i| slots[i].take().expect("each slot once")).collect();
            let grefs: Vec<&[T]> = g.iter().map(|v| v.as_slice()).collect();
            adam_step(&mut params, &grefs, &mut adam, &cfg.adam)?;
            if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, batch: bi + 1 });
            }
        }
        let (val_loss, val_accuracy) = validate(model)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        let decision = stopper.observe(epoch, val_loss);
        let improved = decision == StopDecision::Improved;
        if improved {
            best = Some(model.clone());
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            learning_rate: cfg.adam.rate_at(adam.t),
            improved,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}{}",
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy,
            if improved { " *" } else { "" }
        );
        let flow = on_epoch(model, &record);
        history.epochs.push(record);
        if cfg.early_stopping && decision == StopDecision::Stop {
            history.stopped_early = true;
            break;
        }
        if flow.is_break() {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    if let Some(b) = best {
        *model = b;
    }
    Ok(history)
}

/// Trains against a validation set; see [`fit`].
pub fn train_mscnn<T: Scalar>(model: &mut MscnnModel<T>, train: &SampleSet, val: &SampleSet, cfg: &TrainConfig) -> Result<History> {
    if val.is_empty() {
        return Err(Error::Empty("validation set is empty".into()));
    }
    fit(model, train, cfg, |m| evaluate(m, val), |_, _| ControlFlow::Continue(()))
}
