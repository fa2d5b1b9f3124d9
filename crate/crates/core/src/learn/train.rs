//! Mini-batch training of [`TinyNet`] with exact resume support.

use serde::{Deserialize, Serialize};

use super::net::{argmax, TinyNet, TinyNetArch};
use super::optim::{optimizer_step, LrSchedule, OptimizerKind, OptimizerState};
use super::patch::PatchPosition;
use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::filters::Preprocessing;
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamax { lr: 1e-3 },
            schedule: LrSchedule::constant(),
            epochs: 20,
            batch_size: 8,
            loss: Loss::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// True when a run with `other` can continue a run made with `self`
    /// (only the epoch count may differ).
    fn resumable_as(&self, other: &TrainConfig) -> bool {
        let mut a = self.clone();
        a.epochs = other.epochs;
        &a == other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: TinyNet,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(arch: TinyNetArch, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = TinyNet::new(arch, &mut Rng::new(config.seed).derive("init", 0))?;
        let optimizer = OptimizerState::new(net.params().len());
        Ok(Self {
            net,
            optimizer,
            config,
            epochs_completed: 0,
            history: Vec::new(),
        })
    }
}

pub type Sample = (Image, usize);

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(net: &TinyNet, samples: &[Sample]) -> Result<f64> {
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let hits: Vec<Result<bool>> = samples
        .par_iter()
        .map(|(img, label)| Ok(argmax(&net.logits(img)?) == *label))
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains until `config.epochs` epochs are completed, starting from `state`
/// (fresh or resumed). Epoch `e` visits the training samples in an order
/// drawn from `seed/"epoch"/e`, so stopping and resuming at any epoch
/// boundary reproduces an uninterrupted run.
pub fn train_on_samples(
    mut state: TrainState,
    config: &TrainConfig,
    train: &[Sample],
    validation: &[Sample],
) -> Result<TrainState> {
    config.validate()?;
    if !state.config.resumable_as(config) {
        return Err(Error::InvalidArgument(
            "resumed training must use the same configuration apart from the epoch count".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if config.optimizer.base_lr() == 0.0 {
        log::warn!("learning rate is zero; parameters will not change");
    }
    state.config = config.clone();
    let master = Rng::new(config.seed);
    let base_lr = config.optimizer.base_lr();
    for epoch in state.epochs_completed..config.epochs {
        let lr = config.schedule.lr_at(base_lr, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        master.derive("epoch", epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&Image, usize)> =
                chunk.iter().map(|&i| (&train[i].0, train[i].1)).collect();
            let bg = state.net.batch_loss_and_grad(&batch).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            if !bg.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += bg.loss * chunk.len() as f64;
            correct += bg.correct;
            optimizer_step(
                &config.optimizer,
                state.net.params_mut(),
                &bg.grad,
                &mut state.optimizer,
                lr,
            );
            let step = state.optimizer.step;
            state
                .net
                .project_front_end(&mut master.derive("reinit", step));
            if state.net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after epoch {epoch}, batch {b}"
                )));
            }
        }
        let val_acc = if validation.is_empty() {
            None
        } else {
            Some(accuracy(&state.net, validation)?)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.3} val_acc {}",
            rec.train_loss,
            rec.train_acc,
            val_acc.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
        state.history.push(rec);
        state.epochs_completed = epoch + 1;
    }
    Ok(state)
}

/// Loads, preprocesses and crops dataset items.
pub fn prepare_samples(
    dataset: &LabeledDataset,
    indices: &[usize],
    preprocessing: Preprocessing,
    patch: Option<(usize, PatchPosition)>,
) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    indices
        .par_iter()
        .map(|&i| {
            let img = preprocessing.apply(dataset.load(i)?)?;
            let img = match patch {
                Some((size, pos)) => {
                    let (h, w, _) = img.shape();
                    if h < size || w < size {
                        return Err(Error::Shape(format!(
                            "item {i} ({h}x{w}) is smaller than patch size {size}"
                        )));
                    }
                    let (top, left) = pos.anchor(h, w, size);
                    img.crop(top, left, size, size)?
                }
                None => img,
            };
            Ok((img, dataset.label(i)))
        })
        .collect()
}

/// Trains on the chosen patch of every training item and reports
/// validation accuracy per epoch.
pub fn train_tinynet(
    dataset: &LabeledDataset,
    arch: TinyNetArch,
    config: &TrainConfig,
    preprocessing: Preprocessing,
    patch: Option<(usize, PatchPosition)>,
) -> Result<TrainState> {
    if arch.num_classes != dataset.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "network has {} classes, dataset {}",
            arch.num_classes,
            dataset.num_classes()
        )));
    }
    let train = prepare_samples(
        dataset,
        &dataset.split_indices(Split::Train),
        preprocessing,
        patch,
    )?;
    let val = prepare_samples(
        dataset,
        &dataset.split_indices(Split::Validation),
        preprocessing,
        patch,
    )?;
    train_on_samples(TrainState::new(arch, config.clone())?, config, &train, &val)
}
