use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, NormKind, OptimizerKind};
use super::eval::{domain_shift_eval, ShiftMatrix};
use super::model::{build_model, Model, SHUFFLE_STREAM};
use crate::data::{batches, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::optim::{Adam, Optimizer, SgdNesterov, StepDecay};
use crate::tensor::Prng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub norm: NormKind,
    pub seed: u64,
    pub clean_accuracy: f64,
    /// Clean test accuracy after every epoch.
    pub epoch_accuracy: Vec<f64>,
    /// Mean training loss of every epoch.
    pub loss_curve: Vec<f64>,
    pub shift: Option<ShiftMatrix>,
    /// Seconds; never written to result files.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Trained model plus the state of the shuffling stream when training
/// stopped.
pub struct Trained {
    pub model: Model,
    pub result: RunResult,
    pub prng_state: u64,
}

fn optimizer(config: &ExperimentConfig) -> Result<Box<dyn Optimizer>> {
    Ok(match config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(config.lr)),
        OptimizerKind::SgdNesterov => Box::new(SgdNesterov::new(config.lr, config.momentum)?),
    })
}

/// Resolves the configured dataset and trains on it.
pub fn train(config: &ExperimentConfig) -> Result<Trained> {
    let (train_set, test_set) = config.dataset.resolve()?;
    train_on(config, &train_set, &test_set)
}

/// Full loop: shuffled mini-batches, forward, cross-entropy, backward,
/// optimizer step with parameter constraints, then a clean evaluation per
/// epoch. With `corruption_eval` the final model also gets the 25-cell
/// shift matrix.
///
/// Any non-finite activation, gradient, loss or updated parameter stops the
/// run with [`Error::Numeric`] naming the first offending layer.
pub fn train_on(config: &ExperimentConfig, train_set: &ImageDataset, test_set: &ImageDataset) -> Result<Trained> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if test_set.image_dims() != train_set.image_dims() {
        return Err(Error::Consistency(format!(
            "train images are {:?} but test images are {:?}",
            train_set.image_dims(),
            test_set.image_dims()
        )));
    }
    let start = Instant::now();
    let mut model = build_model(config, train_set.image_dims(), train_set.num_classes())?;
    let mut opt = optimizer(config)?;
    let schedule = StepDecay {
        lr0: config.lr,
        decay_every: config.lr_decay_every,
    };
    let mut shuffle = Prng::new(config.seed).fork(SHUFFLE_STREAM);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut epoch_accuracy = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        opt.set_lr(schedule.lr_at(epoch));
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, labels) in batches(train_set, config.batch_size, &mut shuffle, true)? {
            let (logits, caches) = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::numeric("loss", "forward"));
            }
            let grads = model.backward(&caches, &dlogits)?;
            opt.step(&mut model.params_mut(), &grads)?;
            if let Some(layer) = model.first_nonfinite_param() {
                return Err(Error::numeric(layer, "update"));
            }
            total += loss * labels.len() as f64;
            count += labels.len();
        }
        loss_curve.push(total / count as f64);
        epoch_accuracy.push(model.evaluate(test_set, config.eval_batch_size)?);
    }

    let clean_accuracy = *epoch_accuracy.last().expect("at least one epoch");
    let shift = if config.corruption_eval {
        Some(domain_shift_eval(&model, test_set, config.eval_seed, config.eval_batch_size)?)
    } else {
        None
    };
    Ok(Trained {
        model,
        result: RunResult {
            norm: config.norm,
            seed: config.seed,
            clean_accuracy,
            epoch_accuracy,
            loss_curve,
            shift,
            wall_time: start.elapsed().as_secs_f64(),
        },
        prng_state: shuffle.state(),
    })
}
