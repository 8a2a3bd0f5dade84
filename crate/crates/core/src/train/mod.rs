//! Training harness: He initialization, SGD with momentum and weight decay,
//! the staged learning-rate schedule, training modes, evaluation, gradient
//! checking, checkpoints and metrics logs.

mod checkpoint;
mod config;
mod gradcheck;
mod init;
mod metrics;
mod objective;
mod sgd;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::fusenet::FusedNet;
use crate::netspec::FusedNetSpec;
use crate::tensor::{softmax, LayerGrads, Mode, Scalar, Tensor};

pub use checkpoint::{
    apply_checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint,
    save_checkpoint, Checkpoint, CheckpointArray,
};
pub use config::{lr_at, TrainConfig, TrainMode};
pub use gradcheck::{grad_check, grad_check_spec, shrunken, CoordinateError, GradCheckConfig, GradCheckReport, KindReport};
pub use init::he_init;
pub use metrics::{read_metrics_csv, write_metrics_csv, EpochMetrics};
pub use objective::{argmax_rows, count_errors, objective, Objective};
pub use sgd::{sgd_step, zero_velocity, SgdStep};

/// Top-1 error and mean loss over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub error: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Everything a training run owns: parameters, velocity, counters and log.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub net: FusedNet<T>,
    pub velocity: Vec<LayerGrads<T>>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed SGD steps.
    pub step: usize,
    pub log: Vec<EpochMetrics>,
}

fn check_dataset<T: Scalar>(net: &FusedNet<T>, data: &Dataset) -> Result<()> {
    let spec = net.spec();
    if data.num_classes != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the net predicts {}",
            data.num_classes, spec.num_classes
        )));
    }
    let s = data.image_shape();
    let i = spec.input;
    if (s.c, s.h, s.w) != (i.channels, i.height, i.width) {
        return Err(Error::InvalidArgument(format!(
            "dataset images are {}x{}x{} but the net expects {}x{}x{}",
            s.c, s.h, s.w, i.channels, i.height, i.width
        )));
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl<T: Scalar> TrainState<T> {
    /// Build the net for `spec` with the heads the mode needs.
    pub fn new(spec: &FusedNetSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = FusedNet::build_with(spec, config.mode.build_options(), config.seed)?;
        Self::from_net(net, config)
    }

    /// Train an existing net; it must carry the heads the mode needs.
    pub fn from_net(net: FusedNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = zero_velocity(net.layers());
        Ok(TrainState {
            net,
            velocity,
            config,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Run the remaining epochs. On divergence the error is returned and the
    /// state holds the parameters of the last finite step.
    pub fn fit(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<&[EpochMetrics]> {
        self.fit_with(train, test, |_| {})
    }

    /// [`TrainState::fit`] with a callback after each epoch.
    pub fn fit_with(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<&[EpochMetrics]> {
        check_dataset(&self.net, train)?;
        if let Some(t) = test {
            check_dataset(&self.net, t)?;
        }
        let images: Tensor<T> = train.prepared(self.config.augmentation.gcn);
        let test_images: Option<Tensor<T>> = test.map(|t| t.prepared(self.config.augmentation.gcn));
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(&images, &train.labels, test.zip(test_images.as_ref()))?;
            on_epoch(&m);
        }
        Ok(&self.log)
    }

    fn run_epoch(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        test: Option<(&Dataset, &Tensor<T>)>,
    ) -> Result<EpochMetrics> {
        let cfg = &self.config;
        let lr = cfg.lr_at(self.epoch);
        let step = SgdStep {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let mut rng = epoch_rng(cfg.seed, self.epoch);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut errors) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch) {
            let mut x = images.select(idx);
            if cfg.augment {
                x = augment(&x, &cfg.augmentation, &mut rng);
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let obj = objective(&mut self.net, &x, &y, cfg.mode, cfg.aux_weight, Mode::Train)?;
            let loss = obj.loss.as_f64();
            if !loss.is_finite() {
                self.net.clear_retained();
                return Err(Error::NonFinite {
                    step: self.step,
                    what: format!("training loss {loss} in epoch {}", self.epoch + 1),
                });
            }
            self.net.zero_grad();
            self.net.backward(&obj.d_scores, &obj.d_aux)?;
            self.net.clear_retained();
            let (layers, grads) = self.net.layers_and_grads_mut();
            sgd_step(layers, &mut self.velocity, grads, step, self.step)?;
            self.step += 1;
            loss_sum += loss * idx.len() as f64;
            errors += count_errors(&obj.predictions, &y);
        }
        let n = labels.len().max(1) as f64;
        let test_err = match test {
            Some((data, prepared)) => Some(self.evaluate_prepared(prepared, &data.labels)?.error),
            None => None,
        };
        self.epoch += 1;
        let m = EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / n,
            train_err: errors as f64 / n,
            test_err,
        };
        self.log.push(m.clone());
        Ok(m)
    }

    /// Error and loss of the current parameters in eval mode.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<EvalReport> {
        check_dataset(&self.net, data)?;
        let images = data.prepared(self.config.augmentation.gcn);
        self.evaluate_prepared(&images, &data.labels)
    }

    fn evaluate_prepared(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<EvalReport> {
        evaluate_images(&mut self.net, images, labels, self.config.mode, self.config.eval_batch)
    }
}

/// Eval-mode top-1 error and mean cross-entropy of already prepared images.
/// Decision modes score the mean of the member probabilities.
pub fn evaluate_images<T: Scalar>(
    net: &mut FusedNet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: TrainMode,
    batch: usize,
) -> Result<EvalReport> {
    let order: Vec<usize> = (0..labels.len()).collect();
    let (mut loss, mut errors) = (0.0, 0usize);
    for idx in order.chunks(batch.max(1)) {
        let x = images.select(idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let obj = objective(net, &x, &y, mode, 0.0, Mode::Eval)?;
        let probs = if mode.is_decision() {
            obj.predictions.clone()
        } else {
            softmax(&obj.predictions)
        };
        let k = probs.shape().c;
        for (row, &label) in probs.data().chunks(k).zip(&y) {
            loss -= row[label].as_f64().max(f64::MIN_POSITIVE).ln();
        }
        errors += count_errors(&obj.predictions, &y);
    }
    net.clear_retained();
    let n = labels.len().max(1) as f64;
    Ok(EvalReport {
        error: errors as f64 / n,
        loss: loss / n,
        samples: labels.len(),
    })
}

/// Evaluate `net` on `data` after GCN, with `mode` deciding the wiring.
pub fn evaluate<T: Scalar>(net: &mut FusedNet<T>, data: &Dataset, mode: TrainMode, gcn: bool) -> Result<EvalReport> {
    check_dataset(net, data)?;
    let images = data.prepared(gcn);
    evaluate_images(net, &images, &data.labels, mode, 500)
}

/// Build and train a net for `spec` from scratch.
pub fn train<T: Scalar>(
    spec: &FusedNetSpec,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(spec, config)?;
    state.fit(train_set, test_set)?;
    Ok(state)
}
