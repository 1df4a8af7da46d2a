use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::Mode;
use super::model::{cross_entropy, cross_entropy_backward, ArchDescriptor, CnnModel};
use super::tensor::Tensor;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
    /// Epochs between learning-rate drops.
    pub lr_step: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0,
            lr0: 0.001,
            lr_step: 8,
            lr_factor: 0.1,
            epochs: 20,
            dropout_p: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation("dropout probability must be in [0, 1)"));
        }
        if self.lr_step == 0 || !(self.lr0 > 0.0) {
            return Err(Error::validation(
                "learning-rate schedule must have lr0 > 0 and step >= 1",
            ));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::validation("weight decay is not supported"));
        }
        Ok(())
    }
}

/// Step schedule: `lr0 * lr_factor^floor(epoch / lr_step)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = cfg.lr0;
    for _ in 0..epoch / cfg.lr_step {
        lr *= cfg.lr_factor;
    }
    lr
}

/// Heavy-ball momentum: `v <- momentum * v + g`, `w <- w - lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert!(params.len() == grads.len() && grads.len() == velocity.len());
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub epoch_lr: Vec<f64>,
}

/// Trains a fresh network on `[0, 1]`-scaled single-channel inputs with
/// binary labels. Mini-batches are reshuffled every epoch; a trailing batch
/// of one sample is skipped because batch norm needs two.
pub fn train(inputs: &[&[f64]], labels: &[u8], arch: &ArchDescriptor, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::validation("cannot train on an empty dataset"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs, {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| usize::from(y) >= arch.classes) {
        return Err(Error::validation(format!(
            "label {bad} outside {} classes",
            arch.classes
        )));
    }
    let (h, w) = (arch.input_height, arch.input_width);

    let mut model = CnnModel::new(arch.clone(), cfg.dropout_p, rng::derive(cfg.seed, "cnn-init"))?;
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut dropout_rng = rng::stream(rng::derive(cfg.seed, "cnn-dropout"), 0);
    let shuffle_seed = rng::derive(cfg.seed, "cnn-shuffle");

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_lr = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(shuffle_seed, epoch as u64));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let planes: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i]).collect();
            let batch = Tensor::from_planes(&planes, h, w)?;
            let y: Vec<usize> = chunk.iter().map(|&i| usize::from(labels[i])).collect();

            let (probs, tape) = model.forward(&batch, Mode::Train, &mut dropout_rng)?;
            let loss = cross_entropy(&probs, &y)?;
            let grads = model.backward(&tape, &cross_entropy_backward(&probs, &y))?;
            for ((p, g), v) in model.params_mut().into_iter().zip(&grads).zip(&mut velocity) {
                sgd_step(p, g, v, lr, cfg.momentum);
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        log::debug!("epoch {epoch}: lr {lr:e}, loss {mean:.5}");
        epoch_loss.push(mean);
        epoch_lr.push(lr);
    }
    Ok(TrainOutcome {
        model,
        epoch_loss,
        epoch_lr,
    })
}
