use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{loss_and_grads, Sample};
use super::state::{init_model, ModelState};
use crate::error::{Error, Result};
use crate::evalattack::accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Decays the learning rate linearly to zero over the run.
    pub linear_decay: bool,
    pub seed: u64,
}

impl Default for TrainHParams {
    fn default() -> Self {
        TrainHParams {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            linear_decay: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD with heavy-ball momentum, starting from `init_model(config)`.
pub fn train(config: &ModelConfig, data: &[Sample], test: Option<&[Sample]>, hp: &TrainHParams) -> Result<TrainOutcome> {
    let state = init_model(config)?;
    let (state, epoch_losses) = sgd_epochs(state, data, hp)?;
    let train_acc = if data.is_empty() { 0.0 } else { accuracy(&state, data)? };
    let test_acc = match test {
        Some(t) if !t.is_empty() => Some(accuracy(&state, t)?),
        _ => None,
    };
    Ok(TrainOutcome {
        state,
        train_acc,
        test_acc,
        epoch_losses,
    })
}

/// Continues SGD-with-momentum training from an existing state.
pub fn sgd_epochs(state: ModelState, data: &[Sample], hp: &TrainHParams) -> Result<(ModelState, Vec<f64>)> {
    sgd_epochs_with(state, data, hp, |_, _| Ok(()))
}

/// Like [`sgd_epochs`], calling `on_epoch(epoch, state)` after every epoch (1-based).
pub fn sgd_epochs_with<F>(
    mut state: ModelState,
    data: &[Sample],
    hp: &TrainHParams,
    mut on_epoch: F,
) -> Result<(ModelState, Vec<f64>)>
where
    F: FnMut(usize, &ModelState) -> Result<()>,
{
    if hp.epochs == 0 {
        return Ok((state, Vec::new()));
    }
    if data.is_empty() {
        return Err(Error::EmptyData("training split"));
    }
    if hp.batch_size == 0 || !(hp.lr > 0.0) {
        return Err(Error::InvalidHParam("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = state.zeros_like();
    let mut losses = Vec::with_capacity(hp.epochs);
    let mut batch = Vec::with_capacity(hp.batch_size);
    let total_steps = (hp.epochs * data.len().div_ceil(hp.batch_size)) as f64;
    let mut step = 0usize;
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let lg = loss_and_grads(&state, None, &batch)?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            total += lg.loss * chunk.len() as f64;
            let lr = if hp.linear_decay {
                hp.lr * (1.0 - step as f64 / total_steps)
            } else {
                hp.lr
            };
            step += 1;
            for ((p, v), g) in state.params.iter_mut().zip(velocity.iter_mut()).zip(&lg.param_grads) {
                *v = hp.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        losses.push(total / data.len() as f64);
        on_epoch(epoch, &state)?;
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("training parameters"));
    }
    Ok((state, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = ModelConfig::default();
        let hp = TrainHParams {
            epochs: 0,
            ..TrainHParams::default()
        };
        let data = vec![Sample {
            id: 0,
            tokens: vec![1, 2, 3],
            label: 0,
        }];
        let out = train(&cfg, &data, None, &hp).unwrap();
        assert_eq!(out.state, init_model(&cfg).unwrap());
    }
}
