//! Helpers shared by the integration tests.
#![allow(dead_code)]

use mape_core::tinyformer::{init_model, ModelConfig, ModelState, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small architecture used by the exactness checks.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 8,
        d_ff: 6,
        vocab_size: 12,
        num_classes: 4,
        max_seq_len: 6,
        seed,
    }
}

/// Random init with every parameter (biases and norms included) jittered.
pub fn random_model(cfg: &ModelConfig) -> ModelState {
    let mut state = init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
    for p in state.params.iter_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    state
}

/// Random sequences with labels among the content classes.
pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let len = rng.random_range(2..=cfg.max_seq_len);
            Sample {
                id,
                tokens: (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect(),
                label: rng.random_range(0..cfg.num_classes - 1),
            }
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let up = f(&xp);
    xp[i] = x[i] - h;
    let down = f(&xp);
    (up - down) / (2.0 * h)
}

/// Parameter coordinates to probe: the largest-gradient entries plus a spread.
pub fn probe_indices(grad: &[f64], top: usize, spread: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let mut idx: Vec<usize> = order.into_iter().take(top).collect();
    let step = (grad.len() / spread.max(1)).max(1);
    idx.extend((0..grad.len()).step_by(step).take(spread));
    idx.sort_unstable();
    idx.dedup();
    idx
}
