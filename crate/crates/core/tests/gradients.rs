mod common;

use common::{central_diff, probe_indices, random_batch, random_model, rel_err, small_config};
use mape_core::tinyformer::{forward, loss_and_grads, ModelState, Module};
use mape_core::unlearn::{dpo_loss, ga_loss, gd_loss, idk_pairs, npo_loss, ReferenceModel};

fn with_params(state: &ModelState, params: &[f64]) -> ModelState {
    let mut s = state.clone();
    s.params.copy_from_slice(params);
    s
}

#[test]
fn parameter_gradient_matches_central_differences() {
    for seed in 0..4 {
        let cfg = small_config(seed);
        let state = random_model(&cfg);
        let batch = random_batch(&cfg, 5, 100 + seed);
        let lg = loss_and_grads(&state, None, &batch).unwrap();
        for i in probe_indices(&lg.param_grads, 40, 40) {
            let fd = central_diff(&state.params, i, 1e-5, |p| {
                loss_and_grads(&with_params(&state, p), None, &batch).unwrap().loss
            });
            let err = rel_err(lg.param_grads[i], fd, 1e-6);
            assert!(err < 1e-5, "seed {seed} param {i}: {} vs {fd} ({err:e})", lg.param_grads[i]);
        }
    }
}

#[test]
fn gate_gradient_matches_central_differences_away_from_one() {
    let cfg = small_config(9);
    let state = random_model(&cfg);
    let batch = random_batch(&cfg, 6, 3);
    let gates: Vec<f64> = (0..cfg.module_count()).map(|i| 0.3 + 0.05 * (i % 13) as f64).collect();
    let lg = loss_and_grads(&state, Some(&gates), &batch).unwrap();
    for i in 0..gates.len() {
        let fd = central_diff(&gates, i, 1e-3, |g| loss_and_grads(&state, Some(g), &batch).unwrap().loss);
        assert!(rel_err(lg.mask_grads[i], fd, 1e-6) < 1e-4, "gate {i}");
    }
}

#[test]
fn closing_a_head_gate_equals_zeroing_its_output_rows() {
    let cfg = small_config(4);
    let state = random_model(&cfg);
    let batch = random_batch(&cfg, 4, 8);
    let layout = cfg.layer_layout();
    let dh = cfg.head_dim();
    let d = cfg.d_model;
    for layer in 0..cfg.num_layers {
        for head in 0..cfg.num_heads {
            let mut gates = vec![1.0; cfg.module_count()];
            gates[layout.index_of(Module::Head { layer, head })] = 0.0;
            let gated = forward(&state, Some(&gates), &batch).unwrap();
            let mut zeroed = state.clone();
            let wo = state.layout().layers[layer].wo;
            for r in head * dh..(head + 1) * dh {
                zeroed.params[wo + r * d..wo + (r + 1) * d].fill(0.0);
            }
            let plain = forward(&zeroed, None, &batch).unwrap();
            for (a, b) in gated.iter().zip(plain.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn closing_a_filter_gate_equals_removing_the_filter() {
    let cfg = small_config(5);
    let state = random_model(&cfg);
    let batch = random_batch(&cfg, 4, 9);
    let layout = cfg.layer_layout();
    let (d, f) = (cfg.d_model, cfg.d_ff);
    for layer in 0..cfg.num_layers {
        for filter in 0..f {
            let mut gates = vec![1.0; cfg.module_count()];
            gates[layout.index_of(Module::Filter { layer, filter })] = 0.0;
            let gated = forward(&state, Some(&gates), &batch).unwrap();
            let mut zeroed = state.clone();
            let w2 = state.layout().layers[layer].w2;
            for r in 0..d {
                zeroed.params[w2 + r * f + filter] = 0.0;
            }
            let plain = forward(&zeroed, None, &batch).unwrap();
            for (a, b) in gated.iter().zip(plain.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unlearning_losses_match_central_differences() {
    let cfg = small_config(11);
    let reference_state = random_model(&cfg);
    let reference = ReferenceModel::new(&reference_state);
    let mut state = reference_state.clone();
    for (i, p) in state.params.iter_mut().enumerate() {
        *p += 0.01 * ((i * 7919 % 17) as f64 - 8.0) / 8.0;
    }
    let forget = random_batch(&cfg, 5, 21);
    let retain = random_batch(&cfg, 5, 22);
    let pairs = idk_pairs(&cfg, &forget).unwrap();
    type LossFn<'a> = Box<dyn Fn(&ModelState) -> mape_core::tinyformer::LossGrads + 'a>;
    let losses: Vec<(&str, LossFn)> = vec![
        ("GA", Box::new(|s| ga_loss(s, &forget).unwrap())),
        ("GD", Box::new(|s| gd_loss(s, &forget, Some(&retain)).unwrap())),
        ("NPO", Box::new(|s| npo_loss(s, &reference, &forget, 0.5).unwrap())),
        ("DPO", Box::new(|s| dpo_loss(s, &reference, &pairs, 0.5).unwrap())),
    ];
    for (name, f) in &losses {
        let lg = f(&state);
        for i in probe_indices(&lg.param_grads, 30, 30) {
            let fd = central_diff(&state.params, i, 1e-5, |p| f(&with_params(&state, p)).loss);
            let err = rel_err(lg.param_grads[i], fd, 1e-6);
            assert!(err <= 1e-4, "{name} param {i}: {} vs {fd}", lg.param_grads[i]);
        }
    }
}
