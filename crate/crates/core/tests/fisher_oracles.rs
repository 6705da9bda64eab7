mod common;

use common::{random_batch, random_model, small_config};
use mape_core::fisher::{block_fim_masks, diag_fim_masks, diag_fim_params, fisher_stats, min_eigenvalue};
use mape_core::tinyformer::{loss_and_grads, ModelState, Sample};
use ndarray::Array2;

struct Brute {
    param_diag: Vec<f64>,
    mask_diag: Vec<f64>,
    blocks: Vec<Array2<f64>>,
}

/// Straight accumulation over single-sample gradients in the given order.
fn brute(state: &ModelState, data: &[Sample]) -> Brute {
    let layout = state.config.layer_layout();
    let m = layout.layer_size();
    let mut param_diag = vec![0.0; state.num_params()];
    let mut mask_diag = vec![0.0; layout.module_count()];
    let mut blocks = vec![Array2::<f64>::zeros((m, m)); layout.num_layers];
    for s in data {
        let g = loss_and_grads(state, None, std::slice::from_ref(s)).unwrap();
        for (a, x) in param_diag.iter_mut().zip(&g.param_grads) {
            *a += x * x;
        }
        for (a, x) in mask_diag.iter_mut().zip(&g.mask_grads) {
            *a += x * x;
        }
        for (l, b) in blocks.iter_mut().enumerate() {
            let idx = layout.layer_indices(l);
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    b[[r, c]] += g.mask_grads[i] * g.mask_grads[j];
                }
            }
        }
    }
    let n = data.len() as f64;
    Brute {
        param_diag: param_diag.into_iter().map(|v| v / n).collect(),
        mask_diag: mask_diag.into_iter().map(|v| v / n).collect(),
        blocks: blocks.into_iter().map(|b| b / n).collect(),
    }
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fisher_matches_brute_force_and_is_order_independent() {
    for seed in 0..5 {
        let cfg = small_config(seed);
        let state = random_model(&cfg);
        let mut data = random_batch(&cfg, 24, 50 + seed);
        let oracle = brute(&state, &data);
        assert!(max_abs_diff(&diag_fim_params(&state, &data).unwrap(), &oracle.param_diag) <= 1e-12);
        assert!(max_abs_diff(&diag_fim_masks(&state, &data).unwrap(), &oracle.mask_diag) <= 1e-12);
        let blocks = block_fim_masks(&state, &data).unwrap();
        for (b, o) in blocks.iter().zip(&oracle.blocks) {
            assert!(max_abs_diff(b.iter(), o.iter()) <= 1e-12);
            assert!(min_eigenvalue(b) >= -1e-10);
        }
        let stats = fisher_stats(&state, &data).unwrap();
        data.reverse();
        assert_eq!(stats, fisher_stats(&state, &data).unwrap());
    }
}

#[test]
fn block_diagonals_equal_the_diagonal_fisher() {
    let cfg = small_config(3);
    let state = random_model(&cfg);
    let data = random_batch(&cfg, 16, 4);
    let stats = fisher_stats(&state, &data).unwrap();
    let layout = cfg.layer_layout();
    for (l, b) in stats.mask_blocks.iter().enumerate() {
        for (j, &i) in layout.layer_indices(l).iter().enumerate() {
            assert!((b[[j, j]] - stats.mask_diag[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn jacobi_eigenvalue_on_known_matrix() {
    // eigenvalues of [[2, 1], [1, 2]] are 1 and 3
    let m = ndarray::arr2(&[[2.0, 1.0], [1.0, 2.0]]);
    assert!((min_eigenvalue(&m) - 1.0).abs() < 1e-12);
}
