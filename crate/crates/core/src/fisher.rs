//! Empirical Fisher information over parameters and over module gates.
//!
//! Per-sample gradients come from batch-size-1 passes evaluated at gates = 1.
//! They may be computed in parallel, but every reduction runs serially in
//! ascending sample-id order, so results are bit-identical regardless of the
//! input order or thread count.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinyformer::{cross_entropy, par_map_samples, sample_grad_with, LayerLayout, ModelState, Sample, SampleGrad};

const CHUNK: usize = 128;

/// Per-sample objective on the logits: returns the loss and its logit gradient.
pub type Objective = dyn Fn(&Sample, ArrayView1<'_, f64>) -> (f64, Array1<f64>) + Sync;

pub fn ce_objective(s: &Sample, logits: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    cross_entropy(logits, s.label)
}

/// Visits per-sample gradients (gates = 1) in ascending sample-id order.
pub fn for_each_sample_grad<F>(state: &ModelState, data: &[Sample], objective: &Objective, mut f: F) -> Result<()>
where
    F: FnMut(&SampleGrad),
{
    let mut order: Vec<&Sample> = data.iter().collect();
    order.sort_by_key(|s| s.id);
    for chunk in order.chunks(CHUNK) {
        let owned: Vec<Sample> = chunk.iter().map(|s| (*s).clone()).collect();
        let grads = par_map_samples(&owned, |s| sample_grad_with(state, None, s, objective))?;
        grads.iter().for_each(&mut f);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherStats {
    /// Diagonal FIM over parameters; absent when only gate statistics were computed.
    pub param_diag: Option<Vec<f64>>,
    /// Diagonal FIM over gates, global module order.
    pub mask_diag: Vec<f64>,
    /// One matrix per layer over that layer's modules, heads then filters.
    pub mask_blocks: Vec<Array2<f64>>,
    pub sample_count: usize,
    pub layout: LayerLayout,
}

impl FisherStats {
    /// Builds gate statistics from explicit blocks; `mask_diag` is taken from their diagonals.
    pub fn from_blocks(layout: LayerLayout, blocks: Vec<Array2<f64>>, sample_count: usize) -> Result<FisherStats> {
        if blocks.len() != layout.num_layers {
            return Err(Error::ShapeMismatch {
                what: "fisher block count",
                expected: layout.num_layers,
                got: blocks.len(),
            });
        }
        let mut mask_diag = vec![0.0; layout.module_count()];
        for (l, b) in blocks.iter().enumerate() {
            if b.dim() != (layout.layer_size(), layout.layer_size()) {
                return Err(Error::ShapeMismatch {
                    what: "fisher block size",
                    expected: layout.layer_size(),
                    got: b.nrows(),
                });
            }
            for (j, &g) in layout.layer_indices(l).iter().enumerate() {
                mask_diag[g] = b[[j, j]];
            }
        }
        Ok(FisherStats {
            param_diag: None,
            mask_diag,
            mask_blocks: blocks,
            sample_count,
            layout,
        })
    }

    /// Multiplies every Fisher entry by `c`.
    pub fn scaled(&self, c: f64) -> FisherStats {
        FisherStats {
            param_diag: self.param_diag.as_ref().map(|v| v.iter().map(|x| x * c).collect()),
            mask_diag: self.mask_diag.iter().map(|x| x * c).collect(),
            mask_blocks: self.mask_blocks.iter().map(|b| b * c).collect(),
            sample_count: self.sample_count,
            layout: self.layout,
        }
    }
}

fn nonempty(data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        Err(Error::EmptyData("fisher data"))
    } else {
        Ok(())
    }
}

/// All Fisher statistics in one pass, under an arbitrary per-sample objective.
pub fn fisher_stats_with(state: &ModelState, data: &[Sample], objective: &Objective) -> Result<FisherStats> {
    nonempty(data)?;
    let layout = state.config.layer_layout();
    let layer_idx: Vec<Vec<usize>> = (0..layout.num_layers).map(|l| layout.layer_indices(l)).collect();
    let m = layout.layer_size();
    let mut param_diag = state.zeros_like();
    let mut mask_diag = vec![0.0; layout.module_count()];
    let mut blocks = vec![Array2::<f64>::zeros((m, m)); layout.num_layers];
    let mut local = vec![0.0; m];
    for_each_sample_grad(state, data, objective, |sg| {
        for (a, g) in param_diag.iter_mut().zip(&sg.param_grad) {
            *a += g * g;
        }
        for (a, g) in mask_diag.iter_mut().zip(&sg.mask_grad) {
            *a += g * g;
        }
        for (b, idx) in blocks.iter_mut().zip(&layer_idx) {
            for (v, &i) in local.iter_mut().zip(idx) {
                *v = sg.mask_grad[i];
            }
            for r in 0..m {
                for c in 0..m {
                    b[[r, c]] += local[r] * local[c];
                }
            }
        }
    })?;
    let n = data.len() as f64;
    param_diag.iter_mut().for_each(|v| *v /= n);
    mask_diag.iter_mut().for_each(|v| *v /= n);
    blocks.iter_mut().for_each(|b| b.mapv_inplace(|v| v / n));
    Ok(FisherStats {
        param_diag: Some(param_diag),
        mask_diag,
        mask_blocks: blocks,
        sample_count: data.len(),
        layout,
    })
}

pub fn fisher_stats(state: &ModelState, data: &[Sample]) -> Result<FisherStats> {
    fisher_stats_with(state, data, &ce_objective)
}

/// Mean over samples of squared per-sample parameter gradients.
pub fn diag_fim_params(state: &ModelState, data: &[Sample]) -> Result<Vec<f64>> {
    diag_fim_params_at(state, data, None)
}

/// Parameter diagonal FIM accumulated only at `indices` (zero elsewhere).
pub fn diag_fim_params_at(state: &ModelState, data: &[Sample], indices: Option<&[usize]>) -> Result<Vec<f64>> {
    nonempty(data)?;
    let mut acc = state.zeros_like();
    for_each_sample_grad(state, data, &ce_objective, |sg| match indices {
        Some(idx) => {
            for &i in idx {
                acc[i] += sg.param_grad[i] * sg.param_grad[i];
            }
        }
        None => {
            for (a, g) in acc.iter_mut().zip(&sg.param_grad) {
                *a += g * g;
            }
        }
    })?;
    let n = data.len() as f64;
    match indices {
        Some(idx) => idx.iter().for_each(|&i| acc[i] /= n),
        None => acc.iter_mut().for_each(|v| *v /= n),
    }
    Ok(acc)
}

/// Sum of per-sample parameter gradients, accumulated only at `indices` when given.
pub fn param_gradient_sum_at(state: &ModelState, data: &[Sample], indices: Option<&[usize]>) -> Result<Vec<f64>> {
    nonempty(data)?;
    let mut acc = state.zeros_like();
    for_each_sample_grad(state, data, &ce_objective, |sg| match indices {
        Some(idx) => idx.iter().for_each(|&i| acc[i] += sg.param_grad[i]),
        None => acc.iter_mut().zip(&sg.param_grad).for_each(|(a, g)| *a += g),
    })?;
    Ok(acc)
}

pub fn param_gradient_sum(state: &ModelState, data: &[Sample]) -> Result<Vec<f64>> {
    param_gradient_sum_at(state, data, None)
}

/// Mean over samples of squared per-sample gate gradients.
pub fn diag_fim_masks(state: &ModelState, data: &[Sample]) -> Result<Vec<f64>> {
    nonempty(data)?;
    let mut acc = vec![0.0; state.config.module_count()];
    for_each_sample_grad(state, data, &ce_objective, |sg| {
        for (a, g) in acc.iter_mut().zip(&sg.mask_grad) {
            *a += g * g;
        }
    })?;
    let n = data.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Per-layer mean outer products of gate gradients (heads then filters).
pub fn block_fim_masks(state: &ModelState, data: &[Sample]) -> Result<Vec<Array2<f64>>> {
    Ok(fisher_stats(state, data)?.mask_blocks)
}

/// Sum (not mean) of per-sample gate gradients at gates = 1.
pub fn forget_mask_gradient(state: &ModelState, forget: &[Sample]) -> Result<Vec<f64>> {
    mask_gradient_sum_with(state, forget, &ce_objective)
}

pub fn mask_gradient_sum_with(state: &ModelState, data: &[Sample], objective: &Objective) -> Result<Vec<f64>> {
    nonempty(data)?;
    let mut acc = vec![0.0; state.config.module_count()];
    for_each_sample_grad(state, data, objective, |sg| {
        for (a, g) in acc.iter_mut().zip(&sg.mask_grad) {
            *a += g;
        }
    })?;
    Ok(acc)
}

/// Smallest eigenvalue of a symmetric matrix (cyclic Jacobi rotations).
pub fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::{init_model, sample_ce_grad, ModelConfig};
    use ndarray::array;

    fn tiny() -> (ModelState, Vec<Sample>) {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            d_ff: 4,
            vocab_size: 12,
            num_classes: 3,
            max_seq_len: 5,
            seed: 11,
        };
        let st = init_model(&cfg).unwrap();
        let data = (0..8)
            .map(|i| Sample {
                id: i,
                tokens: (0..5).map(|j| (i * 7 + j * 3) % 12).collect(),
                label: i % 2,
            })
            .collect();
        (st, data)
    }

    #[test]
    fn single_sample_is_squared_gradient() {
        let (st, data) = tiny();
        let g = sample_ce_grad(&st, None, &data[0]).unwrap();
        let p = diag_fim_params(&st, &data[..1]).unwrap();
        let m = diag_fim_masks(&st, &data[..1]).unwrap();
        for (a, b) in p.iter().zip(&g.param_grad) {
            assert_eq!(*a, b * b);
        }
        for (a, b) in m.iter().zip(&g.mask_grad) {
            assert_eq!(*a, b * b);
        }
        assert_eq!(forget_mask_gradient(&st, &data[..1]).unwrap(), g.mask_grad);
    }

    #[test]
    fn block_of_single_sample_is_rank_one_outer_product() {
        let (st, data) = tiny();
        let g = sample_ce_grad(&st, None, &data[3]).unwrap();
        let blocks = block_fim_masks(&st, &data[3..4]).unwrap();
        let layout = st.config.layer_layout();
        for (l, b) in blocks.iter().enumerate() {
            let idx = layout.layer_indices(l);
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    assert_eq!(b[[r, c]], g.mask_grad[i] * g.mask_grad[j]);
                }
            }
        }
    }

    #[test]
    fn opposite_gradients_square_identically() {
        let (st, data) = tiny();
        let flip = |s: &Sample, l: ArrayView1<'_, f64>| {
            let (loss, d) = cross_entropy(l, s.label);
            if s.id == 1 {
                (-loss, -d)
            } else {
                (loss, d)
            }
        };
        let two = vec![data[0].clone(), Sample { id: 1, ..data[0].clone() }];
        let f = fisher_stats_with(&st, &two, &flip).unwrap();
        let g = sample_ce_grad(&st, None, &data[0]).unwrap();
        for (a, b) in f.mask_diag.iter().zip(&g.mask_grad) {
            assert!((a - b * b).abs() <= 1e-15 * (b * b).max(1e-300));
        }
    }

    #[test]
    fn duplicated_forget_sample_doubles_sum() {
        let (st, data) = tiny();
        let one = forget_mask_gradient(&st, &data[2..3]).unwrap();
        let dup = vec![data[2].clone(), Sample { id: 99, ..data[2].clone() }];
        let two = forget_mask_gradient(&st, &dup).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn order_invariant_bitwise() {
        let (st, data) = tiny();
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(fisher_stats(&st, &data).unwrap(), fisher_stats(&st, &rev).unwrap());
    }

    #[test]
    fn empty_data_errors() {
        let (st, _) = tiny();
        assert!(diag_fim_params(&st, &[]).is_err());
        assert!(diag_fim_masks(&st, &[]).is_err());
        assert!(block_fim_masks(&st, &[]).is_err());
        assert!(forget_mask_gradient(&st, &[]).is_err());
    }

    #[test]
    fn loss_scaling_scales_fisher_quadratically() {
        let (st, data) = tiny();
        let c = 3.0;
        let scaled = move |s: &Sample, l: ArrayView1<'_, f64>| {
            let (loss, d) = cross_entropy(l, s.label);
            (c * loss, d * c)
        };
        let base = fisher_stats(&st, &data).unwrap();
        let sc = fisher_stats_with(&st, &data, &scaled).unwrap();
        for (a, b) in base.mask_diag.iter().zip(&sc.mask_diag) {
            assert!((a * c * c - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
        let g0 = forget_mask_gradient(&st, &data).unwrap();
        let g1 = mask_gradient_sum_with(&st, &data, &scaled).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a * c - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn hand_block_and_eigen() {
        let layout = LayerLayout {
            num_layers: 1,
            heads_per_layer: 1,
            filters_per_layer: 1,
        };
        // two samples with mask grads (1,0) and (0,1) -> half identity
        let b = (array![[1.0, 0.0], [0.0, 0.0]] + array![[0.0, 0.0], [0.0, 1.0]]) / 2.0;
        let f = FisherStats::from_blocks(layout, vec![b.clone()], 2).unwrap();
        assert_eq!(f.mask_blocks[0], array![[0.5, 0.0], [0.0, 0.5]]);
        assert_eq!(f.mask_diag, vec![0.5, 0.5]);
        assert!((min_eigenvalue(&array![[2.0, 1.0], [1.0, 2.0]]) - 1.0).abs() < 1e-12);
    }
}
