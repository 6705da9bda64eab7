use serde::{Deserialize, Serialize};

use super::config::{LayerLayout, ModelConfig};
use super::state::{ModelState, ModuleMap};
use crate::error::{Error, Result};

/// Number of modules kept active at sparsity `s`: `floor((1 - s) * n)`.
///
/// A small tolerance absorbs representation error, so `s = 0.9, n = 10`
/// yields 1 rather than 0.
pub fn active_budget(n: usize, sparsity: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidSparsity(sparsity));
    }
    Ok((((1.0 - sparsity) * n as f64) + 1e-9).floor() as usize)
}

/// Binary head and filter masks; 1 = the module's parameters are updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub head_mask: Vec<bool>,
    pub filter_mask: Vec<bool>,
    pub sparsity: f64,
    pub layout: LayerLayout,
}

impl MaskPair {
    /// Builds a mask from a global activity vector (heads then filters, layer-major).
    pub fn from_active(layout: LayerLayout, active: &[bool], sparsity: f64) -> Result<MaskPair> {
        let n = layout.module_count();
        if active.len() != n {
            return Err(Error::ShapeMismatch {
                what: "mask vector",
                expected: n,
                got: active.len(),
            });
        }
        let hc = layout.head_count();
        let mask = MaskPair {
            head_mask: active[..hc].to_vec(),
            filter_mask: active[hc..].to_vec(),
            sparsity,
            layout,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn all_active(layout: LayerLayout) -> MaskPair {
        MaskPair {
            head_mask: vec![true; layout.head_count()],
            filter_mask: vec![true; layout.module_count() - layout.head_count()],
            sparsity: 0.0,
            layout,
        }
    }

    pub fn all_frozen(layout: LayerLayout, sparsity: f64) -> MaskPair {
        MaskPair {
            head_mask: vec![false; layout.head_count()],
            filter_mask: vec![false; layout.module_count() - layout.head_count()],
            sparsity,
            layout,
        }
    }

    pub fn module_count(&self) -> usize {
        self.head_mask.len() + self.filter_mask.len()
    }

    pub fn active(&self) -> Vec<bool> {
        self.head_mask.iter().chain(&self.filter_mask).copied().collect()
    }

    pub fn is_active(&self, module: usize) -> bool {
        let hc = self.head_mask.len();
        if module < hc {
            self.head_mask[module]
        } else {
            self.filter_mask[module - hc]
        }
    }

    pub fn active_count(&self) -> usize {
        self.head_mask.iter().chain(&self.filter_mask).filter(|b| **b).count()
    }

    pub fn budget(&self) -> Result<usize> {
        active_budget(self.module_count(), self.sparsity)
    }

    /// Gate values (1.0 active / 0.0 frozen).
    pub fn as_gates(&self) -> Vec<f64> {
        self.active().iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layout.module_count();
        if self.module_count() != n || self.head_mask.len() != self.layout.head_count() {
            return Err(Error::ShapeMismatch {
                what: "mask pair",
                expected: n,
                got: self.module_count(),
            });
        }
        let budget = self.budget()?;
        let active = self.active_count();
        if active > budget {
            return Err(Error::BudgetViolated { active, budget });
        }
        Ok(())
    }

    pub fn check_bound(&self, config: &ModelConfig) -> Result<()> {
        if self.layout != config.layer_layout() {
            return Err(Error::ShapeMismatch {
                what: "mask module count",
                expected: config.module_count(),
                got: self.module_count(),
            });
        }
        Ok(())
    }
}

/// Adds `delta` to the parameters correlated with active modules only.
///
/// Non-module parameters and parameters of frozen modules are returned
/// bit-identical to the input.
pub fn apply_masked_delta(state: &ModelState, mask: &MaskPair, delta: &[f64]) -> Result<ModelState> {
    mask.check_bound(&state.config)?;
    if delta.len() != state.num_params() {
        return Err(Error::ShapeMismatch {
            what: "delta",
            expected: state.num_params(),
            got: delta.len(),
        });
    }
    let map = ModuleMap::new(state);
    let mut out = state.clone();
    for i in map.active_indices(&mask.active()) {
        out.params[i] += delta[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::{init_model, ModelConfig};

    #[test]
    fn budget_floor() {
        assert_eq!(active_budget(10, 0.9).unwrap(), 1);
        assert_eq!(active_budget(136, 0.9).unwrap(), 13);
        assert_eq!(active_budget(136, 0.0).unwrap(), 136);
        assert_eq!(active_budget(7, 0.5).unwrap(), 3);
        assert!(active_budget(10, 1.0).is_err());
        assert!(active_budget(10, -0.1).is_err());
    }

    #[test]
    fn all_zero_mask_leaves_state_untouched() {
        let s = init_model(&ModelConfig::default()).unwrap();
        let mask = MaskPair::all_frozen(s.config.layer_layout(), 0.5);
        let delta = vec![0.25; s.num_params()];
        let out = apply_masked_delta(&s, &mask, &delta).unwrap();
        assert!(out.params.iter().zip(&s.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn all_ones_mask_shifts_module_params_only() {
        let s = init_model(&ModelConfig::default()).unwrap();
        let map = ModuleMap::new(&s);
        let mask = MaskPair::all_active(s.config.layer_layout());
        let delta = vec![0.5; s.num_params()];
        let out = apply_masked_delta(&s, &mask, &delta).unwrap();
        for i in 0..s.num_params() {
            if map.is_module_param(i) {
                assert_eq!(out.params[i], s.params[i] + 0.5);
            } else {
                assert_eq!(out.params[i].to_bits(), s.params[i].to_bits());
            }
        }
    }

    #[test]
    fn single_head_touches_four_blocks() {
        let cfg = ModelConfig::default();
        let s = init_model(&cfg).unwrap();
        let layout = cfg.layer_layout();
        let mut active = vec![false; layout.module_count()];
        active[1] = true; // layer 0, head 1
        let mask = MaskPair::from_active(layout, &active, 0.9).unwrap();
        let delta = vec![1.0; s.num_params()];
        let out = apply_masked_delta(&s, &mask, &delta).unwrap();
        let changed: Vec<usize> = (0..s.num_params())
            .filter(|&i| out.params[i].to_bits() != s.params[i].to_bits())
            .collect();
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        assert_eq!(changed.len(), 4 * d * dh);
        let o = &s.layout().layers[0];
        for &i in &changed {
            let in_col_block = |w: usize| i >= w && i < w + d * d && ((i - w) % d) / dh == 1;
            let in_row_block = i >= o.wo + dh * d && i < o.wo + 2 * dh * d;
            assert!(in_col_block(o.wq) || in_col_block(o.wk) || in_col_block(o.wv) || in_row_block);
        }
    }

    #[test]
    fn over_budget_mask_rejected() {
        let layout = ModelConfig::default().layer_layout();
        let active = vec![true; layout.module_count()];
        assert!(matches!(
            MaskPair::from_active(layout, &active, 0.9),
            Err(Error::BudgetViolated { .. })
        ));
    }
}
