//! Flat parameter storage and the module-to-parameter slice map.
//!
//! All weights live in one contiguous `Vec<f64>`. The field order below is
//! also the on-disk order of the model file:
//!
//! ```text
//! tok_emb  [vocab, d]      pos_emb [max_seq_len, d]
//! per layer:
//!   ln1_g [d] ln1_b [d]
//!   wq [d, d] bq [d]  wk [d, d] bk [d]  wv [d, d] bv [d]   (x · W, head h = column block h)
//!   wo [d, d] bo [d]                                       (ctx · W, head h = row block h)
//!   ln2_g [d] ln2_b [d]
//!   w1 [d_ff, d] b1 [d_ff]                                 (filter f = row f)
//!   w2 [d, d_ff] b2 [d]                                    (filter f = column f)
//! lnf_g [d] lnf_b [d]
//! wc [d, classes] bc [classes]
//! ```

use ndarray::{ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerLayout, Module, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub wc: usize,
    pub bc: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> ParamLayout {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(cfg.vocab_size * d);
        let pos_emb = take(cfg.max_seq_len * d);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            layers.push(LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(f * d),
                b1: take(f),
                w2: take(d * f),
                b2: take(d),
            });
        }
        let lnf_g = take(d);
        let lnf_b = take(d);
        let wc = take(d * cfg.num_classes);
        let bc = take(cfg.num_classes);
        ParamLayout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            wc,
            bc,
            total: at,
        }
    }

    /// Named tensors in storage order with their shapes.
    pub fn fields(&self, cfg: &ModelConfig) -> Vec<(String, usize, Vec<usize>)> {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb, vec![cfg.vocab_size, d]),
            ("pos_emb".to_string(), self.pos_emb, vec![cfg.max_seq_len, d]),
        ];
        for (l, o) in self.layers.iter().enumerate() {
            let entries: [(&str, usize, Vec<usize>); 16] = [
                ("ln1_g", o.ln1_g, vec![d]),
                ("ln1_b", o.ln1_b, vec![d]),
                ("wq", o.wq, vec![d, d]),
                ("bq", o.bq, vec![d]),
                ("wk", o.wk, vec![d, d]),
                ("bk", o.bk, vec![d]),
                ("wv", o.wv, vec![d, d]),
                ("bv", o.bv, vec![d]),
                ("wo", o.wo, vec![d, d]),
                ("bo", o.bo, vec![d]),
                ("ln2_g", o.ln2_g, vec![d]),
                ("ln2_b", o.ln2_b, vec![d]),
                ("w1", o.w1, vec![f, d]),
                ("b1", o.b1, vec![f]),
                ("w2", o.w2, vec![d, f]),
                ("b2", o.b2, vec![d]),
            ];
            for (name, off, shape) in entries {
                out.push((format!("layer{l}.{name}"), off, shape));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g, vec![d]));
        out.push(("lnf_b".to_string(), self.lnf_b, vec![d]));
        out.push(("wc".to_string(), self.wc, vec![d, cfg.num_classes]));
        out.push(("bc".to_string(), self.bc, vec![cfg.num_classes]));
        out
    }
}

/// All trainable parameters of the gated transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: ParamLayout,
}

impl ModelState {
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<ModelState> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                what: "parameter vector",
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(ModelState {
            config,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn mat(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[offset..offset + rows * cols])
            .expect("layout-consistent view")
    }

    pub(crate) fn vec(&self, offset: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[offset..offset + len])
    }

    /// Returns a zero vector shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }
}

/// Deterministic initialization from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let mut params = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let f = config.d_ff;

    let mut fill = |params: &mut [f64], std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        for p in params.iter_mut() {
            *p = normal.sample(&mut rng);
        }
    };
    let w_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    fill(&mut params[layout.tok_emb..layout.tok_emb + config.vocab_size * d], 1.0);
    fill(&mut params[layout.pos_emb..layout.pos_emb + config.max_seq_len * d], 1.0);
    for o in &layout.layers {
        params[o.ln1_g..o.ln1_g + d].fill(1.0);
        params[o.ln2_g..o.ln2_g + d].fill(1.0);
        for w in [o.wq, o.wk, o.wv, o.wo] {
            fill(&mut params[w..w + d * d], w_std(d));
        }
        fill(&mut params[o.w1..o.w1 + f * d], w_std(d));
        fill(&mut params[o.w2..o.w2 + d * f], w_std(f));
    }
    params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
    fill(
        &mut params[layout.wc..layout.wc + d * config.num_classes],
        w_std(d),
    );

    Ok(ModelState {
        config: *config,
        params,
        layout,
    })
}

/// Flat parameter indices correlated with each module.
///
/// Head `h` of a layer owns its query/key/value column blocks and its
/// output-projection row block (attention biases are not included).
/// Filter `f` owns row `f` of `w1`, entry `f` of `b1` and column `f` of `w2`.
/// Embeddings, normalization parameters and the classifier head belong to no
/// module. Module slices are pairwise disjoint.
#[derive(Debug, Clone)]
pub struct ModuleMap {
    layout: LayerLayout,
    slices: Vec<Vec<usize>>,
    is_module_param: Vec<bool>,
}

impl ModuleMap {
    pub fn new(state: &ModelState) -> ModuleMap {
        let cfg = &state.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let f = cfg.d_ff;
        let layout = cfg.layer_layout();
        let mut slices = Vec::with_capacity(layout.module_count());
        for i in 0..layout.module_count() {
            let mut idx = Vec::new();
            match layout.module(i) {
                Module::Head { layer, head } => {
                    let o = &state.layout.layers[layer];
                    for w in [o.wq, o.wk, o.wv] {
                        for r in 0..d {
                            for c in head * dh..(head + 1) * dh {
                                idx.push(w + r * d + c);
                            }
                        }
                    }
                    for r in head * dh..(head + 1) * dh {
                        for c in 0..d {
                            idx.push(o.wo + r * d + c);
                        }
                    }
                }
                Module::Filter { layer, filter } => {
                    let o = &state.layout.layers[layer];
                    for c in 0..d {
                        idx.push(o.w1 + filter * d + c);
                    }
                    idx.push(o.b1 + filter);
                    for r in 0..d {
                        idx.push(o.w2 + r * f + filter);
                    }
                }
            }
            slices.push(idx);
        }
        let mut is_module_param = vec![false; state.num_params()];
        for s in &slices {
            for &i in s {
                is_module_param[i] = true;
            }
        }
        ModuleMap {
            layout,
            slices,
            is_module_param,
        }
    }

    pub fn layer_layout(&self) -> LayerLayout {
        self.layout
    }

    pub fn module_count(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, module: usize) -> &[usize] {
        &self.slices[module]
    }

    pub fn is_module_param(&self, index: usize) -> bool {
        self.is_module_param[index]
    }

    pub fn module_param_count(&self) -> usize {
        self.is_module_param.iter().filter(|b| **b).count()
    }

    /// Flat indices owned by the active modules of `active`, in module order.
    pub fn active_indices(&self, active: &[bool]) -> Vec<usize> {
        self.slices
            .iter()
            .zip(active)
            .filter(|(_, a)| **a)
            .flat_map(|(s, _)| s.iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert!(a.params.iter().zip(&b.params).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = init_model(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn layout_covers_vector() {
        let cfg = ModelConfig::default();
        let s = init_model(&cfg).unwrap();
        let fields = s.layout().fields(&cfg);
        let mut at = 0;
        for (_, off, shape) in fields {
            assert_eq!(off, at);
            at += shape.iter().product::<usize>();
        }
        assert_eq!(at, s.num_params());
    }

    #[test]
    fn module_slices_disjoint_with_expected_sizes() {
        let cfg = ModelConfig::default();
        let s = init_model(&cfg).unwrap();
        let map = ModuleMap::new(&s);
        let d = cfg.d_model;
        assert_eq!(map.slice(0).len(), 4 * d * cfg.head_dim());
        let filter0 = cfg.layer_layout().head_count();
        assert_eq!(map.slice(filter0).len(), 2 * d + 1);
        let total: usize = (0..map.module_count()).map(|m| map.slice(m).len()).sum();
        assert_eq!(total, map.module_param_count());
    }

    #[test]
    fn wrong_param_length_rejected() {
        let cfg = ModelConfig::default();
        assert!(ModelState::from_params(cfg, vec![0.0; 3]).is_err());
    }
}
