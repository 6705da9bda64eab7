use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the gated encoder classifier.
///
/// The last class index is reserved as the REJECT class; it never receives
/// natural training samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab_size: 32,
            num_classes: 5,
            max_seq_len: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_classes < 3 {
            return Err(Error::InvalidConfig(format!(
                "num_classes {} < 3 (need two content classes plus REJECT)",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn reject_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn content_classes(&self) -> usize {
        self.num_classes - 1
    }

    /// Modules per layer: heads followed by filters.
    pub fn modules_per_layer(&self) -> usize {
        self.num_heads + self.d_ff
    }

    /// Total number of maskable modules `n`.
    pub fn module_count(&self) -> usize {
        self.num_layers * self.modules_per_layer()
    }

    pub fn layer_layout(&self) -> LayerLayout {
        LayerLayout {
            num_layers: self.num_layers,
            heads_per_layer: self.num_heads,
            filters_per_layer: self.d_ff,
        }
    }
}

/// A maskable unit: one attention head or one FFN hidden unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Module {
    Head { layer: usize, head: usize },
    Filter { layer: usize, filter: usize },
}

/// Maps global module indices to layers.
///
/// The global mask vector is the concatenation of the head mask and the
/// filter mask, each stored layer-major:
/// `[L0 heads, L1 heads, .., L0 filters, L1 filters, ..]`.
/// Within a layer the local coordinate order is heads then filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerLayout {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub filters_per_layer: usize,
}

impl LayerLayout {
    pub fn module_count(&self) -> usize {
        self.num_layers * self.layer_size()
    }

    pub fn layer_size(&self) -> usize {
        self.heads_per_layer + self.filters_per_layer
    }

    pub fn head_count(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    pub fn module(&self, index: usize) -> Module {
        let hc = self.head_count();
        if index < hc {
            Module::Head {
                layer: index / self.heads_per_layer,
                head: index % self.heads_per_layer,
            }
        } else {
            let j = index - hc;
            Module::Filter {
                layer: j / self.filters_per_layer,
                filter: j % self.filters_per_layer,
            }
        }
    }

    pub fn index_of(&self, module: Module) -> usize {
        match module {
            Module::Head { layer, head } => layer * self.heads_per_layer + head,
            Module::Filter { layer, filter } => {
                self.head_count() + layer * self.filters_per_layer + filter
            }
        }
    }

    pub fn layer_of(&self, index: usize) -> usize {
        match self.module(index) {
            Module::Head { layer, .. } | Module::Filter { layer, .. } => layer,
        }
    }

    /// Global indices of layer `l`'s modules in local order (heads, then filters).
    pub fn layer_indices(&self, layer: usize) -> Vec<usize> {
        let heads = (0..self.heads_per_layer).map(|h| layer * self.heads_per_layer + h);
        let filters = (0..self.filters_per_layer)
            .map(|f| self.head_count() + layer * self.filters_per_layer + f);
        heads.chain(filters).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_dim_and_module_count() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 8);
        assert_eq!(cfg.module_count(), 136);
        assert_eq!(cfg.reject_class(), 4);
    }

    #[test]
    fn rejects_indivisible_width() {
        let cfg = ModelConfig {
            d_model: 30,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_too_few_classes() {
        let cfg = ModelConfig {
            num_classes: 2,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layout_indexing_round_trips() {
        let layout = ModelConfig::default().layer_layout();
        for i in 0..layout.module_count() {
            assert_eq!(layout.index_of(layout.module(i)), i);
        }
        let l1 = layout.layer_indices(1);
        assert_eq!(l1.len(), 68);
        assert_eq!(l1[0], 4);
        assert_eq!(l1[4], 8 + 64);
        assert!(l1.iter().all(|&i| layout.layer_of(i) == 1));
    }
}
