//! Experiment configuration, seed derivation and content hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::TaskParams;
use crate::error::{Error, Result};
use crate::tinyformer::{ModelConfig, TrainHParams};
use crate::unlearn::{MaskSource, Method, Optimizer, UnlearnHParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Single,
    Sweep,
    Successive,
    Batch,
    Relearn,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scenario> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::InvalidConfig(format!("unknown scenario `{s}`")))
    }
}

/// Relearning attack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelearnParams {
    /// Fraction of the training set drawn (from retain) as the relearn set.
    pub fraction: f64,
    /// Recovery threshold is the pre-unlearning forget accuracy minus this.
    pub threshold_margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for RelearnParams {
    fn default() -> Self {
        RelearnParams {
            fraction: 0.2,
            threshold_margin: 0.05,
            epochs: 10,
            lr: 0.01,
            batch_size: 32,
            momentum: 0.9,
        }
    }
}

/// Successive-removal settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessiveParams {
    /// Number of requests, taken in order from the forget ids.
    pub requests: usize,
    /// Single-step updates from the original model using stored aggregates.
    pub stored_info: bool,
    /// Refine the pre-computed mask per request (stored-info mode only).
    pub refine_premask: bool,
}

impl Default for SuccessiveParams {
    fn default() -> Self {
        SuccessiveParams {
            requests: 10,
            stored_info: false,
            refine_premask: true,
        }
    }
}

/// A complete, self-describing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Master seed; every phase seed derives from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskParams,
    pub train: TrainHParams,
    pub unlearn: UnlearnHParams,
    pub sparsities: Vec<f64>,
    pub relearn: RelearnParams,
    pub successive: SuccessiveParams,
    /// Output root; `MAPE_OUT_DIR` or `runs` when absent.
    pub output_dir: Option<PathBuf>,
}

pub const OUT_DIR_ENV: &str = "MAPE_OUT_DIR";

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Single,
            seed: 0,
            model: ModelConfig::default(),
            task: TaskParams::default(),
            train: TrainHParams {
                epochs: 40,
                batch_size: 32,
                lr: 0.02,
                momentum: 0.9,
                linear_decay: true,
                seed: 0,
            },
            unlearn: UnlearnHParams {
                method: Method::Ga,
                eta: 1e-3,
                epochs: 10,
                batch_size: 8,
                optimizer: Optimizer::Adam,
                mask_source: MaskSource::Mlf,
                forget_loss_ceiling: Some(1.2),
                ..UnlearnHParams::default()
            },
            sparsities: vec![0.9],
            relearn: RelearnParams::default(),
            successive: SuccessiveParams::default(),
            output_dir: None,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Phase seeds derived from the master seed: phase `i` gets
/// `splitmix64(master ^ splitmix64(i))` with data = 1, init = 2, train = 3,
/// unlearn = 4, attack = 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub unlearn: u64,
    pub attack: u64,
}

impl SeedPlan {
    pub fn derive(master: u64) -> SeedPlan {
        let sub = |i: u64| splitmix64(master ^ splitmix64(i));
        SeedPlan {
            data: sub(1),
            init: sub(2),
            train: sub(3),
            unlearn: sub(4),
            attack: sub(5),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.model.vocab_size != self.task.vocab_size {
            return bad(format!(
                "model vocab {} != task vocab {}",
                self.model.vocab_size, self.task.vocab_size
            ));
        }
        if self.model.num_classes != self.task.num_classes() {
            return bad(format!(
                "model has {} classes, task needs {}",
                self.model.num_classes,
                self.task.num_classes()
            ));
        }
        if self.model.max_seq_len < self.task.seq_len {
            return bad(format!(
                "max_seq_len {} < task seq_len {}",
                self.model.max_seq_len, self.task.seq_len
            ));
        }
        if self.sparsities.is_empty() {
            return bad("sparsity list is empty".into());
        }
        for &s in &self.sparsities {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::InvalidSparsity(s));
            }
        }
        if !(self.relearn.fraction > 0.0 && self.relearn.fraction < 1.0) {
            return bad(format!("relearn fraction {} outside (0, 1)", self.relearn.fraction));
        }
        self.unlearn.validate()
    }

    /// Copy with every nested seed replaced by its derived phase seed.
    pub fn resolved(&self) -> ExperimentConfig {
        let plan = SeedPlan::derive(self.seed);
        let mut c = self.clone();
        c.model.seed = plan.init;
        c.train.seed = plan.train;
        c.unlearn.seed = plan.unlearn;
        c
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan::derive(self.seed)
    }

    /// SHA-256 over the canonical JSON form (sorted keys, compact), excluding
    /// the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let value = serde_json::to_value(&c).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// `<root>/<first 16 hash chars>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(format!("{}-s{}", &self.hash()[..16], self.seed))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the SplitMix64 generator seeded with 0
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut c = ExperimentConfig::default();
        c.sparsities = vec![0.0, 0.5, 0.7, 0.9, 0.95];
        c.unlearn.eta = 0.1 + 0.2;
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn phase_seeds_are_distinct() {
        let p = SeedPlan::derive(7);
        let all = [p.data, p.init, p.train, p.unlearn, p.attack];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_eq!(p, SeedPlan::derive(7));
    }

    #[test]
    fn mismatched_task_rejected() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.task.vocab_size = 40;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sparsities = vec![1.0];
        assert!(c.validate().is_err());
    }
}
