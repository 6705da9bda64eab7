//! Synthetic motif-classification task.
//!
//! The first `motif_pool` tokens are motif tokens; the rest are background.
//! Every ordered pair of distinct motif tokens is a motif, and a seeded,
//! class-balanced table maps each motif to a content class. Each sequence
//! holds exactly one planted motif at a random position surrounded by
//! background tokens, so the label is a deterministic function of the motif.
//! A large pool leaves few training samples per motif, which forces the model
//! to memorize part of the table. Within a class, motif frequencies follow a
//! Zipf law, so a few head motifs are common (learnable) and the tail is rare
//! (memorized).

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinyformer::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub num_train: usize,
    pub num_test: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Classes that receive samples; the REJECT class is extra.
    pub content_classes: usize,
    /// Number of motif tokens (`0..motif_pool`).
    pub motif_pool: usize,
    /// Zipf exponent of motif frequencies within a class; 0 is uniform.
    pub zipf_exponent: f64,
    pub forget_count: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            num_train: 2000,
            num_test: 500,
            seq_len: 16,
            vocab_size: 32,
            content_classes: 4,
            motif_pool: MOTIF_POOL_DEFAULT,
            zipf_exponent: ZIPF_EXPONENT_DEFAULT,
            forget_count: 64,
        }
    }
}

const MOTIF_POOL_DEFAULT: usize = 16;
const ZIPF_EXPONENT_DEFAULT: f64 = 1.0;

impl TaskParams {
    pub fn num_classes(&self) -> usize {
        self.content_classes + 1
    }

    pub fn motif_count(&self) -> usize {
        self.motif_pool * (self.motif_pool - 1)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.content_classes < 2 {
            return bad("need at least two content classes".into());
        }
        if self.seq_len < 2 {
            return bad("sequence length must be >= 2".into());
        }
        if self.motif_pool < 2 || self.motif_count() < self.content_classes {
            return bad(format!(
                "motif pool {} yields fewer motifs than classes",
                self.motif_pool
            ));
        }
        if self.vocab_size < self.motif_pool + 2 {
            return bad(format!(
                "vocab {} leaves fewer than 2 background tokens after {} motif tokens",
                self.vocab_size, self.motif_pool
            ));
        }
        if !(self.zipf_exponent >= 0.0) || !self.zipf_exponent.is_finite() {
            return bad(format!("zipf exponent {} must be finite and >= 0", self.zipf_exponent));
        }
        if self.num_train == 0 || self.num_test == 0 {
            return bad("train and test sizes must be positive".into());
        }
        if self.forget_count == 0 || self.forget_count >= self.num_train {
            return bad(format!(
                "forget count {} must be in 1..{}",
                self.forget_count, self.num_train
            ));
        }
        Ok(())
    }
}

/// Class of every ordered motif pair, indexed `a * pool + b`; `None` on the diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifTable {
    pub pool: usize,
    pub classes: Vec<Option<usize>>,
}

impl MotifTable {
    fn generate(task: &TaskParams, rng: &mut ChaCha8Rng) -> MotifTable {
        let p = task.motif_pool;
        let mut pairs: Vec<(usize, usize)> = (0..p)
            .flat_map(|a| (0..p).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        pairs.shuffle(rng);
        let mut classes = vec![None; p * p];
        for (rank, (a, b)) in pairs.into_iter().enumerate() {
            classes[a * p + b] = Some(rank % task.content_classes);
        }
        MotifTable { pool: p, classes }
    }

    pub fn class_of(&self, a: usize, b: usize) -> Option<usize> {
        if a < self.pool && b < self.pool {
            self.classes[a * self.pool + b]
        } else {
            None
        }
    }

    pub fn motifs_of(&self, class: usize) -> Vec<(usize, usize)> {
        (0..self.pool * self.pool)
            .filter(|&i| self.classes[i] == Some(class))
            .map(|i| (i / self.pool, i % self.pool))
            .collect()
    }

    /// Label rule reading only the motif: the class of the first adjacent
    /// pair of motif tokens.
    pub fn rule_label(&self, tokens: &[usize]) -> Option<usize> {
        tokens
            .windows(2)
            .find(|w| w[0] < self.pool && w[1] < self.pool)
            .and_then(|w| self.class_of(w[0], w[1]))
    }
}

/// Train/forget/retain/test splits. Forget and retain are views on train by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub task: TaskParams,
    pub seed: u64,
    pub motifs: MotifTable,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub forget_ids: Vec<usize>,
}

impl DatasetBundle {
    pub fn forget(&self) -> Vec<Sample> {
        let ids: HashSet<usize> = self.forget_ids.iter().copied().collect();
        self.train.iter().filter(|s| ids.contains(&s.id)).cloned().collect()
    }

    pub fn retain(&self) -> Vec<Sample> {
        let ids: HashSet<usize> = self.forget_ids.iter().copied().collect();
        self.train.iter().filter(|s| !ids.contains(&s.id)).cloned().collect()
    }

    pub fn by_ids(&self, ids: &[usize]) -> Result<Vec<Sample>> {
        ids.iter()
            .map(|&id| {
                self.train
                    .iter()
                    .find(|s| s.id == id)
                    .cloned()
                    .ok_or(Error::UnknownId(id))
            })
            .collect()
    }

    /// Asserts forget ⊂ train, forget ∩ retain = ∅ and test ∩ train = ∅.
    pub fn check_hygiene(&self) -> Result<()> {
        let train_ids: HashSet<usize> = self.train.iter().map(|s| s.id).collect();
        if train_ids.len() != self.train.len() {
            return Err(Error::SplitHygiene("duplicate train ids".into()));
        }
        let forget: HashSet<usize> = self.forget_ids.iter().copied().collect();
        if forget.len() != self.forget_ids.len() {
            return Err(Error::SplitHygiene("duplicate forget ids".into()));
        }
        if !forget.is_subset(&train_ids) {
            return Err(Error::SplitHygiene("forget id outside train".into()));
        }
        let train_seqs: HashSet<&Vec<usize>> = self.train.iter().map(|s| &s.tokens).collect();
        for t in &self.test {
            if train_ids.contains(&t.id) || train_seqs.contains(&t.tokens) {
                return Err(Error::SplitHygiene(format!("test sample {} overlaps train", t.id)));
            }
        }
        if self.forget().len() + self.retain().len() != self.train.len() {
            return Err(Error::SplitHygiene("forget and retain do not partition train".into()));
        }
        Ok(())
    }
}

pub fn gen_synthetic(task: &TaskParams, seed: u64) -> Result<DatasetBundle> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motifs = MotifTable::generate(task, &mut rng);
    let by_class: Vec<Vec<(usize, usize)>> = (0..task.content_classes).map(|c| motifs.motifs_of(c)).collect();
    let zipf = |n: usize| {
        WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-task.zipf_exponent)))
            .map_err(|e| Error::InvalidConfig(e.to_string()))
    };
    let pickers = by_class.iter().map(|m| zipf(m.len())).collect::<Result<Vec<_>>>()?;
    let total = task.num_train + task.num_test;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut samples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while samples.len() < total {
        attempts += 1;
        if attempts > 100 * total {
            return Err(Error::InvalidConfig("cannot generate enough distinct sequences".into()));
        }
        let id = samples.len();
        let class = id % task.content_classes;
        let mut tokens: Vec<usize> = (0..task.seq_len)
            .map(|_| rng.random_range(task.motif_pool..task.vocab_size))
            .collect();
        let at = rng.random_range(0..task.seq_len - 1);
        let (a, b) = by_class[class][pickers[class].sample(&mut rng)];
        tokens[at] = a;
        tokens[at + 1] = b;
        if seen.insert(tokens.clone()) {
            samples.push(Sample {
                id,
                tokens,
                label: class,
            });
        }
    }
    let test = samples.split_off(task.num_train);
    let mut forget_ids = index::sample(&mut rng, task.num_train, task.forget_count).into_vec();
    forget_ids.sort_unstable();
    let bundle = DatasetBundle {
        task: *task,
        seed,
        motifs,
        train: samples,
        test,
        forget_ids,
    };
    bundle.check_hygiene()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_rule_consistent() {
        let task = TaskParams {
            num_train: 300,
            num_test: 100,
            forget_count: 16,
            ..TaskParams::default()
        };
        let a = gen_synthetic(&task, 7).unwrap();
        let b = gen_synthetic(&task, 7).unwrap();
        assert_eq!(a, b);
        let correct = a
            .train
            .iter()
            .chain(&a.test)
            .filter(|s| a.motifs.rule_label(&s.tokens) == Some(s.label))
            .count();
        assert_eq!(correct, 400);
        assert_eq!(a.forget().len(), 16);
        assert_eq!(a.retain().len(), 284);
        for c in 0..task.content_classes {
            assert_eq!(a.train.iter().filter(|s| s.label == c).count(), 75);
        }
        assert!(a.train.iter().all(|s| s.label != task.content_classes));
    }

    #[test]
    fn motif_table_is_balanced() {
        let task = TaskParams::default();
        let b = gen_synthetic(&task, 3).unwrap();
        let per: Vec<usize> = (0..task.content_classes).map(|c| b.motifs.motifs_of(c).len()).collect();
        assert_eq!(per.iter().sum::<usize>(), task.motif_count());
        assert!(per.iter().all(|&n| n == per[0]));
        assert_eq!(b.motifs.class_of(2, 2), None);
    }

    #[test]
    fn inconsistent_sizes_rejected() {
        let t = TaskParams {
            forget_count: 5000,
            ..TaskParams::default()
        };
        assert!(gen_synthetic(&t, 0).is_err());
        let t = TaskParams {
            vocab_size: 17,
            ..TaskParams::default()
        };
        assert!(gen_synthetic(&t, 0).is_err());
    }

    #[test]
    fn hygiene_catches_leak() {
        let task = TaskParams {
            num_train: 50,
            num_test: 10,
            forget_count: 5,
            ..TaskParams::default()
        };
        let mut b = gen_synthetic(&task, 1).unwrap();
        b.test.push(b.train[0].clone());
        assert!(b.check_hygiene().is_err());
    }
}
