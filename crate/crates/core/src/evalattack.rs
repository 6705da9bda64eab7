//! Split accuracies, confidence-threshold membership inference, and the
//! relearning attack.

use std::collections::HashSet;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinyformer::{forward, sgd_epochs_with, softmax, ModelState, Sample, TrainHParams};

/// Argmax prediction; ties go to the lowest class index.
pub fn predict(logits: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(state: &ModelState, split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyData("evaluation split"));
    }
    let logits = forward(state, None, split)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(split)
        .filter(|(row, s)| predict(*row) == s.label)
        .count();
    Ok(correct as f64 / split.len() as f64)
}

/// Max softmax probability of each sample.
pub fn confidences(state: &ModelState, split: &[Sample]) -> Result<Vec<f64>> {
    let logits = forward(state, None, split)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| softmax(r).fold(0.0f64, |a, &b| a.max(b)))
        .collect())
}

/// Best balanced accuracy of the rule "member iff feature >= t" over all thresholds.
///
/// Candidate thresholds are every observed feature value plus +inf (predict
/// nobody), so identical distributions score exactly 0.5.
pub fn best_threshold_balanced_accuracy(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyData("membership inference set"));
    }
    let mut m = members.to_vec();
    let mut h = nonmembers.to_vec();
    m.sort_by(f64::total_cmp);
    h.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = m.iter().chain(&h).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    // count of values >= t in a sorted slice
    let at_least = |v: &[f64], t: f64| v.len() - v.partition_point(|&x| x < t);
    let mut best = 0.5; // t = +inf: TPR 0, TNR 1
    for t in thresholds {
        let tpr = at_least(&m, t) as f64 / m.len() as f64;
        let tnr = 1.0 - at_least(&h, t) as f64 / h.len() as f64;
        let bal = 0.5 * (tpr + tnr);
        if bal > best {
            best = bal;
        }
    }
    Ok(best)
}

/// Confidence-based membership inference: forget samples are members,
/// held-out samples non-members. 0.5 means indistinguishable.
pub fn mia_confidence(state: &ModelState, forget: &[Sample], heldout: &[Sample]) -> Result<f64> {
    if forget.is_empty() || heldout.is_empty() {
        return Err(Error::EmptyData("membership inference set"));
    }
    let fm = confidences(state, forget)?;
    let fh = confidences(state, heldout)?;
    best_threshold_balanced_accuracy(&fm, &fh)
}

/// Fraction of parameters whose bit pattern differs from `reference`.
pub fn params_changed_fraction(reference: &ModelState, state: &ModelState) -> f64 {
    let changed = reference
        .params
        .iter()
        .zip(&state.params)
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    changed as f64 / reference.params.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub forget_acc: f64,
    pub retain_acc: f64,
    pub test_acc: f64,
    pub mia_score: f64,
    pub params_changed_fraction: f64,
    pub wall_time: f64,
}

impl MetricsReport {
    /// Metric names and values in a fixed order.
    pub fn named_values(&self) -> [(&'static str, f64); 6] {
        [
            ("forget_acc", self.forget_acc),
            ("retain_acc", self.retain_acc),
            ("test_acc", self.test_acc),
            ("mia", self.mia_score),
            ("params_changed_fraction", self.params_changed_fraction),
            ("wall_time", self.wall_time),
        ]
    }
}

/// Evaluates a model against the splits; `reference` is the pre-unlearning state.
pub fn evaluate(
    state: &ModelState,
    reference: &ModelState,
    forget: &[Sample],
    retain: &[Sample],
    test: &[Sample],
    wall_time: Duration,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        forget_acc: accuracy(state, forget)?,
        retain_acc: accuracy(state, retain)?,
        test_acc: accuracy(state, test)?,
        mia_score: mia_confidence(state, forget, test)?,
        params_changed_fraction: params_changed_fraction(reference, state),
        wall_time: wall_time.as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelearnTrajectory {
    pub forget_acc: Vec<f64>,
    pub mia: Vec<f64>,
    pub threshold: f64,
    /// First epoch (1-based) whose forget accuracy reaches `threshold`.
    pub epochs_to_recover: Option<usize>,
}

impl RelearnTrajectory {
    /// `epochs_to_recover`, counting a never-recovered run as `epochs + 1`.
    pub fn recovery_score(&self) -> usize {
        self.epochs_to_recover.unwrap_or(self.forget_acc.len() + 1)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "forget_acc", "mia"])?;
        for (i, (a, m)) in self.forget_acc.iter().zip(&self.mia).enumerate() {
            wr.write_record([(i + 1).to_string(), crate::harness::fmt_f64(*a), crate::harness::fmt_f64(*m)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Fine-tunes an unlearned model on `relearn_set` and tracks recovery of the
/// forget split. `heldout` provides MIA non-members.
pub fn relearn_attack(
    state: &ModelState,
    relearn_set: &[Sample],
    forget: &[Sample],
    heldout: &[Sample],
    threshold: f64,
    hp: &TrainHParams,
) -> Result<RelearnTrajectory> {
    let forget_ids: HashSet<usize> = forget.iter().map(|s| s.id).collect();
    if let Some(s) = relearn_set.iter().find(|s| forget_ids.contains(&s.id)) {
        return Err(Error::RelearnOverlap(s.id));
    }
    let mut forget_acc = Vec::with_capacity(hp.epochs);
    let mut mia = Vec::with_capacity(hp.epochs);
    if hp.epochs > 0 {
        sgd_epochs_with(state.clone(), relearn_set, hp, |_, st| {
            forget_acc.push(accuracy(st, forget)?);
            mia.push(mia_confidence(st, forget, heldout)?);
            Ok(())
        })?;
    }
    let epochs_to_recover = forget_acc.iter().position(|&a| a >= threshold).map(|i| i + 1);
    Ok(RelearnTrajectory {
        forget_acc,
        mia,
        threshold,
        epochs_to_recover,
    })
}
