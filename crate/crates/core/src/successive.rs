//! Streams of removal requests: compounding per-request updates, single-step
//! updates from the original model using stored aggregates, and batch removal.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::evalattack::{evaluate, MetricsReport};
use crate::fisher::{fisher_stats, FisherStats};
use crate::harness::fmt_f64;
use crate::maskselect::{build_mlr_problem, greedy_swap, select_mask, SelectionProblem, Sense};
use crate::tinyformer::{apply_masked_delta, sample_ce_grad, MaskPair, ModelState, ModuleMap, Sample};
use crate::unlearn::{mape_so_update, preconditioned_step, so_update, ReferenceModel, UnlearnHParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Iterative,
    StoredInfo,
    Batch,
}

/// How each (MAPE-)SO step chooses its mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Unmasked SO.
    Full,
    /// MLR selection on the current splits.
    Mlr { sparsity: f64 },
}

impl MaskMode {
    pub fn method_name(&self) -> &'static str {
        match self {
            MaskMode::Full => "SO",
            MaskMode::Mlr { .. } => "MAPE-SO",
        }
    }

    pub fn sparsity(&self) -> f64 {
        match self {
            MaskMode::Full => 0.0,
            MaskMode::Mlr { sparsity } => *sparsity,
        }
    }
}

/// One row of a successive trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub method: String,
    pub sparsity: f64,
    pub metrics: MetricsReport,
}

pub fn write_trajectory_csv<W: Write>(rows: &[StepRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "t",
        "method",
        "sparsity",
        "forget_acc",
        "retain_acc",
        "test_acc",
        "mia",
        "params_changed_fraction",
    ])?;
    for r in rows {
        let m = &r.metrics;
        wr.write_record([
            r.t.to_string(),
            r.method.clone(),
            fmt_f64(r.sparsity),
            fmt_f64(m.forget_acc),
            fmt_f64(m.retain_acc),
            fmt_f64(m.test_acc),
            fmt_f64(m.mia_score),
            fmt_f64(m.params_changed_fraction),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn request_samples(train: &[Sample], requests: &[usize]) -> Result<Vec<Sample>> {
    let mut seen = HashSet::new();
    requests
        .iter()
        .map(|&id| {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
            train.iter().find(|s| s.id == id).cloned().ok_or(Error::UnknownId(id))
        })
        .collect()
}

fn without(train: &[Sample], removed: &HashSet<usize>) -> Vec<Sample> {
    train.iter().filter(|s| !removed.contains(&s.id)).cloned().collect()
}

fn so_step(state: &ModelState, forget: &[Sample], retain: &[Sample], mode: MaskMode, hp: &UnlearnHParams) -> Result<ModelState> {
    match mode {
        MaskMode::Full => so_update(state, forget, retain, hp),
        MaskMode::Mlr { sparsity } => {
            let mask = select_mask(&build_mlr_problem(state, forget, retain, sparsity)?)?;
            mape_so_update(state, &mask, forget, retain, hp)
        }
    }
}

/// Handles requests one at a time, each update starting from the previous output.
///
/// Forget metrics cover every id removed so far; `params_changed_fraction`
/// is measured against `state0`.
pub fn run_iterative(
    state0: &ModelState,
    train: &[Sample],
    test: &[Sample],
    requests: &[usize],
    mode: MaskMode,
    hp: &UnlearnHParams,
) -> Result<Vec<(ModelState, StepRecord)>> {
    let samples = request_samples(train, requests)?;
    let mut removed = HashSet::new();
    let mut forgotten = Vec::new();
    let mut current = state0.clone();
    let mut out = Vec::with_capacity(samples.len());
    for (t, x) in samples.into_iter().enumerate() {
        let start = Instant::now();
        removed.insert(x.id);
        let retain = without(train, &removed);
        current = so_step(&current, std::slice::from_ref(&x), &retain, mode, hp)?;
        forgotten.push(x);
        let metrics = evaluate(&current, state0, &forgotten, &retain, test, start.elapsed())?;
        out.push((
            current.clone(),
            StepRecord {
                t: t + 1,
                method: mode.method_name().into(),
                sparsity: mode.sparsity(),
                metrics,
            },
        ));
    }
    Ok(out)
}

/// Removes every request in a single (MAPE-)SO step.
pub fn run_batch(
    state0: &ModelState,
    train: &[Sample],
    test: &[Sample],
    requests: &[usize],
    mode: MaskMode,
    hp: &UnlearnHParams,
) -> Result<(ModelState, StepRecord)> {
    if requests.is_empty() {
        return Err(Error::EmptyData("request set"));
    }
    let start = Instant::now();
    let forget = request_samples(train, requests)?;
    let removed: HashSet<usize> = requests.iter().copied().collect();
    let retain = without(train, &removed);
    let state = so_step(state0, &forget, &retain, mode, hp)?;
    let metrics = evaluate(&state, state0, &forget, &retain, test, start.elapsed())?;
    Ok((
        state,
        StepRecord {
            t: requests.len(),
            method: mode.method_name().into(),
            sparsity: mode.sparsity(),
            metrics,
        },
    ))
}

/// Aggregates kept in memory for single-step removal from `θ*`. All
/// statistics are evaluated at `θ*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessiveState {
    pub t: usize,
    pub mode: Mode,
    /// Summed parameter gradients of every removed sample.
    pub grad_sum: Vec<f64>,
    /// Summed gate gradients of every removed sample.
    pub mask_grad_sum: Vec<f64>,
    /// Parameter diagonal Fisher over the surviving retain set.
    pub fisher_diag: Vec<f64>,
    /// Per-layer gate Fisher blocks over the surviving retain set.
    pub mask_blocks: Vec<Array2<f64>>,
    pub retain_count: usize,
    pub removed: Vec<usize>,
}

impl SuccessiveState {
    /// Stored statistics over the full training set, before any removal.
    pub fn stored_info(state_star: &ModelState, train: &[Sample]) -> Result<SuccessiveState> {
        let stats = fisher_stats(state_star, train)?;
        Ok(SuccessiveState {
            t: 0,
            mode: Mode::StoredInfo,
            grad_sum: state_star.zeros_like(),
            mask_grad_sum: vec![0.0; state_star.config.module_count()],
            fisher_diag: stats.param_diag.expect("fisher_stats computes the parameter diagonal"),
            mask_blocks: stats.mask_blocks,
            retain_count: train.len(),
            removed: Vec::new(),
        })
    }

    /// Downdates the retain statistics by `x` and adds its gradient to the forget sums.
    pub fn remove(&self, x: &Sample, state_star: &ReferenceModel) -> Result<SuccessiveState> {
        if self.removed.contains(&x.id) {
            return Err(Error::DuplicateId(x.id));
        }
        if self.retain_count <= 1 {
            return Err(Error::RetainExhausted(self.retain_count));
        }
        let sg = sample_ce_grad(state_star.state(), None, x)?;
        let n = self.retain_count as f64;
        let downdate = |f: f64, sq: f64| (n * f - sq) / (n - 1.0);
        let fisher_diag = self
            .fisher_diag
            .iter()
            .zip(&sg.param_grad)
            .map(|(&f, g)| downdate(f, g * g).max(0.0))
            .collect();
        let layout = state_star.state().config.layer_layout();
        let mask_blocks = self
            .mask_blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let g: Vec<f64> = layout.layer_indices(l).iter().map(|&i| sg.mask_grad[i]).collect();
                Array2::from_shape_fn(b.dim(), |(i, j)| downdate(b[[i, j]], g[i] * g[j]))
            })
            .collect();
        let mut next = SuccessiveState {
            t: self.t + 1,
            mode: self.mode,
            grad_sum: self.grad_sum.clone(),
            mask_grad_sum: self.mask_grad_sum.clone(),
            fisher_diag,
            mask_blocks,
            retain_count: self.retain_count - 1,
            removed: self.removed.clone(),
        };
        next.grad_sum.iter_mut().zip(&sg.param_grad).for_each(|(a, g)| *a += g);
        next.mask_grad_sum.iter_mut().zip(&sg.mask_grad).for_each(|(a, g)| *a += g);
        next.removed.push(x.id);
        Ok(next)
    }
}

/// MLR selection problem from the stored aggregates.
pub fn stored_problem(succ: &SuccessiveState, state_star: &ModelState, sparsity: f64) -> Result<SelectionProblem> {
    let fim = FisherStats::from_blocks(state_star.config.layer_layout(), succ.mask_blocks.clone(), succ.retain_count)?;
    SelectionProblem::new(Sense::Mlr, succ.mask_grad_sum.clone(), fim, sparsity)
}

/// Refines a pre-computed mask with one greedy swap round on the stored aggregates.
pub fn refine_premask(succ: &SuccessiveState, state_star: &ModelState, premask: &MaskPair) -> Result<MaskPair> {
    greedy_swap(&stored_problem(succ, state_star, premask.sparsity)?, premask)
}

/// Applies the stored-aggregate update to `θ*`. `succ` must already include
/// the current request.
pub fn stored_info_update(
    succ: &SuccessiveState,
    mask: Option<&MaskPair>,
    state_star: &ReferenceModel,
    hp: &UnlearnHParams,
) -> Result<ModelState> {
    hp.validate()?;
    let star = state_star.state();
    let out = match mask {
        Some(m) => {
            m.check_bound(&star.config)?;
            let idx = ModuleMap::new(star).active_indices(&m.active());
            let delta = preconditioned_step(&succ.grad_sum, &succ.fisher_diag, hp.eta, hp.damping, Some(&idx));
            apply_masked_delta(star, m, &delta)?
        }
        None => {
            let delta = preconditioned_step(&succ.grad_sum, &succ.fisher_diag, hp.eta, hp.damping, None);
            let mut s = star.clone();
            s.params.iter_mut().zip(&delta).for_each(|(p, d)| *p += d);
            s
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("stored-info update"));
    }
    Ok(out)
}

/// One stored-information removal step: downdate, then update `θ*` directly.
pub fn step_stored_info(
    succ: &SuccessiveState,
    x: &Sample,
    mask: Option<&MaskPair>,
    state_star: &ReferenceModel,
    hp: &UnlearnHParams,
) -> Result<(ModelState, SuccessiveState)> {
    let next = succ.remove(x, state_star)?;
    let state = stored_info_update(&next, mask, state_star, hp)?;
    Ok((state, next))
}

/// Stored-information scenario over a request stream. With `refine`, the
/// premask is refined against the current aggregates at every request;
/// otherwise it is reused verbatim.
#[allow(clippy::too_many_arguments)]
pub fn run_stored_info(
    state_star: &ModelState,
    train: &[Sample],
    test: &[Sample],
    requests: &[usize],
    premask: Option<&MaskPair>,
    refine: bool,
    hp: &UnlearnHParams,
) -> Result<(Vec<(ModelState, StepRecord)>, SuccessiveState)> {
    let samples = request_samples(train, requests)?;
    let reference = ReferenceModel::new(state_star);
    let mut succ = SuccessiveState::stored_info(state_star, train)?;
    let mut removed = HashSet::new();
    let mut forgotten = Vec::new();
    let mut out = Vec::with_capacity(samples.len());
    for x in samples {
        let start = Instant::now();
        succ = succ.remove(&x, &reference)?;
        let mask = match premask {
            Some(p) if refine => Some(refine_premask(&succ, state_star, p)?),
            Some(p) => Some(p.clone()),
            None => None,
        };
        let state = stored_info_update(&succ, mask.as_ref(), &reference, hp)?;
        removed.insert(x.id);
        forgotten.push(x);
        let retain = without(train, &removed);
        let metrics = evaluate(&state, state_star, &forgotten, &retain, test, start.elapsed())?;
        out.push((
            state,
            StepRecord {
                t: succ.t,
                method: if premask.is_some() { "MAPE-SO" } else { "SO" }.into(),
                sparsity: premask.map_or(0.0, |m| m.sparsity),
                metrics,
            },
        ));
    }
    Ok((out, succ))
}

/// Spearman rank correlation and its one-sided p-value for a decreasing
/// trend, from the t approximation with `n - 2` degrees of freedom.
pub fn spearman_decreasing(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 3 {
        return Err(Error::EmptyData("trend series (need at least 3 points)"));
    }
    let ry = average_ranks(values);
    let rx: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let rho = pearson(&rx, &ry);
    if !rho.is_finite() {
        // constant series: no trend either way
        return Ok((0.0, 1.0));
    }
    if rho <= -1.0 {
        return Ok((-1.0, 0.0));
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidHParam(e.to_string()))?;
    Ok((rho, dist.cdf(t)))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_extremes() {
        let (rho, p) = spearman_decreasing(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!((rho, p), (-1.0, 0.0));
        let (rho, p) = spearman_decreasing(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((rho - 1.0).abs() < 1e-12 && p > 0.99);
        assert_eq!(spearman_decreasing(&[1.0; 6]).unwrap(), (0.0, 1.0));
        assert!(spearman_decreasing(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_matches_reference_value() {
        // rho = 1 - 6 * 4 / (6 * 35) with d = (0, 1, -1, 1, -1, 0)
        let (rho, _) = spearman_decreasing(&[1.0, 3.0, 2.0, 5.0, 4.0, 6.0]).unwrap();
        assert!((rho - 31.0 / 35.0).abs() < 1e-12);
    }
}
