//! Constrained binary mask selection over heads and filters.
//!
//! A selection problem scores freezing a set of modules with the quadratic
//! model `(1 - m)ᵀ g + ½ (1 - m)ᵀ B (1 - m)`, where `g` is a summed gate
//! gradient and `B` a gate Fisher (diagonal or per-layer block). The solver
//! is a warm start from per-module importance scores followed by one round
//! of within-layer swaps against the block objective.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{fisher_stats, forget_mask_gradient, param_gradient_sum, FisherStats};
use crate::tinyformer::{active_budget, LayerLayout, MaskPair, ModelState, ModuleMap, Sample};

/// Improvements at or below this are not committed by the greedy pass.
pub const SWAP_TOLERANCE: f64 = 1e-12;

/// Largest layer the exhaustive oracle accepts.
pub const ENUMERATION_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sense {
    /// Minimize loss on the retain split: gradient over forget, Fisher over retain.
    #[serde(rename = "MLR")]
    Mlr,
    /// Maximize loss on the forget split: gradient over retain, Fisher over forget.
    #[serde(rename = "MLF")]
    Mlf,
}

impl Sense {
    fn improves(self, candidate: f64, current: f64) -> bool {
        match self {
            Sense::Mlr => candidate < current - SWAP_TOLERANCE,
            Sense::Mlf => candidate > current + SWAP_TOLERANCE,
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Sense::Mlr => a < b,
            Sense::Mlf => a > b,
        }
    }
}

impl std::fmt::Display for Sense {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sense::Mlr => "MLR",
            Sense::Mlf => "MLF",
        })
    }
}

impl FromStr for Sense {
    type Err = Error;
    fn from_str(s: &str) -> Result<Sense> {
        match s {
            "MLR" => Ok(Sense::Mlr),
            "MLF" => Ok(Sense::Mlf),
            other => Err(Error::Format(format!("unknown objective sense `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProblem {
    pub sense: Sense,
    pub grad: Vec<f64>,
    pub fim: FisherStats,
    pub sparsity: f64,
    pub layout: LayerLayout,
}

impl SelectionProblem {
    pub fn new(sense: Sense, grad: Vec<f64>, fim: FisherStats, sparsity: f64) -> Result<SelectionProblem> {
        let p = SelectionProblem {
            sense,
            grad,
            layout: fim.layout,
            fim,
            sparsity,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layout.module_count();
        for (what, len) in [("selection gradient", self.grad.len()), ("fisher diagonal", self.fim.mask_diag.len())] {
            if len != n {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        if self.fim.mask_blocks.len() != self.layout.num_layers {
            return Err(Error::ShapeMismatch {
                what: "fisher blocks",
                expected: self.layout.num_layers,
                got: self.fim.mask_blocks.len(),
            });
        }
        active_budget(n, self.sparsity)?;
        Ok(())
    }

    pub fn module_count(&self) -> usize {
        self.layout.module_count()
    }

    pub fn budget(&self) -> usize {
        active_budget(self.module_count(), self.sparsity).expect("validated sparsity")
    }

    fn layer_grad(&self, layer: usize) -> Vec<f64> {
        self.layout.layer_indices(layer).iter().map(|&i| self.grad[i]).collect()
    }

    /// Layer objective of `mask` restricted to `layer`, using the block Fisher.
    pub fn layer_objective_of(&self, mask: &[bool], layer: usize) -> f64 {
        let idx = self.layout.layer_indices(layer);
        let local: Vec<bool> = idx.iter().map(|&i| mask[i]).collect();
        layer_objective(&local, &self.layer_grad(layer), &self.fim.mask_blocks[layer]).expect("consistent layer dimensions")
    }

    /// Sum of layer objectives.
    pub fn objective(&self, mask: &[bool]) -> f64 {
        (0..self.layout.num_layers).map(|l| self.layer_objective_of(mask, l)).sum()
    }

    /// The same problem with gradient and Fisher multiplied by `c`.
    pub fn scaled(&self, c: f64) -> SelectionProblem {
        SelectionProblem {
            sense: self.sense,
            grad: self.grad.iter().map(|g| g * c).collect(),
            fim: self.fim.scaled(c),
            sparsity: self.sparsity,
            layout: self.layout,
        }
    }
}

/// `score_i = g_i + ½ Î_ii`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores(pub Vec<f64>);

pub fn importance_scores(problem: &SelectionProblem) -> Result<ImportanceScores> {
    problem.validate()?;
    Ok(ImportanceScores(
        problem
            .grad
            .iter()
            .zip(&problem.fim.mask_diag)
            .map(|(g, d)| g + 0.5 * d)
            .collect(),
    ))
}

/// Indices sorted by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Activity vector with the `k` highest scores active.
pub fn top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut active = vec![false; scores.len()];
    for i in ranked(scores).into_iter().take(k) {
        active[i] = true;
    }
    active
}

/// Activates the `floor((1-S)·n)` modules with the highest importance scores.
pub fn warm_start(problem: &SelectionProblem) -> Result<MaskPair> {
    let scores = importance_scores(problem)?;
    let active = top_k(&scores.0, problem.budget());
    MaskPair::from_active(problem.layout, &active, problem.sparsity)
}

/// `(1 - m)ᵀ g + ½ (1 - m)ᵀ B (1 - m)` for one layer.
pub fn layer_objective(mask: &[bool], grad: &[f64], block: &Array2<f64>) -> Result<f64> {
    let m = mask.len();
    if grad.len() != m || block.dim() != (m, m) {
        return Err(Error::ShapeMismatch {
            what: "layer objective operands",
            expected: m,
            got: grad.len(),
        });
    }
    let frozen: Vec<usize> = (0..m).filter(|&i| !mask[i]).collect();
    let linear: f64 = frozen.iter().map(|&i| grad[i]).sum();
    let mut quad = 0.0;
    for &i in &frozen {
        for &j in &frozen {
            quad += block[[i, j]];
        }
    }
    Ok(linear + 0.5 * quad)
}

/// One round of within-layer swaps.
///
/// Frozen modules are visited in descending importance order; each is tried
/// against every module currently active in its layer, and the best swap is
/// committed if it improves the layer objective by more than
/// [`SWAP_TOLERANCE`]. Per-layer active counts never change.
pub fn greedy_swap(problem: &SelectionProblem, start: &MaskPair) -> Result<MaskPair> {
    problem.validate()?;
    start.validate()?;
    if start.layout != problem.layout {
        return Err(Error::ShapeMismatch {
            what: "start mask",
            expected: problem.module_count(),
            got: start.module_count(),
        });
    }
    let budget = problem.budget();
    let active_count = start.active_count();
    if active_count > budget {
        return Err(Error::BudgetViolated {
            active: active_count,
            budget,
        });
    }
    let scores = importance_scores(problem)?.0;
    let mut global = start.active();
    for layer in 0..problem.layout.num_layers {
        let idx = problem.layout.layer_indices(layer);
        let grad = problem.layer_grad(layer);
        let block = &problem.fim.mask_blocks[layer];
        let mut local: Vec<bool> = idx.iter().map(|&i| global[i]).collect();
        let local_scores: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let candidates: Vec<usize> = ranked(&local_scores).into_iter().filter(|&j| !local[j]).collect();
        let mut current = layer_objective(&local, &grad, block)?;
        for c in candidates {
            let mut best: Option<(usize, f64)> = None;
            let actives: Vec<usize> = (0..local.len()).filter(|&a| local[a]).collect();
            for a in actives {
                local[c] = true;
                local[a] = false;
                let obj = layer_objective(&local, &grad, block)?;
                local[c] = false;
                local[a] = true;
                if best.is_none_or(|(_, b)| problem.sense.better(obj, b)) {
                    best = Some((a, obj));
                }
            }
            if let Some((a, obj)) = best {
                if problem.sense.improves(obj, current) {
                    local[c] = true;
                    local[a] = false;
                    current = obj;
                }
            }
        }
        for (j, &i) in idx.iter().enumerate() {
            global[i] = local[j];
        }
    }
    MaskPair::from_active(problem.layout, &global, problem.sparsity)
}

/// Warm start followed by the greedy swap round.
pub fn select_mask(problem: &SelectionProblem) -> Result<MaskPair> {
    let start = warm_start(problem)?;
    greedy_swap(problem, &start)
}

/// Exact optimum of one layer's objective over all masks with `k` active modules.
pub fn enumerate_layer(grad: &[f64], block: &Array2<f64>, k: usize, sense: Sense) -> Result<(Vec<bool>, f64)> {
    let m = grad.len();
    if m > ENUMERATION_LIMIT {
        return Err(Error::LayerTooLarge {
            layer: 0,
            modules: m,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut best: Option<(Vec<bool>, f64)> = None;
    for bits in 0u32..(1u32 << m) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let mask: Vec<bool> = (0..m).map(|i| bits >> i & 1 == 1).collect();
        let obj = layer_objective(&mask, grad, block)?;
        if best.as_ref().is_none_or(|(_, b)| sense.better(obj, *b)) {
            best = Some((mask, obj));
        }
    }
    best.ok_or_else(|| Error::InvalidHParam(format!("no mask with {k} of {m} modules active")))
}

/// Exhaustive optimum of `layer` with the warm start's active count for that layer.
pub fn enumerate_optimum(problem: &SelectionProblem, layer: usize) -> Result<(Vec<bool>, f64)> {
    let size = problem.layout.layer_size();
    if size > ENUMERATION_LIMIT {
        return Err(Error::LayerTooLarge {
            layer,
            modules: size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let warm = warm_start(problem)?.active();
    let idx = problem.layout.layer_indices(layer);
    let k = idx.iter().filter(|&&i| warm[i]).count();
    enumerate_layer(&problem.layer_grad(layer), &problem.fim.mask_blocks[layer], k, problem.sense)
}

/// Gradient summed over `forget`, Fisher over `retain`, minimized.
pub fn build_mlr_problem(state: &ModelState, forget: &[Sample], retain: &[Sample], sparsity: f64) -> Result<SelectionProblem> {
    if forget.is_empty() || retain.is_empty() {
        return Err(Error::EmptyData("selection split"));
    }
    let grad = forget_mask_gradient(state, forget)?;
    let mut fim = fisher_stats(state, retain)?;
    fim.param_diag = None;
    SelectionProblem::new(Sense::Mlr, grad, fim, sparsity)
}

/// Gradient summed over `retain`, Fisher over `forget`, maximized.
pub fn build_mlf_problem(state: &ModelState, forget: &[Sample], retain: &[Sample], sparsity: f64) -> Result<SelectionProblem> {
    let mut p = build_mlr_problem(state, retain, forget, sparsity)?;
    p.sense = Sense::Mlf;
    Ok(p)
}

/// Pre-computed mask for successive removal: the `k` modules with the
/// largest full-data gate Fisher stay active.
pub fn successive_premask(fim_diag: &[f64], layout: LayerLayout, sparsity: f64) -> Result<MaskPair> {
    if fim_diag.len() != layout.module_count() {
        return Err(Error::ShapeMismatch {
            what: "fisher diagonal",
            expected: layout.module_count(),
            got: fim_diag.len(),
        });
    }
    let k = active_budget(fim_diag.len(), sparsity)?;
    MaskPair::from_active(layout, &top_k(fim_diag, k), sparsity)
}

/// Per-module L2 norm of the forget-summed gradient over its parameter slice.
pub fn sure_scores(state: &ModelState, forget: &[Sample]) -> Result<Vec<f64>> {
    if forget.is_empty() {
        return Err(Error::EmptyData("forget split"));
    }
    let g = param_gradient_sum(state, forget)?;
    let map = ModuleMap::new(state);
    Ok((0..map.module_count())
        .map(|m| map.slice(m).iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt())
        .collect())
}

/// Gradient-norm baseline selector.
pub fn sure_select(state: &ModelState, forget: &[Sample], sparsity: f64) -> Result<MaskPair> {
    let scores = sure_scores(state, forget)?;
    let k = active_budget(scores.len(), sparsity)?;
    MaskPair::from_active(state.config.layer_layout(), &top_k(&scores, k), sparsity)
}

const MASK_HEADER: &str = "# mape-mask v1";

/// Text form: a header line, a parameter line, then `L<idx> H:<bits> F:<bits>` per layer.
pub fn mask_to_text(mask: &MaskPair, sense: Option<Sense>) -> String {
    let lay = mask.layout;
    let mut out = String::new();
    let sense = sense.map_or_else(|| "none".to_string(), |s| s.to_string());
    writeln!(out, "{MASK_HEADER}").unwrap();
    writeln!(
        out,
        "n={} S={} sense={} layers={} heads={} filters={}",
        mask.module_count(),
        mask.sparsity,
        sense,
        lay.num_layers,
        lay.heads_per_layer,
        lay.filters_per_layer
    )
    .unwrap();
    let bits = |v: &[bool]| v.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>();
    for l in 0..lay.num_layers {
        let h = &mask.head_mask[l * lay.heads_per_layer..(l + 1) * lay.heads_per_layer];
        let f = &mask.filter_mask[l * lay.filters_per_layer..(l + 1) * lay.filters_per_layer];
        writeln!(out, "L{l} H:{} F:{}", bits(h), bits(f)).unwrap();
    }
    out
}

pub fn mask_from_text(text: &str) -> Result<(MaskPair, Option<Sense>)> {
    let bad = |m: &str| Error::Format(format!("mask file: {m}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(MASK_HEADER) {
        return Err(bad("missing header"));
    }
    let params = lines.next().ok_or_else(|| bad("missing parameter line"))?;
    let mut n = None;
    let mut sparsity = None;
    let mut sense = None;
    let mut dims = [None; 3];
    for kv in params.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed key=value"))?;
        let num = || v.parse::<usize>().map_err(|_| bad("bad integer"));
        match k {
            "n" => n = Some(num()?),
            "S" => sparsity = Some(v.parse::<f64>().map_err(|_| bad("bad sparsity"))?),
            "sense" => sense = Some(if v == "none" { None } else { Some(v.parse::<Sense>()?) }),
            "layers" => dims[0] = Some(num()?),
            "heads" => dims[1] = Some(num()?),
            "filters" => dims[2] = Some(num()?),
            _ => return Err(bad("unknown key")),
        }
    }
    let layout = LayerLayout {
        num_layers: dims[0].ok_or_else(|| bad("missing layers"))?,
        heads_per_layer: dims[1].ok_or_else(|| bad("missing heads"))?,
        filters_per_layer: dims[2].ok_or_else(|| bad("missing filters"))?,
    };
    if n != Some(layout.module_count()) {
        return Err(bad("n does not match layer dimensions"));
    }
    let mut head_mask = Vec::new();
    let mut filter_mask = Vec::new();
    let parse_bits = |s: &str, len: usize| -> Result<Vec<bool>> {
        if s.len() != len {
            return Err(bad("bitstring length"));
        }
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad("non-binary character")),
            })
            .collect()
    };
    for l in 0..layout.num_layers {
        let line = lines.next().ok_or_else(|| bad("missing layer line"))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(format!("L{l}").as_str()) {
            return Err(bad("layer lines out of order"));
        }
        let h = parts.next().and_then(|p| p.strip_prefix("H:")).ok_or_else(|| bad("missing H:"))?;
        let f = parts.next().and_then(|p| p.strip_prefix("F:")).ok_or_else(|| bad("missing F:"))?;
        head_mask.extend(parse_bits(h, layout.heads_per_layer)?);
        filter_mask.extend(parse_bits(f, layout.filters_per_layer)?);
    }
    let mask = MaskPair {
        head_mask,
        filter_mask,
        sparsity: sparsity.ok_or_else(|| bad("missing S"))?,
        layout,
    };
    mask.validate()?;
    Ok((mask, sense.ok_or_else(|| bad("missing sense"))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_module_problem(sense: Sense, g: [f64; 2], block: Array2<f64>, sparsity: f64) -> SelectionProblem {
        let layout = LayerLayout {
            num_layers: 1,
            heads_per_layer: 1,
            filters_per_layer: 1,
        };
        let fim = FisherStats::from_blocks(layout, vec![block], 1).unwrap();
        SelectionProblem::new(sense, g.to_vec(), fim, sparsity).unwrap()
    }

    #[test]
    fn scores_follow_gradient_plus_half_fisher() {
        let p = two_module_problem(Sense::Mlr, [0.5, 0.1], array![[0.2, 0.0], [0.0, 0.8]], 0.5);
        let s = importance_scores(&p).unwrap().0;
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
        let w = warm_start(&p).unwrap();
        assert_eq!(w.active(), vec![true, false]);
    }

    #[test]
    fn zero_gradient_scores_are_half_diag() {
        let p = two_module_problem(Sense::Mlr, [0.0, 0.0], array![[0.4, 0.0], [0.0, 3.0]], 0.5);
        assert_eq!(importance_scores(&p).unwrap().0, vec![0.2, 1.5]);
    }

    #[test]
    fn constant_scores_tie_break_low_index() {
        let layout = LayerLayout {
            num_layers: 1,
            heads_per_layer: 2,
            filters_per_layer: 3,
        };
        let fim = FisherStats::from_blocks(layout, vec![Array2::zeros((5, 5))], 1).unwrap();
        let p = SelectionProblem::new(Sense::Mlr, vec![0.7; 5], fim, 0.5).unwrap();
        assert_eq!(importance_scores(&p).unwrap().0, vec![0.7; 5]);
        assert_eq!(warm_start(&p).unwrap().active(), vec![true, true, false, false, false]);
    }

    #[test]
    fn layer_objective_hand_values() {
        let id = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(layer_objective(&[true, true], &[1.0, 1.0], &id).unwrap(), 0.0);
        assert_eq!(layer_objective(&[false, false], &[1.0, 1.0], &id).unwrap(), 3.0);
        let diag = array![[0.4, 0.0], [0.0, 2.0]];
        assert_eq!(layer_objective(&[true, false], &[1.0, 0.9], &diag).unwrap(), 0.9 + 1.0);
        assert!(layer_objective(&[true], &[1.0, 1.0], &id).is_err());
    }

    #[test]
    fn greedy_keeps_warm_start_when_no_swap_helps() {
        let p = two_module_problem(Sense::Mlr, [1.0, 0.9], array![[0.1, 0.0], [0.0, 2.0]], 0.5);
        let w = warm_start(&p).unwrap();
        assert_eq!(w.active(), vec![false, true]);
        let (_, enum_obj) = enumerate_optimum(&p, 0).unwrap();
        assert!((p.objective(&w.active()) - 1.05).abs() < 1e-15);
        assert_eq!(enum_obj, p.objective(&w.active()));
        assert_eq!(greedy_swap(&p, &w).unwrap(), w);
    }

    #[test]
    fn greedy_uses_off_diagonal_interactions() {
        // modules 1 and 2 are individually cheap to freeze but interact strongly
        let layout = LayerLayout {
            num_layers: 1,
            heads_per_layer: 1,
            filters_per_layer: 2,
        };
        let b = array![[0.2, 0.0, 0.0], [0.0, 0.2, 1.0], [0.0, 1.0, 0.2]];
        let fim = FisherStats::from_blocks(layout, vec![b], 1).unwrap();
        let p = SelectionProblem::new(Sense::Mlr, vec![0.5, 0.1, 0.1], fim, 0.5).unwrap();
        let w = warm_start(&p).unwrap();
        assert_eq!(w.active(), vec![true, false, false]);
        let g = greedy_swap(&p, &w).unwrap();
        assert!(p.objective(&g.active()) < p.objective(&w.active()));
        assert_eq!(g.active_count(), 1);
        assert_eq!(p.objective(&g.active()), enumerate_optimum(&p, 0).unwrap().1);
    }

    #[test]
    fn mlf_scores_and_sense() {
        let p = two_module_problem(Sense::Mlf, [0.5, 0.1], array![[0.2, 0.0], [0.0, 0.8]], 0.5);
        let w = warm_start(&p).unwrap();
        assert_eq!(w.active(), vec![true, false]);
        let g = greedy_swap(&p, &w).unwrap();
        assert!(p.objective(&g.active()) >= p.objective(&w.active()));
    }

    #[test]
    fn premask_selects_largest_fisher() {
        let layout = LayerLayout {
            num_layers: 1,
            heads_per_layer: 1,
            filters_per_layer: 2,
        };
        let m = successive_premask(&[3.0, 1.0, 2.0], layout, 0.5).unwrap();
        assert_eq!(m.active(), vec![true, false, false]);
        let m = successive_premask(&[1.0, 1.0, 1.0], layout, 0.2).unwrap();
        assert_eq!(m.active(), vec![true, true, false]);
        let m = successive_premask(&[1.0, 5.0, 1.0], layout, 0.0).unwrap();
        assert_eq!(m.active_count(), 3);
    }

    #[test]
    fn budget_violating_start_rejected() {
        let p = two_module_problem(Sense::Mlr, [1.0, 0.9], array![[0.1, 0.0], [0.0, 2.0]], 0.5);
        let all = MaskPair::all_active(p.layout);
        assert!(greedy_swap(&p, &all).is_err());
    }

    #[test]
    fn mask_text_round_trip() {
        let layout = LayerLayout {
            num_layers: 2,
            heads_per_layer: 2,
            filters_per_layer: 3,
        };
        let active = [true, false, false, true, false, false, true, false, false, false];
        let m = MaskPair::from_active(layout, &active, 0.7).unwrap();
        let text = mask_to_text(&m, Some(Sense::Mlr));
        assert!(text.contains("L0 H:10 F:001"));
        assert!(text.contains("L1 H:01 F:000"));
        let (back, sense) = mask_from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(sense, Some(Sense::Mlr));
        let (_, none) = mask_from_text(&mask_to_text(&m, None)).unwrap();
        assert_eq!(none, None);
        assert!(mask_from_text(&text.replace("H:10", "H:1x")).is_err());
    }
}
