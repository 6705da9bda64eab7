//! Unlearning updates: closed-form second-order steps (full or module-masked)
//! and fine-tuning unlearners (GA, GD, NPO, DPO), plus the SA and RT baselines.

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{diag_fim_params_at, param_gradient_sum_at};
use crate::tinyformer::{
    apply_masked_delta, batch_grad_with, cross_entropy, forward, log_softmax, loss_and_grads, train, LossGrads,
    MaskPair, ModelConfig, ModelState, ModuleMap, Sample, TrainHParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    So,
    #[serde(rename = "MAPE-SO")]
    MapeSo,
    Ga,
    Gd,
    Npo,
    Dpo,
    Sa,
    Rt,
}

impl Method {
    pub fn is_finetune(self) -> bool {
        matches!(self, Method::Ga | Method::Gd | Method::Npo | Method::Dpo)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::So => "SO",
            Method::MapeSo => "MAPE-SO",
            Method::Ga => "GA",
            Method::Gd => "GD",
            Method::Npo => "NPO",
            Method::Dpo => "DPO",
            Method::Sa => "SA",
            Method::Rt => "RT",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        let all = [
            Method::So,
            Method::MapeSo,
            Method::Ga,
            Method::Gd,
            Method::Npo,
            Method::Dpo,
            Method::Sa,
            Method::Rt,
        ];
        all.into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidHParam(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    None,
    Mlr,
    Mlf,
    Sure,
    Premask,
    File(PathBuf),
}

impl FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<MaskSource> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => MaskSource::None,
            "mlr" => MaskSource::Mlr,
            "mlf" => MaskSource::Mlf,
            "sure" => MaskSource::Sure,
            "premask" => MaskSource::Premask,
            _ => MaskSource::File(PathBuf::from(s)),
        })
    }
}

/// Optimizer for the fine-tuning unlearners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Optimizer> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::InvalidHParam(format!("unknown optimizer `{s}`"))),
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn delta(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                -lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnHParams {
    pub method: Method,
    /// Step size of the second-order update, or learning rate for fine-tuning.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer of the fine-tuning unlearners.
    pub optimizer: Optimizer,
    /// Inverse temperature for NPO and DPO.
    pub beta: f64,
    /// L1 penalty weight for SA.
    pub gamma: f64,
    /// Added to every Fisher entry before inversion.
    pub damping: f64,
    pub seed: u64,
    pub mask_source: MaskSource,
    /// Fine-tuning stops once the mean forget cross-entropy reaches this value.
    #[serde(default)]
    pub forget_loss_ceiling: Option<f64>,
}

impl Default for UnlearnHParams {
    fn default() -> Self {
        UnlearnHParams {
            method: Method::MapeSo,
            eta: 1e-3,
            epochs: 5,
            batch_size: 16,
            optimizer: Optimizer::Sgd,
            beta: 0.1,
            gamma: 5e-5,
            damping: 1e-4,
            seed: 0,
            mask_source: MaskSource::Mlr,
            forget_loss_ceiling: None,
        }
    }
}

impl UnlearnHParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidHParam(format!("eta must be > 0, got {}", self.eta)));
        }
        if matches!(self.method, Method::Npo | Method::Dpo) && !(self.beta > 0.0) {
            return Err(Error::InvalidHParam(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.damping < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidHParam("damping and gamma must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidHParam("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Frozen snapshot of the model before unlearning.
#[derive(Debug, Clone)]
pub struct ReferenceModel(ModelState);

impl ReferenceModel {
    pub fn new(state: &ModelState) -> ReferenceModel {
        ReferenceModel(state.clone())
    }

    pub fn state(&self) -> &ModelState {
        &self.0
    }

    /// Log-probabilities of the reference model, keyed by sample id.
    pub fn log_probs(&self, samples: &[Sample]) -> Result<HashMap<usize, Array1<f64>>> {
        let logits = forward(&self.0, None, samples)?;
        Ok(samples
            .iter()
            .zip(logits.rows())
            .map(|(s, row)| (s.id, log_softmax(row)))
            .collect())
    }
}

/// A forget sample paired with the REJECT response.
#[derive(Debug, Clone, PartialEq)]
pub struct IdkPair {
    pub sample: Sample,
    pub reject: usize,
}

pub fn idk_pairs(config: &ModelConfig, forget: &[Sample]) -> Result<Vec<IdkPair>> {
    let reject = config.reject_class();
    forget
        .iter()
        .map(|s| {
            if s.label == reject {
                Err(Error::InvalidSample {
                    id: s.id,
                    reason: "original label equals the REJECT class".into(),
                })
            } else {
                Ok(IdkPair {
                    sample: s.clone(),
                    reject,
                })
            }
        })
        .collect()
}

fn check_finite_update(state: &ModelState) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("unlearning update"))
    }
}

/// `η · g_i / (F_i + λ)` at `indices` (all parameters when `None`), zero elsewhere.
///
/// `g` sums forget gradients, `F` is the retain diagonal Fisher.
pub fn so_delta(
    state: &ModelState,
    forget: &[Sample],
    retain: &[Sample],
    hp: &UnlearnHParams,
    indices: Option<&[usize]>,
) -> Result<Vec<f64>> {
    hp.validate()?;
    if forget.is_empty() || retain.is_empty() {
        return Err(Error::EmptyData("unlearning split"));
    }
    let fim = diag_fim_params_at(state, retain, indices)?;
    let grad = param_gradient_sum_at(state, forget, indices)?;
    Ok(preconditioned_step(&grad, &fim, hp.eta, hp.damping, indices))
}

pub(crate) fn preconditioned_step(grad: &[f64], fim: &[f64], eta: f64, damping: f64, indices: Option<&[usize]>) -> Vec<f64> {
    let step = |i: usize| eta * grad[i] / (fim[i] + damping);
    let mut delta = vec![0.0; grad.len()];
    match indices {
        Some(idx) => idx.iter().for_each(|&i| delta[i] = step(i)),
        None => (0..grad.len()).for_each(|i| delta[i] = step(i)),
    }
    delta
}

/// Closed-form second-order removal applied to every parameter.
pub fn so_update(state: &ModelState, forget: &[Sample], retain: &[Sample], hp: &UnlearnHParams) -> Result<ModelState> {
    let delta = so_delta(state, forget, retain, hp, None)?;
    let mut out = state.clone();
    for (p, d) in out.params.iter_mut().zip(&delta) {
        *p += d;
    }
    check_finite_update(&out)?;
    Ok(out)
}

/// Second-order removal restricted to the parameters of active modules.
/// Fisher and gradients are only accumulated at those parameters.
pub fn mape_so_update(
    state: &ModelState,
    mask: &MaskPair,
    forget: &[Sample],
    retain: &[Sample],
    hp: &UnlearnHParams,
) -> Result<ModelState> {
    mask.check_bound(&state.config)?;
    let map = ModuleMap::new(state);
    let idx = map.active_indices(&mask.active());
    let delta = so_delta(state, forget, retain, hp, Some(&idx))?;
    let out = apply_masked_delta(state, mask, &delta)?;
    check_finite_update(&out)?;
    Ok(out)
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient ascent: mean of `-ℓ` over the forget batch.
pub fn ga_loss(state: &ModelState, forget: &[Sample]) -> Result<LossGrads> {
    batch_grad_with(state, None, forget, &|s: &Sample, l: ArrayView1<'_, f64>| {
        let (loss, d) = cross_entropy(l, s.label);
        (-loss, -d)
    })
}

/// Gradient difference: `-E_f[ℓ] + E_r[ℓ]`; without a retain batch this is GA.
pub fn gd_loss(state: &ModelState, forget: &[Sample], retain: Option<&[Sample]>) -> Result<LossGrads> {
    let mut out = ga_loss(state, forget)?;
    if let Some(r) = retain {
        let keep = loss_and_grads(state, None, r)?;
        out.loss += keep.loss;
        out.param_grads.iter_mut().zip(&keep.param_grads).for_each(|(a, b)| *a += b);
        out.mask_grads.iter_mut().zip(&keep.mask_grads).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// `-(2/β) E_f[log σ(-β log(π_θ(y|x) / π_ref(y|x)))]`.
pub fn npo_loss(state: &ModelState, reference: &ReferenceModel, forget: &[Sample], beta: f64) -> Result<LossGrads> {
    let ref_lp = reference.log_probs(forget)?;
    batch_grad_with(state, None, forget, &|s: &Sample, l: ArrayView1<'_, f64>| {
        let lp = log_softmax(l);
        let ratio = lp[s.label] - ref_lp[&s.id][s.label];
        let loss = -(2.0 / beta) * log_sigmoid(-beta * ratio);
        let coef = 2.0 * sigmoid(beta * ratio);
        // d ratio / d logits = onehot(y) - softmax
        let mut d = lp.mapv(|v| -coef * v.exp());
        d[s.label] += coef;
        (loss, d)
    })
}

/// `-(1/β) E[log σ(β log(π_θ(idk)/π_ref(idk)) - β log(π_θ(y)/π_ref(y)))]`.
pub fn dpo_loss(state: &ModelState, reference: &ReferenceModel, pairs: &[IdkPair], beta: f64) -> Result<LossGrads> {
    let samples: Vec<Sample> = pairs.iter().map(|p| p.sample.clone()).collect();
    let reject: HashMap<usize, usize> = pairs.iter().map(|p| (p.sample.id, p.reject)).collect();
    let ref_lp = reference.log_probs(&samples)?;
    batch_grad_with(state, None, &samples, &|s: &Sample, l: ArrayView1<'_, f64>| {
        let lp = log_softmax(l);
        let r = ref_lp[&s.id].view();
        let idk = reject[&s.id];
        let margin = beta * ((lp[idk] - r[idk]) - (lp[s.label] - r[s.label]));
        let loss = -log_sigmoid(margin) / beta;
        // softmax terms cancel between the two log-ratios
        let w = sigmoid(-margin);
        let mut d = Array1::zeros(l.len());
        d[s.label] += w;
        d[idk] -= w;
        (loss, d)
    })
}

/// Gradient-based unlearning with GA, GD, NPO or DPO.
///
/// With a mask, each step's delta goes through [`apply_masked_delta`], so
/// frozen-module and non-module parameters stay bit-identical.
pub fn finetune_unlearn(
    state: &ModelState,
    mask: Option<&MaskPair>,
    forget: &[Sample],
    retain: &[Sample],
    hp: &UnlearnHParams,
) -> Result<ModelState> {
    hp.validate()?;
    if !hp.method.is_finetune() {
        return Err(Error::InvalidHParam(format!("{} is not a fine-tuning method", hp.method)));
    }
    if let Some(m) = mask {
        m.check_bound(&state.config)?;
    }
    if hp.epochs == 0 {
        return Ok(state.clone());
    }
    if forget.is_empty() {
        return Err(Error::EmptyData("forget split"));
    }
    if hp.method == Method::Gd && retain.is_empty() {
        return Err(Error::EmptyData("retain split"));
    }
    let reference = ReferenceModel::new(state);
    let pairs = if hp.method == Method::Dpo {
        idk_pairs(&state.config, forget)?
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..forget.len()).collect();
    let mut retain_order: Vec<usize> = (0..retain.len()).collect();
    retain_order.shuffle(&mut rng);
    let mut retain_cursor = 0usize;
    let mut adam = Adam::new(state.num_params());
    let mut current = state.clone();
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| forget[i].clone()).collect();
            let lg = match hp.method {
                Method::Ga => ga_loss(&current, &batch)?,
                Method::Gd => {
                    let rb: Vec<Sample> = (0..hp.batch_size)
                        .map(|_| {
                            let s = retain[retain_order[retain_cursor]].clone();
                            retain_cursor = (retain_cursor + 1) % retain_order.len();
                            s
                        })
                        .collect();
                    gd_loss(&current, &batch, Some(&rb))?
                }
                Method::Npo => npo_loss(&current, &reference, &batch, hp.beta)?,
                Method::Dpo => {
                    let pb: Vec<IdkPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                    dpo_loss(&current, &reference, &pb, hp.beta)?
                }
                _ => unreachable!("checked above"),
            };
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite("unlearning loss"));
            }
            let delta: Vec<f64> = match hp.optimizer {
                Optimizer::Sgd => lg.param_grads.iter().map(|g| -hp.eta * g).collect(),
                Optimizer::Adam => adam.delta(&lg.param_grads, hp.eta),
            };
            current = match mask {
                Some(m) => apply_masked_delta(&current, m, &delta)?,
                None => {
                    let mut next = current;
                    next.params.iter_mut().zip(&delta).for_each(|(p, d)| *p += d);
                    next
                }
            };
            if let Some(ceiling) = hp.forget_loss_ceiling {
                if mean_ce(&current, forget)? >= ceiling {
                    check_finite_update(&current)?;
                    return Ok(current);
                }
            }
        }
    }
    check_finite_update(&current)?;
    Ok(current)
}

/// Mean cross-entropy of `data` under `state`.
pub fn mean_ce(state: &ModelState, data: &[Sample]) -> Result<f64> {
    let logits = forward(state, None, data)?;
    let total: f64 = data
        .iter()
        .zip(logits.rows())
        .map(|(s, l)| cross_entropy(l, s.label).0)
        .sum();
    Ok(total / data.len() as f64)
}

/// Retain fine-tuning with an L1 penalty `γ Σ|θ|` over all parameters (plain SGD).
pub fn sa_unlearn(state: &ModelState, retain: &[Sample], hp: &UnlearnHParams) -> Result<ModelState> {
    hp.validate()?;
    if retain.is_empty() {
        return Err(Error::EmptyData("retain split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..retain.len()).collect();
    let mut current = state.clone();
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| retain[i].clone()).collect();
            let lg = loss_and_grads(&current, None, &batch)?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite("SA loss"));
            }
            for (p, g) in current.params.iter_mut().zip(&lg.param_grads) {
                let sub = if *p > 0.0 {
                    1.0
                } else if *p < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *p -= hp.eta * (g + hp.gamma * sub);
            }
        }
    }
    check_finite_update(&current)?;
    Ok(current)
}

/// Retrains from scratch on the retain split.
pub fn rt_retrain(config: &ModelConfig, retain: &[Sample], hp: &TrainHParams) -> Result<ModelState> {
    if retain.is_empty() {
        return Err(Error::EmptyData("retain split"));
    }
    Ok(train(config, retain, None, hp)?.state)
}
