//! Gated forward pass and exact manual backward pass.
//!
//! Pre-norm encoder blocks with learned positions, tanh-GELU in the FFN,
//! mean pooling and a linear classifier. Head `h`'s context output is scaled
//! by its gate before the output projection; filter `f`'s activation is
//! scaled by its gate before the second FFN projection.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rayon::prelude::*;

use super::state::ModelState;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// One labeled token sequence with a stable identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Sample {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Gate values for every module, laid out like the global mask vector.
/// `None` runs the plain ungated network.
pub type Gates<'a> = Option<&'a [f64]>;

pub fn ones_gates(state: &ModelState) -> Vec<f64> {
    vec![1.0; state.config.module_count()]
}

pub fn validate_sample(state: &ModelState, sample: &Sample) -> Result<()> {
    let cfg = &state.config;
    if sample.tokens.is_empty() || sample.tokens.len() > cfg.max_seq_len {
        return Err(Error::InvalidSample {
            id: sample.id,
            reason: format!(
                "sequence length {} outside 1..={}",
                sample.tokens.len(),
                cfg.max_seq_len
            ),
        });
    }
    if let Some(t) = sample.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidSample {
            id: sample.id,
            reason: format!("token {t} >= vocab_size {}", cfg.vocab_size),
        });
    }
    if sample.label >= cfg.num_classes {
        return Err(Error::InvalidSample {
            id: sample.id,
            reason: format!("label {} >= num_classes {}", sample.label, cfg.num_classes),
        });
    }
    Ok(())
}

fn check_gates(state: &ModelState, gates: Gates<'_>) -> Result<()> {
    if let Some(g) = gates {
        let n = state.config.module_count();
        if g.len() != n {
            return Err(Error::ShapeMismatch {
                what: "gate vector",
                expected: n,
                got: g.len(),
            });
        }
    }
    Ok(())
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn ln_forward(
    x: &Array2<f64>,
    g: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<'_, f64>,
    mut dg: ArrayViewMut1<'_, f64>,
    mut db: ArrayViewMut1<'_, f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dxh), xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let m1 = dxh.sum() / d;
        let m2 = dxh.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&dxh)
            .and(&xh)
            .for_each(|o, &a, &x| *o = r * (a - m1 - x * m2));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ctx_gated: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    act_gated: Array2<f64>,
}

/// Activations kept from a single-sample forward pass.
pub struct SampleCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

fn head_gate(state: &ModelState, gates: Gates<'_>, layer: usize, head: usize) -> Option<f64> {
    gates.map(|g| g[layer * state.config.num_heads + head])
}

fn filter_gate_slice<'a>(state: &ModelState, gates: Gates<'a>, layer: usize) -> Option<&'a [f64]> {
    let cfg = &state.config;
    gates.map(|g| {
        let start = cfg.num_layers * cfg.num_heads + layer * cfg.d_ff;
        &g[start..start + cfg.d_ff]
    })
}

pub fn forward_sample(state: &ModelState, gates: Gates<'_>, sample: &Sample) -> Result<SampleCache> {
    validate_sample(state, sample)?;
    check_gates(state, gates)?;
    let cfg = &state.config;
    let lay = state.layout();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let f = cfg.d_ff;
    let len = sample.tokens.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = state.mat(lay.tok_emb, cfg.vocab_size, d);
    let pos = state.mat(lay.pos_emb, cfg.max_seq_len, d);
    let mut x = Array2::zeros((len, d));
    for (i, &t) in sample.tokens.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&tok.row(t));
        row += &pos.row(i);
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (l, o) in lay.layers.iter().enumerate() {
        let (a, ln1) = ln_forward(&x, state.vec(o.ln1_g, d), state.vec(o.ln1_b, d));
        let q = a.dot(&state.mat(o.wq, d, d)) + state.vec(o.bq, d);
        let k = a.dot(&state.mat(o.wk, d, d)) + state.vec(o.bk, d);
        let v = a.dot(&state.mat(o.wv, d, d)) + state.vec(o.bv, d);

        let mut ctx = Array2::zeros((len, d));
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            p.mapv_inplace(|z| z * scale);
            softmax_rows(&mut p);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let mut ctx_gated = ctx.clone();
        if gates.is_some() {
            for h in 0..cfg.num_heads {
                let gh = head_gate(state, gates, l, h).unwrap();
                ctx_gated
                    .slice_mut(s![.., h * dh..(h + 1) * dh])
                    .mapv_inplace(|z| z * gh);
            }
        }
        let attn = ctx_gated.dot(&state.mat(o.wo, d, d)) + state.vec(o.bo, d);
        x += &attn;

        let (a2, ln2) = ln_forward(&x, state.vec(o.ln2_g, d), state.vec(o.ln2_b, d));
        let pre = a2.dot(&state.mat(o.w1, f, d).t()) + state.vec(o.b1, f);
        let act = pre.mapv(gelu);
        let act_gated = match filter_gate_slice(state, gates, l) {
            Some(gf) => &act * &ArrayView1::from(gf),
            None => act.clone(),
        };
        let ff = act_gated.dot(&state.mat(o.w2, d, f).t()) + state.vec(o.b2, d);
        x += &ff;

        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ctx_gated,
            ln2,
            a2,
            pre,
            act,
            act_gated,
        });
    }

    let (z, lnf) = ln_forward(&x, state.vec(lay.lnf_g, d), state.vec(lay.lnf_b, d));
    let pooled = z.mean_axis(Axis(0)).expect("nonempty sequence");
    let logits = pooled.dot(&state.mat(lay.wc, d, cfg.num_classes)) + state.vec(lay.bc, cfg.num_classes);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward"));
    }
    Ok(SampleCache {
        tokens: sample.tokens.clone(),
        layers,
        lnf,
        pooled,
        logits,
    })
}

fn grad_mat<'a>(g: &'a mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut g[offset..offset + rows * cols]).expect("layout-consistent view")
}

fn grad_vec(g: &mut [f64], offset: usize, len: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut g[offset..offset + len])
}

/// Backpropagates `dlogits` through a cached forward pass.
///
/// Returns the parameter gradient (flat, parameter-shaped) and the gradient
/// with respect to every gate, evaluated at the gates used in the forward
/// pass (all ones when the pass was ungated).
pub fn backward_sample(
    state: &ModelState,
    gates: Gates<'_>,
    cache: &SampleCache,
    dlogits: ArrayView1<'_, f64>,
) -> (Vec<f64>, Vec<f64>) {
    let cfg = &state.config;
    let lay = state.layout();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let f = cfg.d_ff;
    let c = cfg.num_classes;
    let len = cache.tokens.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = vec![0.0; state.num_params()];
    let mut mask_grads = vec![0.0; cfg.module_count()];

    // classifier
    {
        let mut dwc = grad_mat(&mut grads, lay.wc, d, c);
        for (i, &p) in cache.pooled.iter().enumerate() {
            let mut row = dwc.row_mut(i);
            row.scaled_add(p, &dlogits);
        }
    }
    grad_vec(&mut grads, lay.bc, c).zip_mut_with(&dlogits, |g, &v| *g += v);
    let dpooled = state.mat(lay.wc, d, c).dot(&dlogits);
    let mut dz = Array2::zeros((len, d));
    let inv_len = 1.0 / len as f64;
    for mut row in dz.rows_mut() {
        row.assign(&dpooled);
        row.mapv_inplace(|v| v * inv_len);
    }
    let mut dx = {
        let (dg, db) = split_two(&mut grads, lay.lnf_g, lay.lnf_b, d);
        ln_backward(&dz, &cache.lnf, state.vec(lay.lnf_g, d), dg, db)
    };

    for (l, o) in lay.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];

        // FFN
        let dff = &dx;
        grad_mat(&mut grads, o.w2, d, f).scaled_add(1.0, &dff.t().dot(&lc.act_gated));
        grad_vec(&mut grads, o.b2, d).scaled_add(1.0, &dff.sum_axis(Axis(0)));
        let dact_gated = dff.dot(&state.mat(o.w2, d, f));
        let filter_base = cfg.num_layers * cfg.num_heads + l * f;
        for j in 0..f {
            mask_grads[filter_base + j] = dact_gated.column(j).dot(&lc.act.column(j));
        }
        let mut dpre = match filter_gate_slice(state, gates, l) {
            Some(gf) => &dact_gated * &ArrayView1::from(gf),
            None => dact_gated,
        };
        Zip::from(&mut dpre).and(&lc.pre).for_each(|g, &p| *g *= gelu_grad(p));
        grad_mat(&mut grads, o.w1, f, d).scaled_add(1.0, &dpre.t().dot(&lc.a2));
        grad_vec(&mut grads, o.b1, f).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        let da2 = dpre.dot(&state.mat(o.w1, f, d));
        let dx_ln2 = {
            let (dg, db) = split_two(&mut grads, o.ln2_g, o.ln2_b, d);
            ln_backward(&da2, &lc.ln2, state.vec(o.ln2_g, d), dg, db)
        };
        dx += &dx_ln2;

        // attention
        let dattn = &dx;
        grad_mat(&mut grads, o.wo, d, d).scaled_add(1.0, &lc.ctx_gated.t().dot(dattn));
        grad_vec(&mut grads, o.bo, d).scaled_add(1.0, &dattn.sum_axis(Axis(0)));
        let mut dctx = dattn.dot(&state.mat(o.wo, d, d).t());
        let mut dq = Array2::zeros((len, d));
        let mut dk = Array2::zeros((len, d));
        let mut dv = Array2::zeros((len, d));
        for h in 0..cfg.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let gi = l * cfg.num_heads + h;
            mask_grads[gi] = (&dctx.slice(cols) * &lc.ctx.slice(cols)).sum();
            if let Some(gh) = head_gate(state, gates, l, h) {
                dctx.slice_mut(cols).mapv_inplace(|z| z * gh);
            }
            let dctx_h = dctx.slice(cols);
            let p = &lc.probs[h];
            let dp = dctx_h.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let mut ds = dp;
            for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner = dsr.dot(&pr);
                Zip::from(&mut dsr).and(&pr).for_each(|g, &pp| *g = pp * (*g - inner) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        for (w, b, dproj) in [(o.wq, o.bq, &dq), (o.wk, o.bk, &dk), (o.wv, o.bv, &dv)] {
            grad_mat(&mut grads, w, d, d).scaled_add(1.0, &lc.a.t().dot(dproj));
            grad_vec(&mut grads, b, d).scaled_add(1.0, &dproj.sum_axis(Axis(0)));
        }
        let da = dq.dot(&state.mat(o.wq, d, d).t())
            + dk.dot(&state.mat(o.wk, d, d).t())
            + dv.dot(&state.mat(o.wv, d, d).t());
        let dx_ln1 = {
            let (dg, db) = split_two(&mut grads, o.ln1_g, o.ln1_b, d);
            ln_backward(&da, &lc.ln1, state.vec(o.ln1_g, d), dg, db)
        };
        dx += &dx_ln1;
    }

    for (i, &t) in cache.tokens.iter().enumerate() {
        let row = dx.row(i);
        grad_vec(&mut grads, lay.tok_emb + t * d, d).scaled_add(1.0, &row);
        grad_vec(&mut grads, lay.pos_emb + i * d, d).scaled_add(1.0, &row);
    }
    (grads, mask_grads)
}

/// Mutable views of two adjacent length-`len` vectors starting at `a` and `b` (`a < b`).
fn split_two(g: &mut [f64], a: usize, b: usize, len: usize) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert!(a + len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (
        ArrayViewMut1::from(&mut lo[a..a + len]),
        ArrayViewMut1::from(&mut hi[..len]),
    )
}

/// Log-softmax of a logit vector.
pub fn log_softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|v| v - lse)
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Cross-entropy loss and its logit gradient for one sample.
pub fn cross_entropy(logits: ArrayView1<'_, f64>, label: usize) -> (f64, Array1<f64>) {
    let logp = log_softmax(logits);
    let mut dlogits = logp.mapv(f64::exp);
    dlogits[label] -= 1.0;
    (-logp[label], dlogits)
}

/// Per-sample loss, parameter gradient and gate gradient.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub id: usize,
    pub loss: f64,
    pub param_grad: Vec<f64>,
    pub mask_grad: Vec<f64>,
}

/// Evaluates an arbitrary per-sample objective on the logits and backpropagates it.
pub fn sample_grad_with<F>(state: &ModelState, gates: Gates<'_>, sample: &Sample, objective: &F) -> Result<SampleGrad>
where
    F: Fn(&Sample, ArrayView1<'_, f64>) -> (f64, Array1<f64>) + ?Sized,
{
    let cache = forward_sample(state, gates, sample)?;
    let (loss, dlogits) = objective(sample, cache.logits.view());
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let (param_grad, mask_grad) = backward_sample(state, gates, &cache, dlogits.view());
    Ok(SampleGrad {
        id: sample.id,
        loss,
        param_grad,
        mask_grad,
    })
}

pub fn sample_ce_grad(state: &ModelState, gates: Gates<'_>, sample: &Sample) -> Result<SampleGrad> {
    sample_grad_with(state, gates, sample, &|s: &Sample, logits: ArrayView1<'_, f64>| {
        cross_entropy(logits, s.label)
    })
}

/// Computes per-sample results in parallel and returns them in input order.
pub fn par_map_samples<T, F>(samples: &[Sample], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Sample) -> Result<T> + Sync + Send,
{
    samples.par_iter().map(f).collect()
}

/// Logits for every sample of the batch (`batch x num_classes`).
pub fn forward(state: &ModelState, gates: Gates<'_>, batch: &[Sample]) -> Result<Array2<f64>> {
    let rows = par_map_samples(batch, |s| Ok(forward_sample(state, gates, s)?.logits))?;
    let mut out = Array2::zeros((batch.len(), state.config.num_classes));
    for (mut r, l) in out.rows_mut().into_iter().zip(rows) {
        r.assign(&l);
    }
    Ok(out)
}

/// Mean loss with parameter and gate gradients over a batch.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub param_grads: Vec<f64>,
    pub mask_grads: Vec<f64>,
}

/// Mean objective over a batch; per-sample results are reduced in batch order.
pub fn batch_grad_with<F>(state: &ModelState, gates: Gates<'_>, batch: &[Sample], objective: &F) -> Result<LossGrads>
where
    F: Fn(&Sample, ArrayView1<'_, f64>) -> (f64, Array1<f64>) + Sync + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::EmptyData("batch"));
    }
    let per = par_map_samples(batch, |s| sample_grad_with(state, gates, s, objective))?;
    let mut loss = 0.0;
    let mut param_grads = state.zeros_like();
    let mut mask_grads = vec![0.0; state.config.module_count()];
    for sg in &per {
        loss += sg.loss;
        for (a, b) in param_grads.iter_mut().zip(&sg.param_grad) {
            *a += b;
        }
        for (a, b) in mask_grads.iter_mut().zip(&sg.mask_grad) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    param_grads.iter_mut().for_each(|g| *g *= inv);
    mask_grads.iter_mut().for_each(|g| *g *= inv);
    Ok(LossGrads {
        loss: loss * inv,
        param_grads,
        mask_grads,
    })
}

/// Mean cross-entropy over the batch with exact parameter and gate gradients.
pub fn loss_and_grads(state: &ModelState, gates: Gates<'_>, batch: &[Sample]) -> Result<LossGrads> {
    batch_grad_with(state, gates, batch, &|s: &Sample, logits: ArrayView1<'_, f64>| {
        cross_entropy(logits, s.label)
    })
}
