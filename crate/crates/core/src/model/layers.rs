//! Forward and backward passes of the individual blocks. Activations are
//! `L × width` matrices with one row per position; weights are `out × in`.

use alloc::vec;
use alloc::vec::Vec;

use crate::chunkwise::run_chunkwise;
use crate::error::{Error, Result};
use crate::grad::backward_with_states;
use crate::math;
use crate::numerics::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn, Matrix, Vector};
use crate::rules::{self, Arity, Gate, RuleKind, StepGates};
use crate::scan::{run_sequential_with_states, SequenceInputs};

use super::config::ModelConfig;
use super::params::{AttentionMixer, GateProjection, LinearMixer, Mlp};

pub const NORM_EPS: f64 = 1e-6;
pub const KEY_NORM_EPS: f64 = 1e-6;

/// Which scan implementation the linear-attention blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    /// Sequential scan with cached states; required for backward.
    Sequential,
    /// Chunkwise kernel with the given chunk size (clamped to the length).
    Chunkwise(usize),
}

/// `X Wᵀ`.
pub fn project(x: &Matrix, w: &Matrix) -> Matrix {
    let mut y = Matrix::zeros(x.rows(), w.rows());
    gemm_nt(x.data(), w.data(), y.data_mut(), x.rows(), x.cols(), w.rows());
    y
}

/// Backward of [`project`]: `dX += dY W`, `dW += dYᵀ X`.
pub fn project_backward(dy: &Matrix, w: &Matrix, x: &Matrix, dx: &mut Matrix, dw: &mut Matrix) {
    let (l, out, inp) = (x.rows(), w.rows(), w.cols());
    gemm_nn(dy.data(), w.data(), dx.data_mut(), l, out, inp);
    gemm_tn(dy.data(), x.data(), dw.data_mut(), out, l, inp);
}

fn head_row(m: &Matrix, t: usize, h: usize, hd: usize) -> &[f64] {
    &m.row(t)[h * hd..(h + 1) * hd]
}

fn head_row_mut(m: &mut Matrix, t: usize, h: usize, hd: usize) -> &mut [f64] {
    &mut m.row_mut(t)[h * hd..(h + 1) * hd]
}

// ---------------------------------------------------------------- RMSNorm

#[derive(Clone, Debug)]
pub struct NormCache {
    inv_rms: Vec<f64>,
    xhat: Matrix,
}

/// Scale-only RMS normalization of each row.
pub fn rms_norm(x: &Matrix, scale: &[f64]) -> (Matrix, NormCache) {
    let d = x.cols();
    let mut xhat = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    let mut y = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        let row = x.row(t);
        let inv = 1.0 / math::sqrt(dot(row, row) / d as f64 + NORM_EPS);
        inv_rms.push(inv);
        for (xh, yv, (&xv, &g)) in xhat
            .row_mut(t)
            .iter_mut()
            .zip(y.row_mut(t).iter_mut())
            .zip(row.iter().zip(scale))
            .map(|((a, b), c)| (a, b, c))
        {
            *xh = xv * inv;
            *yv = *xh * g;
        }
    }
    (y, NormCache { inv_rms, xhat })
}

pub fn rms_norm_backward(dy: &Matrix, scale: &[f64], cache: &NormCache, dx: &mut Matrix, dscale: &mut [f64]) {
    let d = dy.cols();
    let mut dxhat = vec![0.0; d];
    for t in 0..dy.rows() {
        let (dyr, xh) = (dy.row(t), cache.xhat.row(t));
        for i in 0..d {
            dxhat[i] = dyr[i] * scale[i];
            dscale[i] += dyr[i] * xh[i];
        }
        let mean = dot(&dxhat, xh) / d as f64;
        let inv = cache.inv_rms[t];
        for (o, (&g, &x)) in dx.row_mut(t).iter_mut().zip(dxhat.iter().zip(xh)) {
            *o += inv * (g - x * mean);
        }
    }
}

// ---------------------------------------------------------------- SwiGLU

#[derive(Clone, Debug)]
pub struct MlpCache {
    gate_pre: Matrix,
    up: Matrix,
    hidden: Matrix,
}

/// `W_down(silu(W_gate x) ⊙ (W_up x))` for a single vector.
pub fn swiglu_mlp(x: &[f64], mlp: &Mlp) -> Result<Vector> {
    let a = numerics::matvec(&mlp.w_gate, x)?;
    let b = numerics::matvec(&mlp.w_up, x)?;
    let m = Vector::from_fn(a.len(), |i| math::silu(a[i]) * b[i]);
    numerics::matvec(&mlp.w_down, &m)
}

pub fn swiglu_forward(x: &Matrix, mlp: &Mlp) -> (Matrix, MlpCache) {
    let gate_pre = project(x, &mlp.w_gate);
    let up = project(x, &mlp.w_up);
    let mut hidden = up.clone();
    for (h, &a) in hidden.data_mut().iter_mut().zip(gate_pre.data()) {
        *h *= math::silu(a);
    }
    let y = project(&hidden, &mlp.w_down);
    (y, MlpCache { gate_pre, up, hidden })
}

pub fn swiglu_backward(dy: &Matrix, x: &Matrix, mlp: &Mlp, cache: &MlpCache, dx: &mut Matrix, grads: &mut Mlp) {
    let mut dhidden = Matrix::zeros(cache.hidden.rows(), cache.hidden.cols());
    project_backward(dy, &mlp.w_down, &cache.hidden, &mut dhidden, &mut grads.w_down);
    let mut da = dhidden.clone();
    let mut db = dhidden;
    for ((ga, gb), (&a, &b)) in da
        .data_mut()
        .iter_mut()
        .zip(db.data_mut().iter_mut())
        .zip(cache.gate_pre.data().iter().zip(cache.up.data()))
    {
        let s = math::sigmoid(a);
        let dm = *ga;
        *ga = dm * b * s * (1.0 + a * (1.0 - s));
        *gb = dm * a * s;
    }
    project_backward(&da, &mlp.w_gate, x, dx, &mut grads.w_gate);
    project_backward(&db, &mlp.w_up, x, dx, &mut grads.w_up);
}

// ---------------------------------------------------------------- softmax attention

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Causal attention weights per head (`L × L`, zero above the diagonal).
    probs: Vec<Matrix>,
    o: Matrix,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Matrix] {
        &self.probs
    }
}

/// Causal multi-head softmax attention without positional encoding.
pub fn attention_forward(x: &Matrix, p: &AttentionMixer, config: &ModelConfig) -> (Matrix, AttentionCache) {
    let (l, hd) = (x.rows(), config.head_dim);
    let scale = 1.0 / math::sqrt(hd as f64);
    let q = project(x, &p.w_q);
    let k = project(x, &p.w_k);
    let v = project(x, &p.w_v);
    let mut o = Matrix::zeros(l, config.d_model);
    let mut probs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let mut pm = Matrix::zeros(l, l);
        for t in 0..l {
            let qt = head_row(&q, t, h, hd);
            let row = &mut pm.row_mut(t)[..=t];
            for (s, z) in row.iter_mut().enumerate() {
                *z = dot(qt, head_row(&k, s, h, hd)) * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for z in row.iter_mut() {
                *z = math::exp(*z - max);
                sum += *z;
            }
            for z in row.iter_mut() {
                *z /= sum;
            }
            for s in 0..=t {
                let w = pm.get(t, s);
                let (vs, ot) = (head_row(&v, s, h, hd).to_vec(), head_row_mut(&mut o, t, h, hd));
                axpy(w, &vs, ot);
            }
        }
        probs.push(pm);
    }
    let y = project(&o, &p.w_o);
    (y, AttentionCache { q, k, v, probs, o })
}

#[allow(clippy::needless_range_loop)]
pub fn attention_backward(
    dy: &Matrix,
    x: &Matrix,
    p: &AttentionMixer,
    cache: &AttentionCache,
    config: &ModelConfig,
    dx: &mut Matrix,
    grads: &mut AttentionMixer,
) {
    let (l, d, hd) = (x.rows(), config.d_model, config.head_dim);
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut d_o = Matrix::zeros(l, d);
    project_backward(dy, &p.w_o, &cache.o, &mut d_o, &mut grads.w_o);
    let mut dq = Matrix::zeros(l, d);
    let mut dk = Matrix::zeros(l, d);
    let mut dv = Matrix::zeros(l, d);
    let mut dp = vec![0.0; l];
    for h in 0..config.n_heads {
        let pm = &cache.probs[h];
        for t in 0..l {
            let dot_t = head_row(&d_o, t, h, hd).to_vec();
            let mut weighted = 0.0;
            for s in 0..=t {
                dp[s] = dot(&dot_t, head_row(&cache.v, s, h, hd));
                weighted += pm.get(t, s) * dp[s];
                axpy(pm.get(t, s), &dot_t, head_row_mut(&mut dv, s, h, hd));
            }
            for s in 0..=t {
                let ds = pm.get(t, s) * (dp[s] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let ks = head_row(&cache.k, s, h, hd).to_vec();
                axpy(ds, &ks, head_row_mut(&mut dq, t, h, hd));
                let qt = head_row(&cache.q, t, h, hd).to_vec();
                axpy(ds, &qt, head_row_mut(&mut dk, s, h, hd));
            }
        }
    }
    project_backward(&dq, &p.w_q, x, dx, &mut grads.w_q);
    project_backward(&dk, &p.w_k, x, dx, &mut grads.w_k);
    project_backward(&dv, &p.w_v, x, dx, &mut grads.w_v);
}

// ---------------------------------------------------------------- gates

fn gate_values(x: &Matrix, g: &GateProjection) -> Matrix {
    let mut z = project(x, &g.w);
    for t in 0..z.rows() {
        for (zi, &b) in z.row_mut(t).iter_mut().zip(g.b.iter()) {
            *zi = math::sigmoid(*zi + b);
        }
    }
    z
}

fn head_gate(values: &Matrix, arity: Arity, t: usize, h: usize, hd: usize) -> Gate {
    match arity {
        Arity::Scalar => Gate::Scalar(values.get(t, h)),
        Arity::Channels => Gate::Channels(Vector::from(head_row(values, t, h, hd))),
    }
}

#[derive(Clone, Debug)]
struct GateValues {
    alpha: Option<Matrix>,
    beta: Option<Matrix>,
    beta_v: Option<Matrix>,
}

fn all_gate_values(x: &Matrix, p: &LinearMixer) -> GateValues {
    GateValues {
        alpha: p.alpha.as_ref().map(|g| gate_values(x, g)),
        beta: p.beta.as_ref().map(|g| gate_values(x, g)),
        beta_v: p.beta_v.as_ref().map(|g| gate_values(x, g)),
    }
}

fn step_gates(rule: RuleKind, values: &GateValues, kappa: Option<&[f64]>, t: usize, h: usize, hd: usize) -> StepGates {
    let mut g = StepGates::none();
    if rule == RuleKind::RetNet {
        g.alpha = Some(Gate::Scalar(rules::retnet_decay(h)));
    } else if let (Some(a), Some(arity)) = (&values.alpha, rule.alpha_arity()) {
        g.alpha = Some(head_gate(a, arity, t, h, hd));
    }
    if let (Some(b), Some(arity)) = (&values.beta, rule.beta_arity()) {
        g.beta = Some(head_gate(b, arity, t, h, hd));
    }
    if let Some(bv) = &values.beta_v {
        g.beta_v = Some(Vector::from(head_row(bv, t, h, hd)));
    }
    if rule.has_kappa() {
        g.kappa = kappa.map(Vector::from);
    }
    g
}

/// Gates for one position, one entry per head. Scalar-arity gates get one
/// logit per head; channel gates one per head channel.
pub fn compute_gates(x: &[f64], p: &LinearMixer, config: &ModelConfig) -> Result<Vec<StepGates>> {
    if x.len() != config.d_model {
        return Err(Error::DimensionMismatch {
            op: "compute_gates",
            expected: config.d_model,
            found: x.len(),
        });
    }
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let values = all_gate_values(&xm, p);
    let keys = project(&xm, &p.w_k);
    let hd = config.head_dim;
    Ok((0..config.n_heads)
        .map(|h| {
            let kappa = numerics::l2_normalize(head_row(&keys, 0, h, hd), KEY_NORM_EPS);
            step_gates(config.rule, &values, Some(&kappa), 0, h, hd)
        })
        .collect())
}

// ---------------------------------------------------------------- linear attention

#[derive(Clone, Debug)]
pub struct HeadCache {
    pub inputs: SequenceInputs,
    states: Option<Vec<Matrix>>,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    k_raw: Matrix,
    gates: GateValues,
    pub heads: Vec<HeadCache>,
    o: Matrix,
}

/// Per head: project, L2-normalize the key, compute gates, run the scan;
/// then concatenate heads and apply the output projection.
pub fn linear_attention_forward(
    x: &Matrix,
    p: &LinearMixer,
    config: &ModelConfig,
    mode: ScanMode,
) -> Result<(Matrix, LinearCache)> {
    let (l, hd, rule) = (x.rows(), config.head_dim, config.rule);
    let q = project(x, &p.w_q);
    let k_raw = project(x, &p.w_k);
    let v = project(x, &p.w_v);
    let values = all_gate_values(x, p);
    let mut o = Matrix::zeros(l, config.d_model);
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let mut inputs = SequenceInputs {
            rule,
            q: Vec::with_capacity(l),
            k: Vec::with_capacity(l),
            v: Vec::with_capacity(l),
            gates: Vec::with_capacity(l),
            s0: Matrix::zeros(hd, hd),
        };
        for t in 0..l {
            let k = numerics::l2_normalize(head_row(&k_raw, t, h, hd), KEY_NORM_EPS);
            inputs.gates.push(step_gates(rule, &values, Some(&k), t, h, hd));
            inputs.q.push(Vector::from(head_row(&q, t, h, hd)));
            inputs.k.push(k);
            inputs.v.push(Vector::from(head_row(&v, t, h, hd)));
        }
        let (out, states) = match mode {
            ScanMode::Sequential => {
                let (out, states) = run_sequential_with_states(&inputs)?;
                (out, Some(states))
            }
            ScanMode::Chunkwise(c) => (run_chunkwise(&inputs, c.clamp(1, l))?.0, None),
        };
        for (t, ot) in out.o.iter().enumerate() {
            head_row_mut(&mut o, t, h, hd).copy_from_slice(ot);
        }
        heads.push(HeadCache { inputs, states });
    }
    let y = project(&o, &p.w_o);
    Ok((
        y,
        LinearCache {
            k_raw,
            gates: values,
            heads,
            o,
        },
    ))
}

/// Accumulates `dα · α(1 − α)` into the logit gradient of one head/step.
fn accumulate_gate_logit(dz: &mut Matrix, values: &Matrix, grad: &[f64], arity: Arity, t: usize, h: usize, hd: usize) {
    match arity {
        Arity::Scalar => {
            let g = values.get(t, h);
            let cur = dz.get(t, h);
            dz.set(t, h, cur + grad[0] * g * (1.0 - g));
        }
        Arity::Channels => {
            let vals = head_row(values, t, h, hd).to_vec();
            for ((z, &g), &d) in head_row_mut(dz, t, h, hd).iter_mut().zip(&vals).zip(grad) {
                *z += d * g * (1.0 - g);
            }
        }
    }
}

fn gate_backward(dz: &Matrix, x: &Matrix, p: &GateProjection, dx: &mut Matrix, grads: &mut GateProjection) {
    project_backward(dz, &p.w, x, dx, &mut grads.w);
    for t in 0..dz.rows() {
        for (b, &z) in grads.b.iter_mut().zip(dz.row(t)) {
            *b += z;
        }
    }
}

/// Backward of `k = x / max(‖x‖, ε)`.
fn l2_normalize_backward(x: &[f64], dk: &[f64], dx: &mut [f64]) {
    let n = math::sqrt(dot(x, x));
    if n > KEY_NORM_EPS {
        let k_dot = dot(x, dk) / (n * n);
        for ((o, &d), &xi) in dx.iter_mut().zip(dk).zip(x) {
            *o += (d - xi * k_dot) / n;
        }
    } else {
        axpy(1.0 / KEY_NORM_EPS, dk, dx);
    }
}

pub fn linear_attention_backward(
    dy: &Matrix,
    x: &Matrix,
    p: &LinearMixer,
    cache: &LinearCache,
    config: &ModelConfig,
    dx: &mut Matrix,
    grads: &mut LinearMixer,
) -> Result<()> {
    let (l, d, hd, rule) = (x.rows(), config.d_model, config.head_dim, config.rule);
    let mut d_o = Matrix::zeros(l, d);
    project_backward(dy, &p.w_o, &cache.o, &mut d_o, &mut grads.w_o);

    let mut dq = Matrix::zeros(l, d);
    let mut dk_raw = Matrix::zeros(l, d);
    let mut dv = Matrix::zeros(l, d);
    let zeros_like = |m: &Option<Matrix>| m.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()));
    let mut dz_alpha = zeros_like(&cache.gates.alpha);
    let mut dz_beta = zeros_like(&cache.gates.beta);
    let mut dz_beta_v = zeros_like(&cache.gates.beta_v);

    for (h, head) in cache.heads.iter().enumerate() {
        let states = head
            .states
            .as_ref()
            .ok_or_else(|| Error::invalid("backward needs a sequential forward trace"))?;
        let d_head: Vec<Vector> = (0..l).map(|t| Vector::from(head_row(&d_o, t, h, hd))).collect();
        let g = backward_with_states(&head.inputs, states, &d_head, None)?;
        for t in 0..l {
            head_row_mut(&mut dq, t, h, hd).copy_from_slice(&g.dq[t]);
            head_row_mut(&mut dv, t, h, hd).copy_from_slice(&g.dv[t]);
            let mut dk = g.dk[t].clone();
            let dgt = &g.d_gates[t];
            if let Some(dkappa) = &dgt.kappa {
                axpy(1.0, dkappa, &mut dk);
            }
            let x_head = head_row(&cache.k_raw, t, h, hd).to_vec();
            l2_normalize_backward(&x_head, &dk, head_row_mut(&mut dk_raw, t, h, hd));

            if rule.alpha_is_learned() {
                if let (Some(dz), Some(vals), Some(da), Some(arity)) = (
                    dz_alpha.as_mut(),
                    cache.gates.alpha.as_ref(),
                    dgt.alpha.as_ref(),
                    rule.alpha_arity(),
                ) {
                    accumulate_gate_logit(dz, vals, da.values(), arity, t, h, hd);
                }
            }
            if let (Some(dz), Some(vals), Some(db), Some(arity)) = (
                dz_beta.as_mut(),
                cache.gates.beta.as_ref(),
                dgt.beta.as_ref(),
                rule.beta_arity(),
            ) {
                accumulate_gate_logit(dz, vals, db.values(), arity, t, h, hd);
            }
            if let (Some(dz), Some(vals), Some(dbv)) =
                (dz_beta_v.as_mut(), cache.gates.beta_v.as_ref(), dgt.beta_v.as_ref())
            {
                accumulate_gate_logit(dz, vals, dbv, Arity::Channels, t, h, hd);
            }
        }
    }

    project_backward(&dq, &p.w_q, x, dx, &mut grads.w_q);
    project_backward(&dk_raw, &p.w_k, x, dx, &mut grads.w_k);
    project_backward(&dv, &p.w_v, x, dx, &mut grads.w_v);
    let pairs = [
        (dz_alpha, &p.alpha, &mut grads.alpha),
        (dz_beta, &p.beta, &mut grads.beta),
        (dz_beta_v, &p.beta_v, &mut grads.beta_v),
    ];
    for (dz, proj, grad) in pairs {
        if let (Some(dz), Some(proj), Some(grad)) = (dz, proj.as_ref(), grad.as_mut()) {
            gate_backward(&dz, x, proj, dx, grad);
        }
    }
    Ok(())
}
