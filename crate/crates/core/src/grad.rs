//! Reverse-mode gradients through the sequential scan and a central
//! finite-difference verifier.
//!
//! The backward pass differentiates
//! `ℓ = Σ_t ⟨dO_t, o_t⟩ + ⟨dS_final, S_L⟩` with respect to every input of
//! the scan, walking the cached states in reverse time.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{self, Matrix, Vector};
use crate::rules::{Gate, RuleKind, StepGates};
use crate::scan::{run_sequential, run_sequential_with_states, SequenceInputs, SequenceOutputs};

/// Gradients mirroring [`SequenceInputs`]. Gate gradients keep the arity of
/// the gate they belong to; RetNet's fixed decay has a zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceGrads {
    pub dq: Vec<Vector>,
    pub dk: Vec<Vector>,
    pub dv: Vec<Vector>,
    pub d_gates: Vec<StepGates>,
    pub ds0: Matrix,
}

/// Folds a per-channel gradient into the arity of `like`.
fn reduce_like(like: &Gate, per_channel: Vector) -> Gate {
    match like {
        Gate::Scalar(_) => Gate::Scalar(per_channel.iter().sum()),
        Gate::Channels(_) => Gate::Channels(per_channel),
    }
}

/// `Σ_j a_ij b_ij` for each row `i`.
fn row_inner(a: &Matrix, b: &Matrix) -> Vector {
    Vector::from_fn(a.rows(), |i| numerics::dot(a.row(i), b.row(i)))
}

/// Reverse-mode pass. `d_s_final` may be `None` for a zero upstream state
/// gradient.
pub fn backward_sequential(
    inputs: &SequenceInputs,
    d_o: &[Vector],
    d_s_final: Option<&Matrix>,
) -> Result<SequenceGrads> {
    let (_, states) = run_sequential_with_states(inputs)?;
    backward_with_states(inputs, &states, d_o, d_s_final)
}

/// [`backward_sequential`] with the post-update states `S_1 … S_L` already
/// available (as from [`run_sequential_with_states`]).
pub fn backward_with_states(
    inputs: &SequenceInputs,
    states: &[Matrix],
    d_o: &[Vector],
    d_s_final: Option<&Matrix>,
) -> Result<SequenceGrads> {
    let len = inputs.len();
    let (d_k, d_v) = (inputs.d_k(), inputs.d_v());
    if d_o.len() != len || states.len() != len {
        return Err(Error::DimensionMismatch {
            op: "backward_sequential dO",
            expected: len,
            found: d_o.len().min(states.len()),
        });
    }
    let mut g = match d_s_final {
        Some(m) if m.shape() != (d_k, d_v) => {
            return Err(Error::DimensionMismatch {
                op: "backward_sequential dS_final",
                expected: d_k * d_v,
                found: m.rows() * m.cols(),
            })
        }
        Some(m) => m.clone(),
        None => Matrix::zeros(d_k, d_v),
    };

    let rule = inputs.rule;
    let mut dq = Vec::with_capacity(len);
    let mut dk = Vec::with_capacity(len);
    let mut dv = Vec::with_capacity(len);
    let mut d_gates = Vec::with_capacity(len);
    for t in (0..len).rev() {
        if d_o[t].len() != d_v {
            return Err(Error::at_step(
                t,
                Error::DimensionMismatch {
                    op: "backward_sequential dO",
                    expected: d_v,
                    found: d_o[t].len(),
                },
            ));
        }
        // o_t = S_tᵀ q_t.
        numerics::add_outer(&mut g, 1.0, &inputs.q[t], &d_o[t]);
        dq.push(numerics::matvec(&states[t], &d_o[t])?);

        let prev = if t == 0 { &inputs.s0 } else { &states[t - 1] };
        let step = step_backward(rule, prev, &inputs.k[t], &inputs.v[t], &inputs.gates[t], &g)
            .map_err(|e| Error::at_step(t, e))?;
        g = step.ds_prev;
        dk.push(step.dk);
        dv.push(step.dv);
        d_gates.push(step.d_gates);
    }
    dq.reverse();
    dk.reverse();
    dv.reverse();
    d_gates.reverse();
    Ok(SequenceGrads {
        dq,
        dk,
        dv,
        d_gates,
        ds0: g,
    })
}

struct StepGrad {
    ds_prev: Matrix,
    dk: Vector,
    dv: Vector,
    d_gates: StepGates,
}

fn gate<'a>(rule: RuleKind, field: &'static str, g: Option<&'a Gate>) -> Result<&'a Gate> {
    g.ok_or(Error::MissingGate { rule, field })
}

/// Backward through one transition given `G = ∂ℓ/∂S_t` and `S = S_{t−1}`.
fn step_backward(rule: RuleKind, s: &Matrix, k: &[f64], v: &[f64], gates: &StepGates, g: &Matrix) -> Result<StepGrad> {
    let d_k = s.rows();
    let mut d_gates = gates.zeros_like();
    let alpha = match &gates.alpha {
        Some(a) => a.expand(d_k),
        None => Vector::filled(d_k, 1.0),
    };

    match rule {
        RuleKind::LinearAttention
        | RuleKind::RetNet
        | RuleKind::Mamba2Scalar
        | RuleKind::Gla
        | RuleKind::Rwkv6
        | RuleKind::Hgrn2 => {
            // S_t = Diag(α) S + w vᵀ.
            let w = if rule == RuleKind::Hgrn2 {
                alpha.map(|x| 1.0 - x)
            } else {
                Vector::from(k)
            };
            let dw = numerics::matvec(g, v)?;
            let dv = numerics::matvec_t(g, &w)?;
            let mut dalpha = row_inner(g, s);
            let dk = if rule == RuleKind::Hgrn2 {
                for (a, x) in dalpha.iter_mut().zip(dw.iter()) {
                    *a -= x;
                }
                Vector::zeros(d_k)
            } else {
                dw
            };
            if let Some(a) = &gates.alpha {
                if rule != RuleKind::RetNet {
                    d_gates.alpha = Some(reduce_like(a, dalpha));
                }
            }
            Ok(StepGrad {
                ds_prev: numerics::diag_scale(&alpha, g)?,
                dk,
                dv,
                d_gates,
            })
        }
        RuleKind::DeltaNet | RuleKind::Gdn | RuleKind::Kda | RuleKind::Fg2Gdn | RuleKind::Fg2GdnPlus => {
            let (e, u) = crate::rules::scale_kv(rule, k, v, gates)?;
            // S_t = P + e (u − Pᵀe)ᵀ with P = Diag(α) S.
            let p = numerics::diag_scale(&alpha, s)?;
            let r = numerics::matvec_t(&p, &e)?;
            let gte = numerics::matvec_t(g, &e)?;
            let mut dp = g.clone();
            numerics::add_outer(&mut dp, -1.0, &e, &gte);
            let de = numerics::matvec(g, &u.sub(&r))?.sub(&numerics::matvec(&p, &gte)?);
            let du = gte;

            let beta = gate(rule, "beta", gates.beta.as_ref())?;
            let (dk, dv) = match beta {
                Gate::Scalar(b) => {
                    let root = math::sqrt(*b);
                    // Direct form avoids the 1/√β factor: ∂ℓ/∂β = kᵀ G (v − Pᵀk).
                    let pk = numerics::matvec_t(&p, k)?;
                    let gk = numerics::matvec_t(g, k)?;
                    let db = numerics::dot(&gk, &Vector::from(v).sub(&pk));
                    d_gates.beta = Some(Gate::Scalar(db));
                    (de.scaled(root), du.scaled(root))
                }
                Gate::Channels(b) => {
                    let root_k = b.map(math::sqrt);
                    let root_v = match &gates.beta_v {
                        Some(bv) if rule == RuleKind::Fg2GdnPlus => bv.map(math::sqrt),
                        _ => root_k.clone(),
                    };
                    let d_root_k = de.hadamard(k);
                    let d_root_v = du.hadamard(v);
                    let half_inv = |d: &Vector, root: &Vector| Vector::from_fn(d.len(), |i| d[i] / (2.0 * root[i]));
                    if rule == RuleKind::Fg2GdnPlus {
                        d_gates.beta = Some(Gate::Channels(half_inv(&d_root_k, &root_k)));
                        d_gates.beta_v = Some(half_inv(&d_root_v, &root_v));
                    } else {
                        let both = d_root_k.add(&d_root_v);
                        d_gates.beta = Some(Gate::Channels(half_inv(&both, &root_k)));
                    }
                    (de.hadamard(&root_k), du.hadamard(&root_v))
                }
            };
            if let Some(a) = &gates.alpha {
                d_gates.alpha = Some(reduce_like(a, row_inner(&dp, s)));
            }
            Ok(StepGrad {
                ds_prev: numerics::diag_scale(&alpha, &dp)?,
                dk,
                dv,
                d_gates,
            })
        }
        RuleKind::Rwkv7 => {
            // S_t = Diag(α) S − c (Sᵀκ)ᵀ + k vᵀ with c = β ⊙ κ.
            let beta = gate(rule, "beta", gates.beta.as_ref())?.expand(d_k);
            let kappa = gates
                .kappa
                .as_ref()
                .ok_or(Error::MissingGate { rule, field: "kappa" })?;
            let c = beta.hadamard(kappa);
            let s_kappa = numerics::matvec_t(s, kappa)?;
            let gtc = numerics::matvec_t(g, &c)?;
            let mut ds_prev = numerics::diag_scale(&alpha, g)?;
            numerics::add_outer(&mut ds_prev, -1.0, kappa, &gtc);
            let dc = numerics::matvec(g, &s_kappa)?.scaled(-1.0);
            let dkappa = numerics::matvec(s, &gtc)?.scaled(-1.0).add(&dc.hadamard(&beta));
            let dbeta = dc.hadamard(kappa);
            if let Some(a) = &gates.alpha {
                d_gates.alpha = Some(reduce_like(a, row_inner(g, s)));
            }
            if let Some(b) = &gates.beta {
                d_gates.beta = Some(reduce_like(b, dbeta));
            }
            d_gates.kappa = Some(dkappa);
            Ok(StepGrad {
                ds_prev,
                dk: numerics::matvec(g, v)?,
                dv: numerics::matvec_t(g, k)?,
                d_gates,
            })
        }
    }
}

/// Scalar test loss on the scan outputs, averaged over steps.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    /// `(1/L) Σ_t ½‖o_t‖²`.
    SumOfSquares,
    /// `(1/L) Σ_t CE(H o_t, y_t)` with head `H` of shape `vocab × d_v`.
    CrossEntropy { head: &'a Matrix, targets: &'a [usize] },
}

impl LossSpec<'_> {
    /// Loss value and `∂ℓ/∂o_t` for each step.
    pub fn evaluate(&self, out: &SequenceOutputs) -> Result<(f64, Vec<Vector>)> {
        let len = out.o.len();
        let scale = 1.0 / len as f64;
        match *self {
            LossSpec::SumOfSquares => {
                let loss = out.o.iter().map(|o| 0.5 * o.dot(o)).sum::<f64>() * scale;
                Ok((loss, out.o.iter().map(|o| o.scaled(scale)).collect()))
            }
            LossSpec::CrossEntropy { head, targets } => {
                if targets.len() != len {
                    return Err(Error::DimensionMismatch {
                        op: "cross-entropy targets",
                        expected: len,
                        found: targets.len(),
                    });
                }
                let mut loss = 0.0;
                let mut grads = Vec::with_capacity(len);
                for (o, &y) in out.o.iter().zip(targets) {
                    if y >= head.rows() {
                        return Err(Error::TokenOutOfRange {
                            id: y,
                            vocab: head.rows(),
                        });
                    }
                    let logits = numerics::matvec(head, o)?;
                    let (l, mut dlogits) = softmax_cross_entropy(&logits, y);
                    loss += l;
                    for x in dlogits.iter_mut() {
                        *x *= scale;
                    }
                    grads.push(numerics::matvec_t(head, &dlogits)?);
                }
                Ok((loss * scale, grads))
            }
        }
    }
}

/// `−log softmax(z)_y` and its gradient `softmax(z) − e_y`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vector) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vector = logits.iter().map(|&z| math::exp(z - max)).collect::<Vec<_>>().into();
    let sum: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= sum;
    }
    let loss = max + math::ln(sum) - logits[target];
    p[target] -= 1.0;
    (loss, p)
}

/// Which input a coordinate belongs to. Gate fields are perturbed through
/// their logit; `kappa` and the rest are perturbed directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Field {
    Q,
    K,
    V,
    AlphaLogit,
    BetaLogit,
    BetaVLogit,
    Kappa,
    S0,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Q => "q",
            Field::K => "k",
            Field::V => "v",
            Field::AlphaLogit => "alpha_logit",
            Field::BetaLogit => "beta_logit",
            Field::BetaVLogit => "beta_v_logit",
            Field::Kappa => "kappa",
            Field::S0 => "s0",
        }
    }
}

/// One scalar input. For `S0`, `index` is the row-major offset and `step`
/// is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Coordinate {
    pub field: Field,
    pub step: usize,
    pub index: usize,
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.field {
            Field::S0 => write!(f, "s0[{}]", self.index),
            field => write!(f, "{}[{}][{}]", field.name(), self.step, self.index),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoordinateError {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FdReport {
    pub rule: RuleKind,
    pub h: f64,
    pub tol: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateError>,
    pub failures: Vec<CoordinateError>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        match &self.worst {
            Some(w) => format!(
                "{}: {} coordinates, max rel err {:.3e} at {}, {} failures",
                self.rule,
                self.checked,
                self.max_rel_error,
                w.coordinate,
                self.failures.len()
            ),
            None => format!("{}: no coordinates checked", self.rule),
        }
    }
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Every perturbable coordinate of `inputs`. RetNet's fixed decay is not a
/// parameter and is skipped.
pub fn coordinates(inputs: &SequenceInputs) -> Vec<Coordinate> {
    let mut out = Vec::new();
    let mut push = |field, step, n: usize| {
        out.extend((0..n).map(|index| Coordinate { field, step, index }));
    };
    for t in 0..inputs.len() {
        push(Field::Q, t, inputs.q[t].len());
        push(Field::K, t, inputs.k[t].len());
        push(Field::V, t, inputs.v[t].len());
        let g = &inputs.gates[t];
        if inputs.rule.alpha_is_learned() {
            if let Some(a) = &g.alpha {
                push(Field::AlphaLogit, t, a.values().len());
            }
        }
        if let Some(b) = &g.beta {
            push(Field::BetaLogit, t, b.values().len());
        }
        if let Some(b) = &g.beta_v {
            push(Field::BetaVLogit, t, b.len());
        }
        if let Some(c) = &g.kappa {
            push(Field::Kappa, t, c.len());
        }
    }
    push(Field::S0, 0, inputs.s0.data().len());
    out
}

/// `∂ℓ/∂x · σ'(logit)` for gate coordinates, the plain gradient otherwise.
pub fn analytic_at(inputs: &SequenceInputs, grads: &SequenceGrads, c: Coordinate) -> f64 {
    let (t, i) = (c.step, c.index);
    let gate_chain = |value: f64, grad: f64| grad * value * (1.0 - value);
    let gates = &inputs.gates[t];
    let dg = &grads.d_gates[t];
    match c.field {
        Field::Q => grads.dq[t][i],
        Field::K => grads.dk[t][i],
        Field::V => grads.dv[t][i],
        Field::AlphaLogit => gate_chain(
            gates.alpha.as_ref().map_or(0.0, |g| g.values()[i]),
            dg.alpha.as_ref().map_or(0.0, |g| g.values()[i]),
        ),
        Field::BetaLogit => gate_chain(
            gates.beta.as_ref().map_or(0.0, |g| g.values()[i]),
            dg.beta.as_ref().map_or(0.0, |g| g.values()[i]),
        ),
        Field::BetaVLogit => gate_chain(
            gates.beta_v.as_ref().map_or(0.0, |g| g[i]),
            dg.beta_v.as_ref().map_or(0.0, |g| g[i]),
        ),
        Field::Kappa => dg.kappa.as_ref().map_or(0.0, |g| g[i]),
        Field::S0 => grads.ds0.data()[i],
    }
}

/// Copy of `inputs` with coordinate `c` moved by `delta` (in logit space
/// for gates).
pub fn perturbed(inputs: &SequenceInputs, c: Coordinate, delta: f64) -> SequenceInputs {
    let mut x = inputs.clone();
    let (t, i) = (c.step, c.index);
    let shift_logit = |v: &mut f64| *v = numerics::sigmoid(numerics::logit(*v) + delta);
    match c.field {
        Field::Q => x.q[t][i] += delta,
        Field::K => x.k[t][i] += delta,
        Field::V => x.v[t][i] += delta,
        Field::AlphaLogit => {
            if let Some(g) = x.gates[t].alpha.as_mut() {
                shift_logit(&mut g.values_mut()[i]);
            }
        }
        Field::BetaLogit => {
            if let Some(g) = x.gates[t].beta.as_mut() {
                shift_logit(&mut g.values_mut()[i]);
            }
        }
        Field::BetaVLogit => {
            if let Some(g) = x.gates[t].beta_v.as_mut() {
                shift_logit(&mut g[i]);
            }
        }
        Field::Kappa => {
            if let Some(g) = x.gates[t].kappa.as_mut() {
                g[i] += delta;
            }
        }
        Field::S0 => x.s0.data_mut()[i] += delta,
    }
    x
}

impl LossSpec<'_> {
    /// `ℓ(plus) − ℓ(minus)`, formed step by step (and for squares element by
    /// element as `½(a−b)(a+b)`) so the unchanged prefix cancels exactly
    /// instead of contributing the rounding error of two full sums.
    pub fn difference(&self, plus: &SequenceOutputs, minus: &SequenceOutputs) -> Result<f64> {
        let scale = 1.0 / plus.o.len() as f64;
        match *self {
            LossSpec::SumOfSquares => {
                let mut d = 0.0;
                for (op, om) in plus.o.iter().zip(&minus.o) {
                    for (a, b) in op.iter().zip(om.iter()) {
                        d += 0.5 * (a - b) * (a + b);
                    }
                }
                Ok(d * scale)
            }
            LossSpec::CrossEntropy { head, targets } => {
                let mut d = 0.0;
                for ((op, om), &y) in plus.o.iter().zip(&minus.o).zip(targets) {
                    let lp = softmax_cross_entropy(&numerics::matvec(head, op)?, y).0;
                    let lm = softmax_cross_entropy(&numerics::matvec(head, om)?, y).0;
                    d += lp - lm;
                }
                Ok(d * scale)
            }
        }
    }
}

fn central_difference(inputs: &SequenceInputs, loss: &LossSpec<'_>, c: Coordinate, h: f64) -> Result<f64> {
    let plus = run_sequential(&perturbed(inputs, c, h))?;
    let minus = run_sequential(&perturbed(inputs, c, -h))?;
    // Validates shapes and targets once.
    loss.evaluate(&plus)?;
    Ok(loss.difference(&plus, &minus)? / (2.0 * h))
}

/// Analytic gradients of `loss` with respect to the scan inputs.
pub fn loss_gradients(inputs: &SequenceInputs, loss: &LossSpec<'_>) -> Result<(f64, SequenceGrads)> {
    let (out, states) = run_sequential_with_states(inputs)?;
    let (value, d_o) = loss.evaluate(&out)?;
    Ok((value, backward_with_states(inputs, &states, &d_o, None)?))
}

/// Compares `analytic` against central differences of `loss` at every
/// coordinate. Forward failures at a perturbed point are reported as
/// infinite error on that coordinate.
pub fn compare_with_finite_differences(
    inputs: &SequenceInputs,
    loss: &LossSpec<'_>,
    analytic: &SequenceGrads,
    h: f64,
    tol: f64,
) -> FdReport {
    let mut report = FdReport {
        rule: inputs.rule,
        h,
        tol,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for c in coordinates(inputs) {
        let a = analytic_at(inputs, analytic, c);
        let numeric = central_difference(inputs, loss, c, h).unwrap_or(f64::NAN);
        let rel = if numeric.is_finite() && a.is_finite() {
            relative_error(a, numeric)
        } else {
            f64::INFINITY
        };
        let entry = CoordinateError {
            coordinate: c,
            analytic: a,
            numeric,
            rel_error: rel,
        };
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(entry.clone());
        }
        if rel.is_nan() || rel > tol {
            report.failures.push(entry);
        }
    }
    report
}

/// Backward pass plus [`compare_with_finite_differences`]. A failing
/// backward pass yields a report with a single infinite-error entry.
pub fn finite_diff_check(inputs: &SequenceInputs, loss: &LossSpec<'_>, h: f64, tol: f64) -> FdReport {
    match loss_gradients(inputs, loss) {
        Ok((_, grads)) => compare_with_finite_differences(inputs, loss, &grads, h, tol),
        Err(_) => {
            let entry = CoordinateError {
                coordinate: Coordinate {
                    field: Field::S0,
                    step: 0,
                    index: 0,
                },
                analytic: f64::NAN,
                numeric: f64::NAN,
                rel_error: f64::INFINITY,
            };
            FdReport {
                rule: inputs.rule,
                h,
                tol,
                checked: 0,
                max_rel_error: f64::INFINITY,
                worst: Some(entry.clone()),
                failures: alloc::vec![entry],
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use alloc::vec;

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(41);
        for rule in RuleKind::ALL {
            let inputs = SequenceInputs::random(rule, 5, 4, 4, &mut rng);
            let d_o = vec![Vector::zeros(4); 5];
            let g = backward_sequential(&inputs, &d_o, None).unwrap();
            let all_zero =
                g.dq.iter()
                    .chain(&g.dk)
                    .chain(&g.dv)
                    .all(|v| v.iter().all(|&x| x == 0.0))
                    && g.ds0.max_abs() == 0.0
                    && g.d_gates.iter().all(|s| {
                        s.alpha
                            .iter()
                            .chain(&s.beta)
                            .all(|x| x.values().iter().all(|&y| y == 0.0))
                            && s.beta_v.iter().chain(&s.kappa).all(|x| x.iter().all(|&y| y == 0.0))
                    });
            assert!(all_zero, "{rule}");
        }
    }

    #[test]
    fn one_step_linear_by_hand() {
        let d = 3;
        let e1 = Vector::basis(d, 0);
        let e2 = Vector::basis(d, 1);
        let inputs = SequenceInputs {
            rule: RuleKind::LinearAttention,
            q: vec![e1.clone()],
            k: vec![e1.clone()],
            v: vec![Vector::from(vec![0.3, -0.2, 0.7])],
            gates: vec![StepGates::none()],
            s0: Matrix::zeros(d, d),
        };
        let g = backward_sequential(&inputs, core::slice::from_ref(&e2), None).unwrap();
        assert_eq!(g.dv[0], e2);
    }

    #[test]
    fn fg2gdn_matches_finite_differences() {
        let mut rng = Rng::new(42);
        let inputs = SequenceInputs::random(RuleKind::Fg2Gdn, 16, 8, 8, &mut rng);
        let report = finite_diff_check(&inputs, &LossSpec::SumOfSquares, 1e-5, 1e-5);
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn every_rule_matches_finite_differences() {
        let mut rng = Rng::new(43);
        for rule in RuleKind::ALL {
            let inputs = SequenceInputs::random(rule, 8, 5, 5, &mut rng);
            let report = finite_diff_check(&inputs, &LossSpec::SumOfSquares, 1e-5, 1e-5);
            assert!(report.passed(), "{}", report.summary());
        }
    }

    #[test]
    fn linear_rule_dv_is_near_exact() {
        let mut rng = Rng::new(44);
        let inputs = SequenceInputs::random(RuleKind::LinearAttention, 6, 4, 4, &mut rng);
        let (_, grads) = loss_gradients(&inputs, &LossSpec::SumOfSquares).unwrap();
        // The loss is quadratic in V, so central differences are exact for any
        // step; a wider step only shrinks roundoff.
        let report = compare_with_finite_differences(&inputs, &LossSpec::SumOfSquares, &grads, 1e-3, 1e-9);
        let v_failures: Vec<_> = report
            .failures
            .iter()
            .filter(|f| f.coordinate.field == Field::V)
            .collect();
        assert!(v_failures.is_empty(), "{v_failures:?}");
    }

    #[test]
    fn corrupted_coordinate_is_flagged() {
        let mut rng = Rng::new(45);
        let inputs = SequenceInputs::random(RuleKind::Kda, 6, 4, 4, &mut rng);
        let (_, mut grads) = loss_gradients(&inputs, &LossSpec::SumOfSquares).unwrap();
        grads.dk[2][1] += 1e-3;
        let report = compare_with_finite_differences(&inputs, &LossSpec::SumOfSquares, &grads, 1e-5, 1e-5);
        assert_eq!(report.failures.len(), 1, "{}", report.summary());
        assert_eq!(
            report.failures[0].coordinate,
            Coordinate {
                field: Field::K,
                step: 2,
                index: 1
            }
        );
    }

    #[test]
    fn cross_entropy_loss_gradients() {
        let mut rng = Rng::new(46);
        let inputs = SequenceInputs::random(RuleKind::Fg2GdnPlus, 6, 4, 4, &mut rng);
        let head = rng.normal_matrix(7, 4, 0.5);
        let targets: Vec<usize> = (0..6).map(|_| rng.below(7)).collect();
        let loss = LossSpec::CrossEntropy {
            head: &head,
            targets: &targets,
        };
        let report = finite_diff_check(&inputs, &loss, 1e-5, 1e-5);
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn softmax_cross_entropy_uniform() {
        let (l, g) = softmax_cross_entropy(&[0.0; 4], 2);
        assert!((l - math::ln(4.0)).abs() < 1e-15);
        assert!((g[2] + 0.75).abs() < 1e-15 && (g[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn loss_difference_matches_values() {
        let mut rng = Rng::new(47);
        let a = run_sequential(&SequenceInputs::random(RuleKind::Fg2Gdn, 9, 4, 4, &mut rng)).unwrap();
        let b = run_sequential(&SequenceInputs::random(RuleKind::Fg2Gdn, 9, 4, 4, &mut rng)).unwrap();
        let head = rng.normal_matrix(5, 4, 1.0);
        let targets = [0, 1, 2, 3, 4, 0, 1, 2, 3];
        for loss in [
            LossSpec::SumOfSquares,
            LossSpec::CrossEntropy {
                head: &head,
                targets: &targets,
            },
        ] {
            let direct = loss.evaluate(&a).unwrap().0 - loss.evaluate(&b).unwrap().0;
            assert!((loss.difference(&a, &b).unwrap() - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            assert_eq!(loss.difference(&a, &a).unwrap(), 0.0);
        }
    }
}
