//! Chunkwise-parallel forward kernel for the diagonal-plus-low-rank family.
//!
//! Within a chunk of `C` steps starting from state `S₀`, every transition is
//! `Diag(α_r) + a_r b_rᵀ` with `a_r = −w_r`, `b_r = w_r ⊙ α_r`, so
//!
//! ```text
//! S_r = Diag(α_r) S_{r−1} + w_r ν_rᵀ,   ν_r = u_r − S_{r−1}ᵀ (α_r ⊙ w_r)
//! ```
//!
//! where `w` is the (scaled) key and `u` the (scaled) value. Unrolling with
//! cumulative decays `γ_r = α_1 ⊙ … ⊙ α_r` turns the `ν` recursion into a unit
//! lower-triangular system `(I + M) N = U − (W ⊙ Γ) S₀` with
//! `M_rs = Σ_i w_r,i w_s,i γ_r,i / γ_s,i` (s < r). Its inverse `T` is the UT
//! factor of the WY representation. Outputs and the carried state follow as
//!
//! ```text
//! O   = (Q ⊙ Γ) S₀ + tril(P) N,   P_rs = Σ_i q_r,i w_s,i γ_r,i / γ_s,i
//! S_C = Diag(γ_C) S₀ + Σ_s (w_s ⊙ γ_C / γ_s) ν_sᵀ
//! ```
//!
//! Rules without a delta correction use the same path with `a = b = 0`,
//! which makes `T = I` and `N = U`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{self, axpy, dot, Matrix, Vector};
use crate::rules::{self, RuleKind};
use crate::scan::{SequenceInputs, SequenceOutputs};

pub const DEFAULT_CHUNK: usize = 64;

/// Below this log cumulative decay, `1/γ` is no longer safely representable
/// and pairwise decays are evaluated as `exp(ln γ_r − ln γ_s)` instead.
const MIN_LOG_GAMMA: f64 = -600.0;

/// Inclusive running product of the decay vectors. Row `t` is
/// `α_1 ⊙ … ⊙ α_{t+1}`.
pub fn cumulative_decay(alphas: &[Vector]) -> Result<Matrix> {
    let d = alphas.first().map_or(0, |a| a.len());
    let mut out = Matrix::zeros(alphas.len(), d);
    let mut running = vec![1.0; d];
    for (t, a) in alphas.iter().enumerate() {
        if a.len() != d {
            return Err(Error::at_step(
                t,
                Error::DimensionMismatch {
                    op: "cumulative_decay",
                    expected: d,
                    found: a.len(),
                },
            ));
        }
        for (i, (&x, r)) in a.iter().zip(running.iter_mut()).enumerate() {
            if !(x > 0.0 && x <= 1.0) {
                return Err(Error::at_step(
                    t,
                    Error::GateOutOfRange {
                        field: "alpha",
                        index: i,
                        value: x,
                    },
                ));
            }
            *r *= x;
        }
        out.row_mut(t).copy_from_slice(&running);
    }
    Ok(out)
}

/// `T = (I + M)⁻¹` for strictly lower-triangular `M`, by forward
/// substitution. Entries of `M` on or above the diagonal are ignored.
pub fn ut_transform(m: &Matrix) -> Matrix {
    let c = m.rows().min(m.cols());
    let mut t = Matrix::identity(c);
    // Row r of T: e_r − Σ_{s<r} M_rs T_s (rows of T are supported on 0..=s).
    for r in 1..c {
        let mut row = vec![0.0; c];
        row[r] = 1.0;
        for s in 0..r {
            let coef = m.get(r, s);
            if coef != 0.0 {
                axpy(-coef, &t.row(s)[..=s], &mut row[..=s]);
            }
        }
        t.row_mut(r).copy_from_slice(&row);
    }
    t
}

/// Precomputed per-chunk quantities.
#[derive(Clone, Debug)]
pub struct ChunkPlan {
    /// Position of the first step of the chunk in the sequence.
    pub start: usize,
    pub size: usize,
    /// Whether the rule carries a delta correction (`a`, `b` nonzero).
    pub erase: bool,
    /// Cumulative decays `γ_r` (C × d_k).
    pub gamma: Matrix,
    pub log_gamma: Matrix,
    pub queries: Matrix,
    /// Write keys `k̃` (C × d_k); `1 − α` for HGRN2.
    pub keys: Matrix,
    /// Write values `ṽ` (C × d_v).
    pub values: Matrix,
    /// DPLR factors, rowwise `a_r = −k̃_r` and `b_r = k̃_r ⊙ α_r` (zero for
    /// rules without a delta correction).
    pub a: Matrix,
    pub b: Matrix,
    /// UT factor `(I + M)⁻¹` (C × C, unit lower triangular).
    pub t: Matrix,
    /// `w_r ⊙ γ_r`.
    decayed_keys: Matrix,
    /// `w_r / γ_r`; `None` when the decay range is too wide for it.
    undecayed_keys: Option<Matrix>,
}

struct Resolved {
    alpha: Vector,
    key: Vector,
    value: Vector,
}

fn resolve(rule: RuleKind, inputs: &SequenceInputs, t: usize) -> Result<Resolved> {
    let d_k = inputs.d_k();
    let g = &inputs.gates[t];
    let alpha = match &g.alpha {
        Some(a) => a.expand(d_k),
        None => Vector::filled(d_k, 1.0),
    };
    let (key, value) = match rule {
        RuleKind::Rwkv7 => return Err(Error::ChunkwiseUnsupported(rule)),
        RuleKind::Hgrn2 => (alpha.map(|x| 1.0 - x), inputs.v[t].clone()),
        _ => rules::scale_kv(rule, &inputs.k[t], &inputs.v[t], g)?,
    };
    Ok(Resolved { alpha, key, value })
}

impl ChunkPlan {
    /// Builds the plan for steps `range` of `inputs`.
    pub fn build(inputs: &SequenceInputs, range: Range<usize>) -> Result<ChunkPlan> {
        let rule = inputs.rule;
        if !rule.supports_chunkwise() {
            return Err(Error::ChunkwiseUnsupported(rule));
        }
        let (d_k, d_v) = (inputs.d_k(), inputs.d_v());
        let c = range.len();
        if c == 0 {
            return Err(Error::invalid("empty chunk"));
        }
        let erase = rule.is_delta();

        let mut alphas = Vec::with_capacity(c);
        let mut keys = Matrix::zeros(c, d_k);
        let mut values = Matrix::zeros(c, d_v);
        let mut queries = Matrix::zeros(c, d_k);
        let mut a = Matrix::zeros(c, d_k);
        let mut b = Matrix::zeros(c, d_k);
        for (r, t) in range.clone().enumerate() {
            let res = resolve(rule, inputs, t).map_err(|e| Error::at_step(t, e))?;
            keys.row_mut(r).copy_from_slice(&res.key);
            values.row_mut(r).copy_from_slice(&res.value);
            queries.row_mut(r).copy_from_slice(&inputs.q[t]);
            if erase {
                let (ar, br) = rules::dplr_factors(&res.key, &res.alpha)?;
                a.row_mut(r).copy_from_slice(&ar);
                b.row_mut(r).copy_from_slice(&br);
            }
            alphas.push(res.alpha);
        }
        let gamma = cumulative_decay(&alphas).map_err(|e| match e {
            Error::AtStep { t, source } => Error::AtStep {
                t: t + range.start,
                source,
            },
            other => other,
        })?;

        let mut log_gamma = Matrix::zeros(c, d_k);
        let mut running = vec![0.0; d_k];
        let mut min_log = 0.0f64;
        for (r, alpha) in alphas.iter().enumerate() {
            for (acc, &x) in running.iter_mut().zip(alpha.iter()) {
                *acc += math::ln(x);
                min_log = min_log.min(*acc);
            }
            log_gamma.row_mut(r).copy_from_slice(&running);
        }

        let mut decayed_keys = keys.clone();
        for (x, g) in decayed_keys.data_mut().iter_mut().zip(gamma.data()) {
            *x *= g;
        }
        let undecayed_keys = (min_log >= MIN_LOG_GAMMA).then(|| {
            let mut m = keys.clone();
            for (x, g) in m.data_mut().iter_mut().zip(gamma.data()) {
                *x /= g;
            }
            m
        });

        let mut plan = ChunkPlan {
            start: range.start,
            size: c,
            erase,
            gamma,
            log_gamma,
            queries,
            keys,
            values,
            a,
            b,
            t: Matrix::identity(c),
            decayed_keys,
            undecayed_keys,
        };
        if erase {
            // The erase direction is −a_r = k̃_r.
            let mut gram = Matrix::zeros(c, c);
            for r in 1..c {
                for s in 0..r {
                    let score = plan.decay_weighted(plan.keys.row(r), plan.decayed_keys.row(r), r, s);
                    gram.set(r, s, score);
                }
            }
            plan.t = ut_transform(&gram);
        }
        Ok(plan)
    }

    pub fn d_k(&self) -> usize {
        self.keys.cols()
    }

    pub fn d_v(&self) -> usize {
        self.values.cols()
    }

    /// Whether pairwise decays use the factored `γ_r · (1/γ_s)` form.
    pub fn is_factored(&self) -> bool {
        self.undecayed_keys.is_some()
    }

    /// `Σ_i x_i w_s,i γ_r,i / γ_s,i`, given both `x` and `x ⊙ γ_r`.
    #[inline]
    fn decay_weighted(&self, x: &[f64], x_decayed: &[f64], r: usize, s: usize) -> f64 {
        match &self.undecayed_keys {
            Some(inv) => dot(x_decayed, inv.row(s)),
            None => {
                let (lr, ls) = (self.log_gamma.row(r), self.log_gamma.row(s));
                let w = self.keys.row(s);
                (0..x.len()).map(|i| x[i] * w[i] * math::exp(lr[i] - ls[i])).sum()
            }
        }
    }

    /// Estimated floating-point operations of [`chunk_forward`] on this plan.
    pub fn flops(&self) -> u64 {
        chunk_flops(self.size, self.d_k(), self.d_v(), self.erase)
    }
}

/// Multiply-add count (×2) for one chunk of size `c`.
pub fn chunk_flops(c: usize, d_k: usize, d_v: usize, erase: bool) -> u64 {
    let (c, dk, dv) = (c as u64, d_k as u64, d_v as u64);
    let tri = c * (c.saturating_sub(1)) / 2;
    let mut macs = (tri + c) * dk // intra-chunk scores
        + c * dk * dv // (Q ⊙ Γ) S₀
        + (tri + c) * dv // tril(P) N
        + c * dk * dv + dk * dv; // state carry
    if erase {
        macs += tri * dk // gram
            + c * (c.saturating_sub(1)) * (c.saturating_sub(2)) / 6 // UT solve
            + c * dk * dv // (W ⊙ Γ) S₀
            + tri * dv; // T R
    }
    2 * macs
}

/// Runs one chunk from `s_in`, returning its outputs and the carried state.
pub fn chunk_forward(s_in: &Matrix, plan: &ChunkPlan, rule: RuleKind) -> Result<(Vec<Vector>, Matrix)> {
    if !rule.supports_chunkwise() {
        return Err(Error::ChunkwiseUnsupported(rule));
    }
    let (c, d_k, d_v) = (plan.size, plan.d_k(), plan.d_v());
    if s_in.shape() != (d_k, d_v) {
        return Err(Error::DimensionMismatch {
            op: "chunk_forward state",
            expected: d_k * d_v,
            found: s_in.rows() * s_in.cols(),
        });
    }

    // N: corrected values ν_r.
    let mut n = plan.values.data().to_vec();
    if plan.erase {
        let mut r_mat = vec![0.0; c * d_v];
        numerics::gemm_nn(plan.decayed_keys.data(), s_in.data(), &mut r_mat, c, d_k, d_v);
        for (x, y) in n.iter_mut().zip(&r_mat) {
            *x -= y;
        }
        let rhs = n;
        n = vec![0.0; c * d_v];
        for r in 0..c {
            let out = &mut n[r * d_v..(r + 1) * d_v];
            for (s, &coef) in plan.t.row(r)[..=r].iter().enumerate() {
                if coef != 0.0 {
                    axpy(coef, &rhs[s * d_v..(s + 1) * d_v], out);
                }
            }
        }
    }

    // Inter-chunk read: (Q ⊙ Γ) S₀.
    let mut decayed_q = plan.queries.clone();
    for (x, g) in decayed_q.data_mut().iter_mut().zip(plan.gamma.data()) {
        *x *= g;
    }
    let mut o = vec![0.0; c * d_v];
    numerics::gemm_nn(decayed_q.data(), s_in.data(), &mut o, c, d_k, d_v);

    // Intra-chunk causal term (inclusive: the read happens after the write).
    for r in 0..c {
        let (qr, qr_decayed) = (plan.queries.row(r), decayed_q.row(r));
        let out = &mut o[r * d_v..(r + 1) * d_v];
        for s in 0..=r {
            let score = plan.decay_weighted(qr, qr_decayed, r, s);
            if score != 0.0 {
                axpy(score, &n[s * d_v..(s + 1) * d_v], out);
            }
        }
    }

    // Carried state: Diag(γ_C) S₀ + Σ_s (w_s ⊙ γ_C / γ_s) ν_sᵀ.
    let last = c - 1;
    let gamma_c = plan.gamma.row(last);
    let mut s_out = numerics::diag_scale(gamma_c, s_in)?;
    let mut carried_keys = Matrix::zeros(c, d_k);
    match &plan.undecayed_keys {
        Some(inv) => {
            for s in 0..c {
                for ((x, &w), &g) in carried_keys.row_mut(s).iter_mut().zip(inv.row(s)).zip(gamma_c) {
                    *x = w * g;
                }
            }
        }
        None => {
            let lc = plan.log_gamma.row(last);
            for s in 0..c {
                let (w, ls) = (plan.keys.row(s), plan.log_gamma.row(s));
                for (i, x) in carried_keys.row_mut(s).iter_mut().enumerate() {
                    *x = w[i] * math::exp(lc[i] - ls[i]);
                }
            }
        }
    }
    numerics::gemm_tn(carried_keys.data(), &n, s_out.data_mut(), d_k, c, d_v);

    if !s_out.is_finite() || o.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "chunk_forward" });
    }
    let outputs = o.chunks_exact(d_v).map(Vector::from).collect();
    Ok((outputs, s_out))
}

/// Work counters for one [`run_chunkwise`] call. `wall_ns` is left at zero
/// here; timing is filled in by callers that have a clock.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelStats {
    pub chunks: usize,
    pub chunk_size: usize,
    pub flops_per_chunk: Vec<u64>,
    pub total_flops: u64,
    pub wall_ns: u64,
}

/// Chunkwise forward over the whole sequence with chunk size `chunk`. The
/// final chunk is shorter when `chunk` does not divide the length.
pub fn run_chunkwise(inputs: &SequenceInputs, chunk: usize) -> Result<(SequenceOutputs, KernelStats)> {
    if !inputs.rule.supports_chunkwise() {
        return Err(Error::ChunkwiseUnsupported(inputs.rule));
    }
    inputs.validate()?;
    let len = inputs.len();
    if chunk == 0 || chunk > len {
        return Err(Error::invalid(alloc::format!(
            "chunk size must satisfy 1 <= C <= L (C = {chunk}, L = {len})"
        )));
    }
    let mut stats = KernelStats {
        chunk_size: chunk,
        ..KernelStats::default()
    };
    let mut s = inputs.s0.clone();
    let mut o = Vec::with_capacity(len);
    let mut start = 0;
    while start < len {
        let end = (start + chunk).min(len);
        let plan = ChunkPlan::build(inputs, start..end)?;
        let (out, next) = chunk_forward(&s, &plan, inputs.rule).map_err(|e| Error::at_step(start, e))?;
        let flops = plan.flops();
        stats.flops_per_chunk.push(flops);
        stats.total_flops += flops;
        stats.chunks += 1;
        o.extend(out);
        s = next;
        start = end;
    }
    Ok((SequenceOutputs { o, s_final: s }, stats))
}
