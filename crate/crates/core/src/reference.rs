//! Dense evaluation of each update rule written literally as
//! `S_t = A_t S_{t−1} + W_t` with explicit `d_k × d_k` transition matrices.
//!
//! Quadratic in `d_k` per step and only meant for cross-checking small
//! instances (e.g. `deltakit verify --sequential-only`).

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{matvec_t, outer, Matrix, Vector};
use crate::rules::{Gate, RuleKind, StepGates};
use crate::scan::{SequenceInputs, SequenceOutputs};

fn diag(v: &[f64]) -> Matrix {
    Matrix::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 })
}

fn missing(rule: RuleKind, field: &'static str) -> Error {
    Error::MissingGate { rule, field }
}

/// Explicit transition matrix and write term for one step.
pub fn dense_transition(rule: RuleKind, k: &[f64], v: &[f64], gates: &StepGates) -> Result<(Matrix, Matrix)> {
    let d = k.len();
    let alpha = || -> Result<Vector> { Ok(gates.alpha.as_ref().ok_or(missing(rule, "alpha"))?.expand(d)) };
    let beta = || gates.beta.as_ref().ok_or(missing(rule, "beta"));
    let kv = outer(k, v);
    let ident = Matrix::identity(d);
    Ok(match rule {
        RuleKind::LinearAttention => (ident, kv),
        RuleKind::RetNet | RuleKind::Mamba2Scalar | RuleKind::Gla | RuleKind::Rwkv6 => (diag(&alpha()?), kv),
        RuleKind::Hgrn2 => {
            let a = alpha()?;
            let write = outer(&a.map(|x| 1.0 - x), v);
            (diag(&a), write)
        }
        RuleKind::DeltaNet | RuleKind::Gdn | RuleKind::Kda => {
            let b = match beta()? {
                Gate::Scalar(b) => *b,
                Gate::Channels(_) => return Err(Error::invalid("scalar beta expected")),
            };
            let decay = match rule {
                RuleKind::DeltaNet => ident.clone(),
                _ => diag(&alpha()?),
            };
            let a = ident.sub(&outer(k, k).scaled(b))?.matmul(&decay)?;
            (a, kv.scaled(b))
        }
        RuleKind::Fg2Gdn | RuleKind::Fg2GdnPlus => {
            let bk = beta()?.expand(d);
            let bv = if rule == RuleKind::Fg2GdnPlus {
                gates.beta_v.clone().ok_or(missing(rule, "beta_v"))?
            } else {
                bk.clone()
            };
            let root_bk = diag(&bk.map(libm::sqrt));
            let root_bv = diag(&bv.map(libm::sqrt));
            // Diag(√βᵏ) k kᵀ Diag(√βᵏ) and Diag(√βᵏ) k vᵀ Diag(√βᵛ)
            let erase = root_bk.matmul(&outer(k, k))?.matmul(&root_bk)?;
            let a = ident.sub(&erase)?.matmul(&diag(&alpha()?))?;
            let write = root_bk.matmul(&kv)?.matmul(&root_bv)?;
            (a, write)
        }
        RuleKind::Rwkv7 => {
            let b = beta()?.expand(d);
            let kappa = gates.kappa.as_ref().ok_or(missing(rule, "kappa"))?;
            let a = diag(&alpha()?).sub(&outer(&b.hadamard(kappa), kappa))?;
            (a, kv)
        }
    })
}

/// Runs a sequence with [`dense_transition`] matrices.
pub fn run_dense(inputs: &SequenceInputs) -> Result<SequenceOutputs> {
    inputs.validate()?;
    let mut s = inputs.s0.clone();
    let mut o = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let (a, w) = dense_transition(inputs.rule, &inputs.k[t], &inputs.v[t], &inputs.gates[t])
            .map_err(|e| Error::at_step(t, e))?;
        s = a.matmul(&s)?.add(&w)?;
        o.push(matvec_t(&s, &inputs.q[t])?);
    }
    Ok(SequenceOutputs { o, s_final: s })
}
