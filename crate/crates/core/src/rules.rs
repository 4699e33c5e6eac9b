//! Update-rule registry and single-step transition semantics.
//!
//! Every rule is an instance of `S_t = A_t S_{t−1} + (write)` followed by the
//! read-out `o_t = S_tᵀ q_t` on the *updated* state. The delta-rule family
//! absorbs its learning rate symmetrically into the key and value
//! (`k̃ = √β ⊙ k`, `ṽ = √β ⊙ v`) so the transition stays a generalized
//! Householder reflector composed with a diagonal decay.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{self, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RuleKind {
    #[cfg_attr(feature = "serde", serde(rename = "linear"))]
    LinearAttention,
    #[cfg_attr(feature = "serde", serde(rename = "retnet"))]
    RetNet,
    #[cfg_attr(feature = "serde", serde(rename = "mamba2"))]
    Mamba2Scalar,
    #[cfg_attr(feature = "serde", serde(rename = "gla"))]
    Gla,
    #[cfg_attr(feature = "serde", serde(rename = "rwkv6"))]
    Rwkv6,
    #[cfg_attr(feature = "serde", serde(rename = "hgrn2"))]
    Hgrn2,
    #[cfg_attr(feature = "serde", serde(rename = "deltanet"))]
    DeltaNet,
    #[cfg_attr(feature = "serde", serde(rename = "rwkv7"))]
    Rwkv7,
    #[cfg_attr(feature = "serde", serde(rename = "gdn"))]
    Gdn,
    #[cfg_attr(feature = "serde", serde(rename = "kda"))]
    Kda,
    #[cfg_attr(feature = "serde", serde(rename = "fg2gdn"))]
    Fg2Gdn,
    #[cfg_attr(feature = "serde", serde(rename = "fg2gdn_plus"))]
    Fg2GdnPlus,
}

/// Structure of the transition matrix `A_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    Identity,
    Scalar,
    Diagonal,
    DiagLowRank,
}

impl Transition {
    pub fn label(self) -> &'static str {
        match self {
            Transition::Identity => "identity",
            Transition::Scalar => "scalar",
            Transition::Diagonal => "diagonal",
            Transition::DiagLowRank => "diag.+low-rank",
        }
    }
}

/// Shape of a gate: one value per head, or one per key channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Scalar,
    Channels,
}

impl RuleKind {
    pub const ALL: [RuleKind; 12] = [
        RuleKind::LinearAttention,
        RuleKind::RetNet,
        RuleKind::Mamba2Scalar,
        RuleKind::Gla,
        RuleKind::Rwkv6,
        RuleKind::Hgrn2,
        RuleKind::DeltaNet,
        RuleKind::Rwkv7,
        RuleKind::Gdn,
        RuleKind::Kda,
        RuleKind::Fg2Gdn,
        RuleKind::Fg2GdnPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::LinearAttention => "linear",
            RuleKind::RetNet => "retnet",
            RuleKind::Mamba2Scalar => "mamba2",
            RuleKind::Gla => "gla",
            RuleKind::Rwkv6 => "rwkv6",
            RuleKind::Hgrn2 => "hgrn2",
            RuleKind::DeltaNet => "deltanet",
            RuleKind::Rwkv7 => "rwkv7",
            RuleKind::Gdn => "gdn",
            RuleKind::Kda => "kda",
            RuleKind::Fg2Gdn => "fg2gdn",
            RuleKind::Fg2GdnPlus => "fg2gdn_plus",
        }
    }

    pub fn transition(self) -> Transition {
        match self {
            RuleKind::LinearAttention => Transition::Identity,
            RuleKind::RetNet | RuleKind::Mamba2Scalar => Transition::Scalar,
            RuleKind::Gla | RuleKind::Rwkv6 | RuleKind::Hgrn2 => Transition::Diagonal,
            _ => Transition::DiagLowRank,
        }
    }

    /// Whether the write term carries a delta-rule correction.
    pub fn is_delta(self) -> bool {
        self.transition() == Transition::DiagLowRank
    }

    /// RWKV-7's asymmetric low-rank term has no WY/UT chunkwise form here.
    pub fn supports_chunkwise(self) -> bool {
        self != RuleKind::Rwkv7
    }

    pub fn alpha_arity(self) -> Option<Arity> {
        match self {
            RuleKind::LinearAttention | RuleKind::DeltaNet => None,
            RuleKind::RetNet | RuleKind::Mamba2Scalar | RuleKind::Gdn => Some(Arity::Scalar),
            _ => Some(Arity::Channels),
        }
    }

    /// RetNet's decay is a fixed per-head constant, not a learned gate.
    pub fn alpha_is_learned(self) -> bool {
        self.alpha_arity().is_some() && self != RuleKind::RetNet
    }

    pub fn beta_arity(self) -> Option<Arity> {
        match self {
            RuleKind::DeltaNet | RuleKind::Gdn | RuleKind::Kda => Some(Arity::Scalar),
            RuleKind::Fg2Gdn | RuleKind::Fg2GdnPlus | RuleKind::Rwkv7 => Some(Arity::Channels),
            _ => None,
        }
    }

    pub fn has_beta_v(self) -> bool {
        self == RuleKind::Fg2GdnPlus
    }

    pub fn has_kappa(self) -> bool {
        self == RuleKind::Rwkv7
    }

    /// `d_k = d_v` is needed when a `d_k`-vector gate scales the value.
    pub fn requires_square_state(self) -> bool {
        matches!(self, RuleKind::Fg2Gdn | RuleKind::Fg2GdnPlus)
    }

    pub fn valid_names() -> Vec<&'static str> {
        Self::ALL.iter().map(|r| r.name()).collect()
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleKind::ALL.iter().copied().find(|r| r.name() == s).ok_or_else(|| {
            Error::invalid(alloc::format!(
                "unknown rule `{s}`; valid rules: {}",
                RuleKind::valid_names().join(", ")
            ))
        })
    }
}

/// One row of the rule catalog.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RuleInfo {
    pub name: &'static str,
    pub transition: &'static str,
    pub delta: bool,
    pub chunkwise: bool,
}

pub fn catalog() -> Vec<RuleInfo> {
    RuleKind::ALL
        .iter()
        .map(|&r| RuleInfo {
            name: r.name(),
            transition: r.transition().label(),
            delta: r.is_delta(),
            chunkwise: r.supports_chunkwise(),
        })
        .collect()
}

/// Default fixed RetNet decay for head `h`: `1 − 2^(−5−h)`.
pub fn retnet_decay(head: usize) -> f64 {
    1.0 - libm::pow(2.0, -5.0 - head as f64)
}

/// A gate value: shared across channels, or one entry per key channel.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Gate {
    Scalar(f64),
    Channels(Vector),
}

impl Gate {
    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Gate::Scalar(x) => *x,
            Gate::Channels(v) => v[i],
        }
    }

    pub fn arity(&self) -> Arity {
        match self {
            Gate::Scalar(_) => Arity::Scalar,
            Gate::Channels(_) => Arity::Channels,
        }
    }

    /// Per-channel expansion to length `d`.
    pub fn expand(&self, d: usize) -> Vector {
        match self {
            Gate::Scalar(x) => Vector::filled(d, *x),
            Gate::Channels(v) => v.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Gate::Scalar(x) => core::slice::from_ref(x),
            Gate::Channels(v) => v,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Gate::Scalar(x) => core::slice::from_mut(x),
            Gate::Channels(v) => v,
        }
    }

    pub fn zeros_like(&self) -> Gate {
        match self {
            Gate::Scalar(_) => Gate::Scalar(0.0),
            Gate::Channels(v) => Gate::Channels(Vector::zeros(v.len())),
        }
    }
}

/// Per-timestep gates. Which fields are populated depends on the rule:
///
/// | field    | rules                                                     |
/// |----------|-----------------------------------------------------------|
/// | `alpha`  | scalar: retnet, mamba2, gdn; channels: gla, rwkv6, hgrn2, kda, fg2gdn(+), rwkv7 |
/// | `beta`   | scalar: deltanet, gdn, kda; channels: fg2gdn (β), fg2gdn_plus (βᵏ), rwkv7 (β⃗) |
/// | `beta_v` | fg2gdn_plus (βᵛ)                                          |
/// | `kappa`  | rwkv7 (unit removal key κ̂)                               |
///
/// The same struct doubles as the container for gate gradients in
/// [`crate::grad::SequenceGrads`].
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepGates {
    pub alpha: Option<Gate>,
    pub beta: Option<Gate>,
    pub beta_v: Option<Vector>,
    pub kappa: Option<Vector>,
}

impl StepGates {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_alpha(mut self, alpha: Gate) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_beta(mut self, beta: Gate) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_beta_v(mut self, beta_v: Vector) -> Self {
        self.beta_v = Some(beta_v);
        self
    }

    pub fn with_kappa(mut self, kappa: Vector) -> Self {
        self.kappa = Some(kappa);
        self
    }

    /// Zero-valued gates with the same populated fields and shapes.
    pub fn zeros_like(&self) -> StepGates {
        StepGates {
            alpha: self.alpha.as_ref().map(Gate::zeros_like),
            beta: self.beta.as_ref().map(Gate::zeros_like),
            beta_v: self.beta_v.as_ref().map(|v| Vector::zeros(v.len())),
            kappa: self.kappa.as_ref().map(|v| Vector::zeros(v.len())),
        }
    }

    /// Checks presence, arity, length and range of every field for `rule`.
    /// Gate values are accepted on the closed interval `[0, 1]`; the model
    /// only ever produces the open interval.
    pub fn validate(&self, rule: RuleKind, d_k: usize) -> Result<()> {
        check_gate(rule, "alpha", self.alpha.as_ref(), rule.alpha_arity(), d_k)?;
        check_gate(rule, "beta", self.beta.as_ref(), rule.beta_arity(), d_k)?;
        let beta_v = self.beta_v.clone().map(Gate::Channels);
        let want_bv = rule.has_beta_v().then_some(Arity::Channels);
        check_gate(rule, "beta_v", beta_v.as_ref(), want_bv, d_k)?;
        match (&self.kappa, rule.has_kappa()) {
            (None, true) => return Err(Error::MissingGate { rule, field: "kappa" }),
            (Some(_), false) => return Err(Error::UnexpectedGate { rule, field: "kappa" }),
            (Some(k), true) if k.len() != d_k => {
                return Err(Error::DimensionMismatch {
                    op: "gate kappa",
                    expected: d_k,
                    found: k.len(),
                })
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_gate(rule: RuleKind, field: &'static str, gate: Option<&Gate>, want: Option<Arity>, d_k: usize) -> Result<()> {
    match (gate, want) {
        (None, None) => Ok(()),
        (None, Some(_)) => Err(Error::MissingGate { rule, field }),
        (Some(_), None) => Err(Error::UnexpectedGate { rule, field }),
        (Some(g), Some(arity)) => {
            if g.arity() != arity {
                return Err(Error::GateArity {
                    rule,
                    field,
                    expected: match arity {
                        Arity::Scalar => "a scalar",
                        Arity::Channels => "a per-channel vector",
                    },
                });
            }
            if let Gate::Channels(v) = g {
                if v.len() != d_k {
                    return Err(Error::DimensionMismatch {
                        op: field,
                        expected: d_k,
                        found: v.len(),
                    });
                }
            }
            for (index, &value) in g.values().iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::GateOutOfRange { field, index, value });
                }
            }
            Ok(())
        }
    }
}

/// Inputs of a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub q: Vector,
    pub k: Vector,
    pub v: Vector,
    pub gates: StepGates,
}

fn sqrt_gate(field: &'static str, g: &Gate) -> Result<Gate> {
    Ok(match g {
        Gate::Scalar(x) => {
            if *x < 0.0 {
                return Err(Error::NegativeEntry {
                    op: field,
                    index: 0,
                    value: *x,
                });
            }
            Gate::Scalar(math::sqrt(*x))
        }
        Gate::Channels(v) => Gate::Channels(numerics::elementwise(numerics::Activation::Sqrt, v).map_err(
            |e| match e {
                Error::NegativeEntry { index, value, .. } => Error::NegativeEntry {
                    op: field,
                    index,
                    value,
                },
                other => other,
            },
        )?),
    })
}

fn scale_by(g: &Gate, x: &[f64]) -> Vector {
    Vector::from_fn(x.len(), |i| g.at(i) * x[i])
}

/// Symmetric absorption of the learning rate into key and value:
/// `(√βᵏ ⊙ k, √βᵛ ⊙ v)`. Rules without a delta correction pass `(k, v)`
/// through unchanged.
pub fn scale_kv(rule: RuleKind, k: &[f64], v: &[f64], gates: &StepGates) -> Result<(Vector, Vector)> {
    match rule {
        RuleKind::DeltaNet | RuleKind::Gdn | RuleKind::Kda | RuleKind::Fg2Gdn | RuleKind::Fg2GdnPlus => {
            if rule.requires_square_state() && k.len() != v.len() {
                return Err(Error::DimensionMismatch {
                    op: "scale_kv (d_k must equal d_v)",
                    expected: k.len(),
                    found: v.len(),
                });
            }
            let beta = gates.beta.as_ref().ok_or(Error::MissingGate { rule, field: "beta" })?;
            if let Gate::Channels(b) = beta {
                if b.len() != k.len() {
                    return Err(Error::DimensionMismatch {
                        op: "scale_kv beta",
                        expected: k.len(),
                        found: b.len(),
                    });
                }
            }
            let sk = sqrt_gate("beta", beta)?;
            let sv = if rule == RuleKind::Fg2GdnPlus {
                let bv = gates
                    .beta_v
                    .as_ref()
                    .ok_or(Error::MissingGate { rule, field: "beta_v" })?;
                if bv.len() != v.len() {
                    return Err(Error::DimensionMismatch {
                        op: "scale_kv beta_v",
                        expected: v.len(),
                        found: bv.len(),
                    });
                }
                sqrt_gate("beta_v", &Gate::Channels(bv.clone()))?
            } else {
                sk.clone()
            };
            Ok((scale_by(&sk, k), scale_by(&sv, v)))
        }
        _ => Ok((Vector::from(k), Vector::from(v))),
    }
}

fn require<'a, T>(rule: RuleKind, field: &'static str, x: Option<&'a T>) -> Result<&'a T> {
    x.ok_or(Error::MissingGate { rule, field })
}

/// One state transition followed by the read-out `o = S_nextᵀ q`.
pub fn step(rule: RuleKind, s: &Matrix, input: &StepInput) -> Result<(Matrix, Vector)> {
    let (d_k, d_v) = s.shape();
    for (op, len, want) in [
        ("step q", input.q.len(), d_k),
        ("step k", input.k.len(), d_k),
        ("step v", input.v.len(), d_v),
    ] {
        if len != want {
            return Err(Error::DimensionMismatch {
                op,
                expected: want,
                found: len,
            });
        }
    }
    let g = &input.gates;
    g.validate(rule, d_k)?;
    let (k, v) = (&input.k, &input.v);

    let next = match rule {
        RuleKind::LinearAttention => s.add(&numerics::outer(k, v))?,
        RuleKind::RetNet | RuleKind::Mamba2Scalar => {
            let a = require(rule, "alpha", g.alpha.as_ref())?.at(0);
            s.scaled(a).add(&numerics::outer(k, v))?
        }
        RuleKind::Gla | RuleKind::Rwkv6 => {
            let a = require(rule, "alpha", g.alpha.as_ref())?.expand(d_k);
            numerics::diag_scale(&a, s)?.add(&numerics::outer(k, v))?
        }
        RuleKind::Hgrn2 => {
            let a = require(rule, "alpha", g.alpha.as_ref())?.expand(d_k);
            let complement = a.map(|x| 1.0 - x);
            numerics::diag_scale(&a, s)?.add(&numerics::outer(&complement, v))?
        }
        RuleKind::DeltaNet => {
            let (kt, vt) = scale_kv(rule, k, v, g)?;
            numerics::householder_apply(s, &kt)?.add(&numerics::outer(&kt, &vt))?
        }
        RuleKind::Gdn => {
            let a = require(rule, "alpha", g.alpha.as_ref())?.at(0);
            let (kt, vt) = scale_kv(rule, k, v, g)?;
            numerics::householder_apply(&s.scaled(a), &kt)?.add(&numerics::outer(&kt, &vt))?
        }
        RuleKind::Kda | RuleKind::Fg2Gdn | RuleKind::Fg2GdnPlus => {
            let a = require(rule, "alpha", g.alpha.as_ref())?.expand(d_k);
            let (kt, vt) = scale_kv(rule, k, v, g)?;
            let decayed = numerics::diag_scale(&a, s)?;
            numerics::householder_apply(&decayed, &kt)?.add(&numerics::outer(&kt, &vt))?
        }
        RuleKind::Rwkv7 => {
            let a = require(rule, "alpha", g.alpha.as_ref())?.expand(d_k);
            let b = require(rule, "beta", g.beta.as_ref())?;
            let kappa = require(rule, "kappa", g.kappa.as_ref())?;
            let removal = scale_by(b, kappa);
            let proj = numerics::matvec_t(s, kappa)?;
            numerics::diag_scale(&a, s)?
                .sub(&numerics::outer(&removal, &proj))?
                .add(&numerics::outer(k, v))?
        }
    };
    if !next.is_finite() {
        return Err(Error::NonFinite { op: "step" });
    }
    let o = numerics::matvec_t(&next, &input.q)?;
    Ok((next, o))
}

/// DPLR factors of the delta transition: `a = −k̃`, `b = k̃ ⊙ α`, so that
/// `Diag(α) + a bᵀ = (I − k̃ k̃ᵀ) Diag(α)`.
pub fn dplr_factors(k_scaled: &[f64], alpha: &[f64]) -> Result<(Vector, Vector)> {
    if k_scaled.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            op: "dplr_factors",
            expected: k_scaled.len(),
            found: alpha.len(),
        });
    }
    let a = Vector::from_fn(k_scaled.len(), |i| -k_scaled[i]);
    let b = Vector::from_fn(k_scaled.len(), |i| k_scaled[i] * alpha[i]);
    Ok((a, b))
}

/// Per-coordinate learning-rate matrix `η = √β √βᵀ` (diagnostic only; the
/// recurrence itself is driven by [`scale_kv`]).
pub fn learning_rate_matrix(beta: &[f64]) -> Result<Matrix> {
    let root = numerics::elementwise(numerics::Activation::Sqrt, beta)?;
    Ok(numerics::outer(&root, &root))
}
