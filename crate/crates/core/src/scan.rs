//! Sequential reference engine: folds [`rules::step`] over a sequence.
//!
//! This is the correctness oracle for the chunkwise kernel and the forward
//! path used for training, so it stays rule-generic and simple.

use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Rng, Vector};
use crate::rules::{self, Gate, RuleKind, StepGates, StepInput};

/// A full sequence for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInputs {
    pub rule: RuleKind,
    pub q: Vec<Vector>,
    pub k: Vec<Vector>,
    pub v: Vec<Vector>,
    pub gates: Vec<StepGates>,
    pub s0: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutputs {
    pub o: Vec<Vector>,
    pub s_final: Matrix,
}

impl SequenceOutputs {
    /// Largest entrywise difference over outputs and final state.
    pub fn max_abs_diff(&self, other: &SequenceOutputs) -> (f64, f64) {
        let out = if self.o.len() != other.o.len() {
            f64::INFINITY
        } else {
            self.o
                .iter()
                .zip(&other.o)
                .fold(0.0f64, |m, (a, b)| m.max(a.max_abs_diff(b)))
        };
        (out, self.s_final.max_abs_diff(&other.s_final))
    }
}

impl SequenceInputs {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn d_k(&self) -> usize {
        self.s0.rows()
    }

    pub fn d_v(&self) -> usize {
        self.s0.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.q.len();
        if len == 0 {
            return Err(Error::invalid("sequence must have at least one step"));
        }
        for (op, n) in [
            ("sequence k", self.k.len()),
            ("sequence v", self.v.len()),
            ("sequence gates", self.gates.len()),
        ] {
            if n != len {
                return Err(Error::DimensionMismatch {
                    op,
                    expected: len,
                    found: n,
                });
            }
        }
        let (d_k, d_v) = self.s0.shape();
        if self.rule.requires_square_state() && d_k != d_v {
            return Err(Error::DimensionMismatch {
                op: "state (rule requires d_k = d_v)",
                expected: d_k,
                found: d_v,
            });
        }
        for t in 0..len {
            let dims = [
                ("q", self.q[t].len(), d_k),
                ("k", self.k[t].len(), d_k),
                ("v", self.v[t].len(), d_v),
            ];
            for (op, found, expected) in dims {
                if found != expected {
                    return Err(Error::at_step(t, Error::DimensionMismatch { op, expected, found }));
                }
            }
            self.gates[t]
                .validate(self.rule, d_k)
                .map_err(|e| Error::at_step(t, e))?;
        }
        Ok(())
    }

    pub fn step_input(&self, t: usize) -> StepInput {
        StepInput {
            q: self.q[t].clone(),
            k: self.k[t].clone(),
            v: self.v[t].clone(),
            gates: self.gates[t].clone(),
        }
    }

    /// Sub-sequence `range` started from state `s0`.
    pub fn slice(&self, range: Range<usize>, s0: Matrix) -> SequenceInputs {
        SequenceInputs {
            rule: self.rule,
            q: self.q[range.clone()].to_vec(),
            k: self.k[range.clone()].to_vec(),
            v: self.v[range.clone()].to_vec(),
            gates: self.gates[range].to_vec(),
            s0,
        }
    }

    /// Random well-conditioned instance: unit keys, standard-normal queries
    /// and values, gates strictly inside `(0, 1)`, and a random initial state.
    pub fn random(rule: RuleKind, len: usize, d_k: usize, d_v: usize, rng: &mut Rng) -> Self {
        let mut q = Vec::with_capacity(len);
        let mut k = Vec::with_capacity(len);
        let mut v = Vec::with_capacity(len);
        let mut gates = Vec::with_capacity(len);
        for _ in 0..len {
            q.push(rng.normal_vector(d_k));
            k.push(numerics::l2_normalize(&rng.normal_vector(d_k), 1e-12));
            v.push(rng.normal_vector(d_v));
            gates.push(random_gates(rule, d_k, rng));
        }
        let s0 = rng.normal_matrix(d_k, d_v, 0.5);
        SequenceInputs {
            rule,
            q,
            k,
            v,
            gates,
            s0,
        }
    }
}

/// Random gates for `rule`: decays in `(0.7, 1)`, learning rates in
/// `(0.05, 0.95)`, RetNet's fixed head-0 decay, a random unit `κ̂`.
pub fn random_gates(rule: RuleKind, d_k: usize, rng: &mut Rng) -> StepGates {
    use crate::rules::Arity;
    let mut g = StepGates::none();
    let draw = |arity: Arity, lo: f64, hi: f64, rng: &mut Rng| match arity {
        Arity::Scalar => Gate::Scalar(rng.uniform(lo, hi)),
        Arity::Channels => Gate::Channels(Vector::from_fn(d_k, |_| rng.uniform(lo, hi))),
    };
    if let Some(arity) = rule.alpha_arity() {
        g.alpha = Some(if rule == RuleKind::RetNet {
            Gate::Scalar(rules::retnet_decay(0))
        } else {
            draw(arity, 0.7, 0.999, rng)
        });
    }
    if let Some(arity) = rule.beta_arity() {
        g.beta = Some(draw(arity, 0.05, 0.95, rng));
    }
    if rule.has_beta_v() {
        g.beta_v = Some(Vector::from_fn(d_k, |_| rng.uniform(0.05, 0.95)));
    }
    if rule.has_kappa() {
        g.kappa = Some(numerics::l2_normalize(&rng.normal_vector(d_k), 1e-12));
    }
    g
}

/// Runs the rule step by step from `s0`. Only the current state is kept.
pub fn run_sequential(inputs: &SequenceInputs) -> Result<SequenceOutputs> {
    inputs.validate()?;
    let mut s = inputs.s0.clone();
    let mut o = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let (next, out) = rules::step(inputs.rule, &s, &inputs.step_input(t)).map_err(|e| Error::at_step(t, e))?;
        s = next;
        o.push(out);
    }
    Ok(SequenceOutputs { o, s_final: s })
}

/// Like [`run_sequential`] but also returns every post-update state
/// `S_1 … S_L` (index `t` holds the state after step `t`).
pub fn run_sequential_with_states(inputs: &SequenceInputs) -> Result<(SequenceOutputs, Vec<Matrix>)> {
    inputs.validate()?;
    let mut states: Vec<Matrix> = Vec::with_capacity(inputs.len());
    let mut o = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let prev = states.last().unwrap_or(&inputs.s0);
        let (next, out) = rules::step(inputs.rule, prev, &inputs.step_input(t)).map_err(|e| Error::at_step(t, e))?;
        states.push(next);
        o.push(out);
    }
    let s_final = states.last().cloned().unwrap_or_else(|| inputs.s0.clone());
    Ok((SequenceOutputs { o, s_final }, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::outer;
    use alloc::vec;

    #[test]
    fn single_step_kda() {
        let d = 4;
        let e1 = Vector::basis(d, 0);
        let e2 = Vector::basis(d, 1);
        let inputs = SequenceInputs {
            rule: RuleKind::Kda,
            q: vec![e1.clone()],
            k: vec![e1.clone()],
            v: vec![e2.clone()],
            gates: vec![StepGates::none()
                .with_alpha(Gate::Channels(Vector::filled(d, 0.9)))
                .with_beta(Gate::Scalar(1.0))],
            s0: Matrix::zeros(d, d),
        };
        let out = run_sequential(&inputs).unwrap();
        assert_eq!(out.o, vec![e2.clone()]);
        assert_eq!(out.s_final, outer(&e1, &e2));
    }

    #[test]
    fn pure_decay_composition() {
        let mut rng = Rng::new(11);
        let d = 3;
        let mut inputs = SequenceInputs::random(RuleKind::Kda, 2, d, d, &mut rng);
        for g in &mut inputs.gates {
            g.beta = Some(Gate::Scalar(0.0));
        }
        let (out, states) = run_sequential_with_states(&inputs).unwrap();
        let a1 = inputs.gates[0].alpha.as_ref().unwrap().expand(d);
        let a2 = inputs.gates[1].alpha.as_ref().unwrap().expand(d);
        let want = numerics::diag_scale(&a2, &numerics::diag_scale(&a1, &inputs.s0).unwrap()).unwrap();
        assert!(states[1].max_abs_diff(&want) < 1e-15);
        assert_eq!(states[1], out.s_final);
    }

    #[test]
    fn states_replay_the_fold() {
        let mut rng = Rng::new(12);
        for rule in RuleKind::ALL {
            let inputs = SequenceInputs::random(rule, 9, 5, 5, &mut rng);
            let plain = run_sequential(&inputs).unwrap();
            let (cached, states) = run_sequential_with_states(&inputs).unwrap();
            assert_eq!(plain, cached);
            assert_eq!(states.last().unwrap(), &plain.s_final);
            let mut s = inputs.s0.clone();
            for (t, st) in states.iter().enumerate() {
                s = rules::step(rule, &s, &inputs.step_input(t)).unwrap().0;
                assert_eq!(&s, st);
            }
        }
    }

    #[test]
    fn errors_carry_timestep() {
        let mut rng = Rng::new(13);
        let mut inputs = SequenceInputs::random(RuleKind::Gdn, 5, 4, 4, &mut rng);
        inputs.gates[3].beta = None;
        match run_sequential(&inputs).unwrap_err() {
            Error::AtStep { t, source } => {
                assert_eq!(t, 3);
                assert!(matches!(*source, Error::MissingGate { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        let empty = inputs.slice(0..0, Matrix::zeros(4, 4));
        assert!(run_sequential(&empty).is_err());
        inputs.gates[3].beta = Some(Gate::Scalar(0.5));
        inputs.v[1] = Vector::zeros(3);
        assert!(matches!(
            run_sequential(&inputs).unwrap_err(),
            Error::AtStep { t: 1, .. }
        ));
    }

    #[test]
    fn fg2gdn_needs_square_state() {
        let mut rng = Rng::new(14);
        let inputs = SequenceInputs::random(RuleKind::Fg2Gdn, 3, 4, 5, &mut rng);
        assert!(run_sequential(&inputs).is_err());
        let ok = SequenceInputs::random(RuleKind::Kda, 3, 4, 5, &mut rng);
        assert!(run_sequential(&ok).is_ok());
    }
}
