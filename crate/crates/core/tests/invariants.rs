use deltakit_core::grad::backward_sequential;
use deltakit_core::numerics::{self, householder_apply, matvec_t, outer, Matrix};
use deltakit_core::rules::{self, scale_kv, step, Gate};
use deltakit_core::scan::{run_sequential, run_sequential_with_states, SequenceInputs};
use deltakit_core::{Rng, RuleKind, StepGates, StepInput, Vector};
use proptest::prelude::*;

fn unit(rng: &mut Rng, d: usize) -> Vector {
    numerics::l2_normalize(&rng.normal_vector(d), 1e-12)
}

fn with_gates(base: &SequenceInputs, rule: RuleKind, f: impl Fn(&StepGates) -> StepGates) -> SequenceInputs {
    SequenceInputs {
        rule,
        gates: base.gates.iter().map(f).collect(),
        ..base.clone()
    }
}

fn max_diff(a: &SequenceInputs, b: &SequenceInputs) -> f64 {
    let (x, y) = (run_sequential(a).unwrap(), run_sequential(b).unwrap());
    let (o, s) = x.max_abs_diff(&y);
    o.max(s)
}

fn scalar(g: &Option<Gate>) -> f64 {
    match g {
        Some(Gate::Scalar(b)) => *b,
        other => panic!("scalar gate expected, got {other:?}"),
    }
}

/// The four sequence-level reductions, 100 instances each at L = 64, d = 16.
#[test]
fn reduction_chain() {
    let mut worst = [0.0f64; 4];
    for seed in 0..100 {
        let mut rng = Rng::new(seed);

        let fg = SequenceInputs::random(RuleKind::Fg2Gdn, 64, 16, 16, &mut rng);
        let plus = with_gates(&fg, RuleKind::Fg2GdnPlus, |g| StepGates {
            beta_v: Some(Vector::from(g.beta.as_ref().unwrap().values())),
            ..g.clone()
        });
        worst[0] = worst[0].max(max_diff(&plus, &fg));

        let kda = SequenceInputs::random(RuleKind::Kda, 64, 16, 16, &mut rng);
        let fg_const = with_gates(&kda, RuleKind::Fg2Gdn, |g| StepGates {
            beta: Some(Gate::Channels(Vector::filled(16, scalar(&g.beta)))),
            ..g.clone()
        });
        worst[1] = worst[1].max(max_diff(&fg_const, &kda));

        let delta = SequenceInputs::random(RuleKind::DeltaNet, 64, 16, 16, &mut rng);
        let kda_one = with_gates(&delta, RuleKind::Kda, |g| StepGates {
            alpha: Some(Gate::Channels(Vector::filled(16, 1.0))),
            ..g.clone()
        });
        worst[2] = worst[2].max(max_diff(&kda_one, &delta));
        let gdn_one = with_gates(&delta, RuleKind::Gdn, |g| StepGates {
            alpha: Some(Gate::Scalar(1.0)),
            ..g.clone()
        });
        worst[3] = worst[3].max(max_diff(&gdn_one, &delta));
    }
    assert!(worst.iter().all(|&w| w <= 1e-13), "{worst:?}");
}

#[test]
fn orthonormal_keys_recall_exactly() {
    let d = 8;
    let mut rng = Rng::new(5);
    let values: Vec<Vector> = (0..4).map(|_| rng.normal_vector(d)).collect();
    let mut inputs = SequenceInputs {
        rule: RuleKind::DeltaNet,
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
        gates: Vec::new(),
        s0: Matrix::zeros(d, d),
    };
    let mut push = |q: Vector, k: Vector, v: Vector, beta: f64| {
        inputs.q.push(q);
        inputs.k.push(k);
        inputs.v.push(v);
        inputs.gates.push(StepGates::none().with_beta(Gate::Scalar(beta)));
    };
    for (i, v) in values.iter().enumerate() {
        push(Vector::zeros(d), Vector::basis(d, i), v.clone(), 1.0);
    }
    // Read-only steps: β = 0 with zero key and value.
    let order = [2, 0, 3, 1, 1, 2];
    for &j in &order {
        push(Vector::basis(d, j), Vector::zeros(d), Vector::zeros(d), 0.0);
    }
    let out = run_sequential(&inputs).unwrap();
    for (t, &j) in order.iter().enumerate() {
        assert!(out.o[4 + t].max_abs_diff(&values[j]) <= 1e-12);
    }
}

#[test]
fn overwrite_answers_with_the_latest_binding() {
    let d = 6;
    let mut rng = Rng::new(6);
    let k = unit(&mut rng, d);
    let (v_old, v_new) = (rng.normal_vector(d), rng.normal_vector(d));
    for rule in [
        RuleKind::DeltaNet,
        RuleKind::Gdn,
        RuleKind::Kda,
        RuleKind::Fg2Gdn,
        RuleKind::Fg2GdnPlus,
    ] {
        let gates = |rule: RuleKind| {
            let mut g = StepGates::none();
            match rule {
                RuleKind::DeltaNet => g.beta = Some(Gate::Scalar(1.0)),
                RuleKind::Gdn => {
                    g.alpha = Some(Gate::Scalar(1.0));
                    g.beta = Some(Gate::Scalar(1.0));
                }
                RuleKind::Kda => {
                    g.alpha = Some(Gate::Channels(Vector::filled(d, 1.0)));
                    g.beta = Some(Gate::Scalar(1.0));
                }
                _ => {
                    g.alpha = Some(Gate::Channels(Vector::filled(d, 1.0)));
                    g.beta = Some(Gate::Channels(Vector::filled(d, 1.0)));
                    if rule == RuleKind::Fg2GdnPlus {
                        g.beta_v = Some(Vector::filled(d, 1.0));
                    }
                }
            }
            g
        };
        let s = outer(&k, &v_old);
        let input = StepInput {
            q: k.clone(),
            k: k.clone(),
            v: v_new.clone(),
            gates: gates(rule),
        };
        let (next, o) = step(rule, &s, &input).unwrap();
        assert!(next.max_abs_diff(&outer(&k, &v_new)) <= 1e-12, "{rule}");
        assert!(o.max_abs_diff(&v_new) <= 1e-12, "{rule}");
    }
}

#[test]
fn rank_one_decomposition_reconstructs() {
    let mut rng = Rng::new(7);
    for _ in 0..200 {
        let s = rng.normal_matrix(8, 5, 1.0);
        let k = rng.normal_vector(8).scaled(rng.uniform(0.0, 1.5));
        let back = householder_apply(&s, &k)
            .unwrap()
            .add(&outer(&k, &matvec_t(&s, &k).unwrap()))
            .unwrap();
        let scale = s.max_abs().max(1e-300);
        assert!(back.max_abs_diff(&s) / scale <= 1e-14 * 8.0);
    }
}

#[test]
fn short_reflectors_contract() {
    let mut rng = Rng::new(8);
    for _ in 0..1000 {
        let s = rng.normal_matrix(8, 8, 1.0);
        let k = unit(&mut rng, 8).scaled(rng.uniform(0.0, 1.0));
        let h = householder_apply(&s, &k).unwrap();
        assert!(h.frobenius_norm() <= s.frobenius_norm() * (1.0 + 1e-14));
    }
}

#[test]
fn rng_streams_are_reproducible() {
    let (mut a, mut b) = (Rng::new(99), Rng::new(99));
    for _ in 0..1_000_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
}

#[test]
fn fg2gdn_beta_gradient_reduces_to_kda() {
    let mut rng = Rng::new(9);
    for _ in 0..10 {
        let kda = SequenceInputs::random(RuleKind::Kda, 12, 6, 6, &mut rng);
        let fg = with_gates(&kda, RuleKind::Fg2Gdn, |g| StepGates {
            beta: Some(Gate::Channels(Vector::filled(6, scalar(&g.beta)))),
            ..g.clone()
        });
        let d_o: Vec<Vector> = (0..12).map(|_| rng.normal_vector(6)).collect();
        let ds = rng.normal_matrix(6, 6, 1.0);
        let gk = backward_sequential(&kda, &d_o, Some(&ds)).unwrap();
        let gf = backward_sequential(&fg, &d_o, Some(&ds)).unwrap();
        for (a, b) in gk.d_gates.iter().zip(&gf.d_gates) {
            let summed: f64 = b.beta.as_ref().unwrap().values().iter().sum();
            assert!((scalar(&a.beta) - summed).abs() <= 1e-10);
        }
        assert!(gk.dq.iter().zip(&gf.dq).all(|(x, y)| x.max_abs_diff(y) <= 1e-12));
    }
}

fn permute(v: &[f64], p: &[usize]) -> Vector {
    Vector::from_fn(p.len(), |i| v[p[i]])
}

fn permute_gate(g: &Option<Gate>, p: &[usize]) -> Option<Gate> {
    g.as_ref().map(|g| match g {
        Gate::Scalar(x) => Gate::Scalar(*x),
        Gate::Channels(v) => Gate::Channels(permute(v, p)),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn state_norm_growth_is_bounded(seed in any::<u64>(), rule_ix in 0usize..12) {
        let rule = RuleKind::ALL[rule_ix];
        let mut rng = Rng::new(seed);
        let inputs = SequenceInputs::random(rule, 40, 6, 6, &mut rng);
        let (_, states) = run_sequential_with_states(&inputs).unwrap();
        let mut prev = inputs.s0.clone();
        for (t, s) in states.iter().enumerate() {
            if rule.is_delta() {
                let (k, v) = scale_kv(rule, &inputs.k[t], &inputs.v[t], &inputs.gates[t]).unwrap();
                prop_assert!(s.frobenius_norm() <= prev.frobenius_norm() + k.norm() * v.norm() + 1e-12);
            }
            prop_assert!(s.is_finite());
            prev = s.clone();
        }
    }

    #[test]
    fn channel_permutation_equivariance(seed in any::<u64>(), rule_ix in 0usize..5) {
        let rule = [RuleKind::DeltaNet, RuleKind::Gdn, RuleKind::Kda, RuleKind::Gla, RuleKind::Rwkv6][rule_ix];
        let mut rng = Rng::new(seed);
        let d = 6;
        let mut p: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut p);
        let s = rng.normal_matrix(d, 4, 1.0);
        let input = StepInput {
            q: rng.normal_vector(d),
            k: unit(&mut rng, d),
            v: rng.normal_vector(4),
            gates: deltakit_core::scan::random_gates(rule, d, &mut rng),
        };
        let ps = Matrix::from_fn(d, 4, |i, j| s.get(p[i], j));
        let pinput = StepInput {
            q: permute(&input.q, &p),
            k: permute(&input.k, &p),
            v: input.v.clone(),
            gates: StepGates {
                alpha: permute_gate(&input.gates.alpha, &p),
                beta: permute_gate(&input.gates.beta, &p),
                ..input.gates.clone()
            },
        };
        let (next, o) = step(rule, &s, &input).unwrap();
        let (pnext, po) = step(rule, &ps, &pinput).unwrap();
        prop_assert!(o.max_abs_diff(&po) <= 1e-13);
        let expect = Matrix::from_fn(d, 4, |i, j| next.get(p[i], j));
        prop_assert!(pnext.max_abs_diff(&expect) <= 1e-13);
    }

    #[test]
    fn prefix_consistency(seed in any::<u64>(), rule_ix in 0usize..12, split in 1usize..30) {
        let rule = RuleKind::ALL[rule_ix];
        let mut rng = Rng::new(seed);
        let inputs = SequenceInputs::random(rule, 30, 5, 5, &mut rng);
        let whole = run_sequential(&inputs).unwrap();
        let head = run_sequential(&inputs.slice(0..split, inputs.s0.clone())).unwrap();
        let tail = run_sequential(&inputs.slice(split..30, head.s_final.clone())).unwrap();
        prop_assert!(tail.s_final.max_abs_diff(&whole.s_final) <= 1e-14 * whole.s_final.max_abs().max(1.0));
        for (t, o) in head.o.iter().chain(&tail.o).enumerate() {
            prop_assert!(o.max_abs_diff(&whole.o[t]) <= 1e-14 * whole.o[t].norm().max(1.0));
        }
    }

    #[test]
    fn outputs_are_causal(seed in any::<u64>(), rule_ix in 0usize..12, cut in 0usize..19) {
        let rule = RuleKind::ALL[rule_ix];
        let mut rng = Rng::new(seed);
        let inputs = SequenceInputs::random(rule, 20, 4, 4, &mut rng);
        let mut changed = inputs.clone();
        let noise = SequenceInputs::random(rule, 20, 4, 4, &mut rng);
        for t in cut + 1..20 {
            changed.q[t] = noise.q[t].clone();
            changed.k[t] = noise.k[t].clone();
            changed.v[t] = noise.v[t].clone();
            changed.gates[t] = noise.gates[t].clone();
        }
        let (a, b) = (run_sequential(&inputs).unwrap(), run_sequential(&changed).unwrap());
        for t in 0..=cut {
            prop_assert_eq!(&a.o[t], &b.o[t]);
        }
    }

    #[test]
    fn dv_is_independent_of_v_for_additive_rules(seed in any::<u64>(), rule_ix in 0usize..3) {
        let rule = [RuleKind::LinearAttention, RuleKind::Gla, RuleKind::Hgrn2][rule_ix];
        let mut rng = Rng::new(seed);
        let a = SequenceInputs::random(rule, 10, 4, 4, &mut rng);
        let mut b = a.clone();
        b.v = (0..10).map(|_| rng.normal_vector(4)).collect();
        let d_o: Vec<Vector> = (0..10).map(|_| rng.normal_vector(4)).collect();
        let (ga, gb) = (backward_sequential(&a, &d_o, None).unwrap(), backward_sequential(&b, &d_o, None).unwrap());
        for (x, y) in ga.dv.iter().zip(&gb.dv) {
            prop_assert!(x.max_abs_diff(y) <= 1e-12);
        }
    }

    #[test]
    fn learning_rate_matrix_is_rank_one(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let beta = Vector::from_fn(7, |_| rng.uniform(0.0, 1.0));
        let eta = rules::learning_rate_matrix(&beta).unwrap();
        prop_assert!(eta.max_abs_diff(&eta.transpose()) == 0.0);
        let trace: f64 = (0..7).map(|i| eta.get(i, i)).sum();
        let lhs = eta.transpose().matmul(&eta).unwrap();
        prop_assert!(lhs.max_abs_diff(&eta.scaled(trace)) <= 1e-12);
    }
}
