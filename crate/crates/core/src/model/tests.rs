use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::numerics::{Rng, Vector};
use crate::rules::{Gate, RuleKind};

fn small(rule: RuleKind, hybrid_ratio: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        head_dim: 16,
        hybrid_ratio,
        rule,
        mlp_mult: 2,
        seed: 7,
    }
}

fn random_tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

#[test]
fn model_gradients_match_finite_differences() {
    let config = small(RuleKind::Fg2Gdn, 1);
    let params = init_parameters(&config).unwrap();
    let mut rng = Rng::new(3);
    let tokens = random_tokens(&mut rng, 6, config.vocab_size);
    let targets: Vec<Option<usize>> = tokens.iter().skip(1).map(|&t| Some(t)).chain([None]).collect();
    let report = finite_diff_check(&params, &config, &tokens, &targets, 1e-5, 1e-4).unwrap();
    assert!(report.checked > 20_000);
    // Recomputing a loss near ln 16 costs ~1e-11 per difference at h = 1e-5,
    // so relative error is only meaningful above ~1e-6; below it the
    // absolute error must stay at that rounding level.
    for e in &report.failures {
        assert!(
            e.analytic.abs() < 1e-6 && (e.analytic - e.numeric).abs() <= 1e-9,
            "{e:?}"
        );
    }
}

#[test]
fn directional_gradients_for_every_rule() {
    for rule in RuleKind::ALL {
        let config = small(rule, 1);
        let params = init_parameters(&config).unwrap();
        let mut rng = Rng::new(4);
        let tokens = random_tokens(&mut rng, 5, config.vocab_size);
        let targets: Vec<Option<usize>> = tokens.iter().map(|&t| Some((t + 1) % 16)).collect();
        let report = directional_check(&params, &config, &tokens, &targets, 1e-5, 1e-4, 2, 9).unwrap();
        assert!(report.passed(), "{rule}: {:?}", report.worst);
    }
}

#[test]
fn init_is_deterministic_and_biased() {
    let config = small(RuleKind::Fg2GdnPlus, 0);
    let a = init_parameters(&config).unwrap();
    assert_eq!(a, init_parameters(&config).unwrap());
    let mut other = config.clone();
    other.seed += 1;
    assert_ne!(a, init_parameters(&other).unwrap());
    let Mixer::Linear(m) = &a.layers[0].mixer else { panic!() };
    let alpha = crate::numerics::sigmoid(m.alpha.as_ref().unwrap().b[0]);
    let beta = crate::numerics::sigmoid(m.beta.as_ref().unwrap().b[0]);
    assert!((alpha - 0.95).abs() <= 1e-6 && (beta - 0.5).abs() <= 1e-6);
}

#[test]
fn weight_variance_tracks_fan_in() {
    let config = ModelConfig {
        vocab_size: 4,
        d_model: 1024,
        n_layers: 1,
        n_heads: 1,
        head_dim: 1024,
        hybrid_ratio: 0,
        rule: RuleKind::Gla,
        mlp_mult: 1,
        seed: 1,
    };
    let params = init_parameters(&config).unwrap();
    let Mixer::Linear(m) = &params.layers[0].mixer else {
        panic!()
    };
    let data = m.w_q.data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / data.len() as f64;
    let target = 1.0 / 1024.0;
    assert!((var - target).abs() <= 0.2 * target, "{var}");
}

#[test]
fn gates_at_zero_input_and_in_range() {
    let config = small(RuleKind::Fg2GdnPlus, 0);
    let params = init_parameters(&config).unwrap();
    let Mixer::Linear(m) = &params.layers[0].mixer else {
        panic!()
    };
    let gates = compute_gates(&[0.0; 32], m, &config).unwrap();
    for g in &gates {
        assert!(g
            .alpha
            .as_ref()
            .unwrap()
            .values()
            .iter()
            .all(|&a| (a - 0.95).abs() < 1e-12));
        assert!(g
            .beta
            .as_ref()
            .unwrap()
            .values()
            .iter()
            .all(|&b| (b - 0.5).abs() < 1e-12));
    }
    let mut rng = Rng::new(5);
    let x = rng.normal_vector(32).scaled(3.0);
    let gates = compute_gates(&x, m, &config).unwrap();
    let mut differs = false;
    for g in &gates {
        g.validate(RuleKind::Fg2GdnPlus, 16).unwrap();
        for field in [
            g.alpha.as_ref().unwrap().values(),
            g.beta.as_ref().unwrap().values(),
            g.beta_v.as_ref().unwrap(),
        ] {
            assert!(field.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        differs |= g.beta.as_ref().unwrap().values() != &g.beta_v.as_ref().unwrap()[..];
    }
    assert!(differs);

    let scalar = small(RuleKind::Gdn, 0);
    let params = init_parameters(&scalar).unwrap();
    let Mixer::Linear(m) = &params.layers[0].mixer else {
        panic!()
    };
    let gates = compute_gates(&x, m, &scalar).unwrap();
    assert!(matches!(gates[0].alpha, Some(Gate::Scalar(_))));
    assert!(matches!(gates[1].beta, Some(Gate::Scalar(_))));
}

#[test]
fn hybrid_layout() {
    let mut config = small(RuleKind::Fg2Gdn, 3);
    config.n_layers = 8;
    let attention: Vec<usize> = (0..8)
        .filter(|&i| config.is_attention_layer(i))
        .map(|i| i + 1)
        .collect();
    assert_eq!(attention, vec![4, 8]);
    let params = init_parameters(&config).unwrap();
    for (i, layer) in params.layers.iter().enumerate() {
        assert_eq!(matches!(layer.mixer, Mixer::Attention(_)), i == 3 || i == 7);
    }
    config.hybrid_ratio = 0;
    assert!((0..8).all(|i| !config.is_attention_layer(i)));
}

#[test]
fn logits_shape_and_causality() {
    let mut config = small(RuleKind::Fg2Gdn, 1);
    config.n_layers = 4;
    let params = init_parameters(&config).unwrap();
    let mut rng = Rng::new(6);
    let tokens = random_tokens(&mut rng, 12, 16);
    let base = forward(&params, &config, &tokens, ScanMode::Sequential).unwrap();
    assert_eq!(base.logits.shape(), (12, 16));
    for _ in 0..10 {
        let t = rng.below(12);
        let mut changed = tokens.clone();
        for id in changed.iter_mut().skip(t + 1) {
            *id = rng.below(16);
        }
        let other = forward(&params, &config, &changed, ScanMode::Sequential).unwrap();
        for s in 0..=t {
            assert_eq!(base.logits.row(s), other.logits.row(s));
        }
    }
    assert!(matches!(
        forward(&params, &config, &[3, 16], ScanMode::Sequential),
        Err(crate::Error::TokenOutOfRange { id: 16, vocab: 16 })
    ));
}

#[test]
fn chunkwise_and_sequential_forward_agree() {
    for rule in [RuleKind::Fg2Gdn, RuleKind::Fg2GdnPlus, RuleKind::Gla, RuleKind::RetNet] {
        let config = small(rule, 1);
        let params = init_parameters(&config).unwrap();
        let mut rng = Rng::new(8);
        let tokens = random_tokens(&mut rng, 40, 16);
        let seq = forward(&params, &config, &tokens, ScanMode::Sequential).unwrap();
        for c in [1, 7, 16, 64] {
            let ch = forward(&params, &config, &tokens, ScanMode::Chunkwise(c)).unwrap();
            assert!(seq.logits.max_abs_diff(&ch.logits) <= 1e-8, "{rule} C={c}");
            let (value, dlogits) = cross_entropy(&ch.logits, &vec![Some(0); 40]).unwrap();
            assert!(value.is_finite());
            assert!(backward(&params, &config, &ch, &dlogits).is_err());
        }
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let config = ModelConfig::default();
    let params = init_parameters(&config).unwrap();
    let mut rng = Rng::new(9);
    let tokens = random_tokens(&mut rng, 64, 64);
    let targets: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
    let value = loss(&params, &config, &tokens, &targets).unwrap();
    let uniform = libm::log(64.0);
    assert!((value - uniform).abs() <= 0.1 * uniform, "{value}");
}

#[test]
fn parameter_count_delta_is_one_gate_projection() {
    let base = small(RuleKind::Fg2Gdn, 1);
    let plus = small(RuleKind::Fg2GdnPlus, 1);
    let linear_layers = (0..base.n_layers).filter(|&i| !base.is_attention_layer(i)).count();
    let extra = linear_layers * (base.d_model * base.d_model + base.d_model);
    let count = |c: &ModelConfig| init_parameters(c).unwrap().count();
    assert_eq!(count(&plus), count(&base) + extra);
}

#[test]
fn softmax_attention_cases() {
    let config = small(RuleKind::Kda, 1);
    let params = init_parameters(&config).unwrap();
    let Mixer::Attention(p) = &params.layers[1].mixer else {
        panic!()
    };
    let mut rng = Rng::new(10);

    let x1 = rng.normal_matrix(1, 32, 1.0);
    let (y, _) = attention_forward(&x1, p, &config);
    let expected = project(&project(&x1, &p.w_v), &p.w_o);
    assert!(y.max_abs_diff(&expected) <= 1e-12);

    let x = rng.normal_matrix(9, 32, 1.0);
    let (_, cache) = attention_forward(&x, p, &config);
    for probs in cache.probs() {
        for t in 0..9 {
            let sum: f64 = probs.row(t).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(probs.row(t)[t + 1..].iter().all(|&w| w == 0.0));
        }
    }

    let mut flat = p.clone();
    flat.w_q = crate::Matrix::zeros(32, 32);
    let (_, cache) = attention_forward(&x, &flat, &config);
    for t in 0..9 {
        for s in 0..=t {
            assert!((cache.probs()[0].get(t, s) - 1.0 / (t + 1) as f64).abs() <= 1e-14);
        }
    }
}

#[test]
fn swiglu_cases() {
    let config = small(RuleKind::Kda, 0);
    let params = init_parameters(&config).unwrap();
    let mlp = &params.layers[0].mlp;
    assert!(swiglu_mlp(&[0.0; 32], mlp).unwrap().iter().all(|&y| y == 0.0));
    let mut rng = Rng::new(11);
    let x = rng.normal_vector(32);
    let mut zero_up = mlp.clone();
    zero_up.w_up = crate::Matrix::zeros(64, 32);
    assert!(swiglu_mlp(&x, &zero_up).unwrap().iter().all(|&y| y == 0.0));

    let y = swiglu_mlp(&x, mlp).unwrap();
    let mut hidden = vec![0.0; 64];
    for (j, h) in hidden.iter_mut().enumerate() {
        let a: f64 = (0..32).map(|i| mlp.w_gate.get(j, i) * x[i]).sum();
        let b: f64 = (0..32).map(|i| mlp.w_up.get(j, i) * x[i]).sum();
        *h = a / (1.0 + libm::exp(-a)) * b;
    }
    for (o, &yo) in y.iter().enumerate() {
        let want: f64 = (0..64).map(|j| mlp.w_down.get(o, j) * hidden[j]).sum();
        assert!((yo - want).abs() <= 1e-12);
    }
    let xm = crate::Matrix::from_vec(1, 32, x.0.clone()).unwrap();
    assert!(swiglu_forward(&xm, mlp)
        .0
        .row(0)
        .iter()
        .zip(y.iter())
        .all(|(a, b)| (a - b).abs() <= 1e-13));
}

#[test]
fn single_head_block_is_projection_step_projection() {
    let config = ModelConfig {
        vocab_size: 8,
        d_model: 6,
        n_layers: 1,
        n_heads: 1,
        head_dim: 6,
        hybrid_ratio: 0,
        rule: RuleKind::Fg2Gdn,
        mlp_mult: 1,
        seed: 12,
    };
    let params = init_parameters(&config).unwrap();
    let Mixer::Linear(m) = &params.layers[0].mixer else {
        panic!()
    };
    let mut rng = Rng::new(13);
    let x = rng.normal_vector(6);
    let xm = crate::Matrix::from_vec(1, 6, x.0.clone()).unwrap();
    let (y, _) = linear_attention_forward(&xm, m, &config, ScanMode::Sequential).unwrap();

    let q = crate::numerics::matvec(&m.w_q, &x).unwrap();
    let k = crate::numerics::l2_normalize(&crate::numerics::matvec(&m.w_k, &x).unwrap(), KEY_NORM_EPS);
    let v = crate::numerics::matvec(&m.w_v, &x).unwrap();
    let gates = compute_gates(&x, m, &config).unwrap().remove(0);
    let input = crate::rules::StepInput { q, k, v, gates };
    let (_, o) = crate::rules::step(RuleKind::Fg2Gdn, &crate::Matrix::zeros(6, 6), &input).unwrap();
    let want = crate::numerics::matvec(&m.w_o, &o).unwrap();
    assert!(crate::numerics::max_abs_diff(y.row(0), &want) <= 1e-13);
}

#[test]
fn saturated_beta_matches_unit_beta() {
    let config = small(RuleKind::Fg2Gdn, 0);
    let mut params = init_parameters(&config).unwrap();
    let mut rng = Rng::new(14);
    let x = rng.normal_matrix(20, 32, 1.0);
    let Mixer::Linear(m) = &mut params.layers[0].mixer else {
        panic!()
    };
    let beta = m.beta.as_mut().unwrap();
    beta.w = crate::Matrix::zeros(32, 32);
    beta.b = Vector::filled(32, 20.0);
    let (_, cache) = linear_attention_forward(&x, m, &config, ScanMode::Sequential).unwrap();
    for head in &cache.heads {
        let mut exact = head.inputs.clone();
        for g in &mut exact.gates {
            g.beta = Some(Gate::Channels(Vector::filled(16, 1.0)));
        }
        let a = crate::scan::run_sequential(&head.inputs).unwrap();
        let b = crate::scan::run_sequential(&exact).unwrap();
        let (o, s) = a.max_abs_diff(&b);
        assert!(o <= 1e-6 && s <= 1e-6, "{o} {s}");
    }
}
