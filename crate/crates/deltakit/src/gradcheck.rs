//! Finite-difference verification of the analytic gradients, per rule and
//! for the whole model.

use rayon::prelude::*;
use serde::Serialize;

use deltakit_core::grad::{finite_diff_check, FdReport, LossSpec};
use deltakit_core::model::{self, init_parameters, ModelConfig, ModelFdReport};
use deltakit_core::{Result, Rng, RuleKind, SequenceInputs};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub rules: Vec<RuleKind>,
    pub len: usize,
    pub d: usize,
    pub seeds: Vec<u64>,
    pub h: f64,
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            rules: RuleKind::ALL.to_vec(),
            len: 12,
            d: 6,
            seeds: (0..5).collect(),
            h: 1e-5,
            tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RuleRun {
    pub seed: u64,
    pub report: FdReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub tol: f64,
    pub len: usize,
    pub d: usize,
    pub passed: bool,
    pub max_rel_error: f64,
    pub runs: Vec<RuleRun>,
}

/// Scan-level check: `½‖o_t‖²` averaged over steps, every input coordinate.
pub fn run_gradcheck(config: &GradcheckConfig) -> GradcheckReport {
    let jobs: Vec<(RuleKind, u64)> = config
        .rules
        .iter()
        .flat_map(|&r| config.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let runs: Vec<RuleRun> = jobs
        .par_iter()
        .map(|&(rule, seed)| {
            let mut rng = Rng::new(seed);
            let inputs = SequenceInputs::random(rule, config.len, config.d, config.d, &mut rng);
            let report = finite_diff_check(&inputs, &LossSpec::SumOfSquares, config.h, config.tol);
            RuleRun { seed, report }
        })
        .collect();
    let max_rel_error = runs.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    GradcheckReport {
        h: config.h,
        tol: config.tol,
        len: config.len,
        d: config.d,
        passed: runs.iter().all(|r| r.report.passed()),
        max_rel_error,
        runs,
    }
}

/// 2-layer hybrid (one linear, one attention layer), `d_model = 32`.
pub fn model_check_config(rule: RuleKind, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        head_dim: 16,
        hybrid_ratio: 1,
        rule,
        mlp_mult: 2,
        seed,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelCheck {
    pub rule: RuleKind,
    pub seed: u64,
    /// Central differences along random unit directions, several per
    /// tensor. This is the pass criterion.
    pub directional: ModelFdReport,
    /// Every coordinate separately. Entries whose gradient is below the
    /// rounding floor of `h` show large relative errors; reported for
    /// inspection only.
    pub per_coordinate: Option<ModelFdReport>,
}

impl ModelCheck {
    pub fn passed(&self) -> bool {
        self.directional.passed()
    }
}

/// Model-level check on a random next-token sequence of length `len`.
pub fn run_model_check(
    rule: RuleKind,
    seed: u64,
    len: usize,
    h: f64,
    tol: f64,
    per_coordinate: bool,
) -> Result<ModelCheck> {
    let config = model_check_config(rule, seed);
    let params = init_parameters(&config)?;
    let mut rng = Rng::new(seed).split(7);
    let tokens: Vec<usize> = (0..len).map(|_| rng.below(config.vocab_size)).collect();
    let targets: Vec<Option<usize>> = tokens.iter().skip(1).map(|&t| Some(t)).chain([None]).collect();
    let directional = model::directional_check(&params, &config, &tokens, &targets, h, tol, 3, seed)?;
    let per_coordinate = if per_coordinate {
        Some(model::finite_diff_check(&params, &config, &tokens, &targets, h, tol)?)
    } else {
        None
    };
    Ok(ModelCheck {
        rule,
        seed,
        directional,
        per_coordinate,
    })
}
