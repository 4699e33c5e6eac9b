//! Associative-recall training: episode generation, optimizer, schedule and
//! the per-step pieces of the training loop. The loop itself, with its IO,
//! lives in the std crate.

mod mqar;
mod optim;

pub use mqar::{
    check_episode, gen_mqar, last_binding, recall_accuracy, recall_counts, MqarConfig, MqarEpisode, VocabSplit,
};
pub use optim::{global_norm, AdamW, AdamWConfig, Schedule};

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Parameters, ScanMode};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub schedule: Schedule,
    /// Rescale gradients whose global norm exceeds this.
    pub grad_clip: Option<f64>,
    pub eval_interval: usize,
    /// Held-out episodes per evaluation.
    pub eval_episodes: usize,
    /// Stop once evaluation recall reaches this.
    pub target_recall: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            schedule: Schedule {
                peak_lr: 3e-4,
                final_lr: 3e-5,
                warmup_steps: 100,
                total_steps: 5000,
            },
            grad_clip: Some(1.0),
            eval_interval: 100,
            eval_episodes: 64,
            target_recall: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::invalid("eval_interval and eval_episodes must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Checks that a model can be trained on a task.
pub fn check_compatible(model: &ModelConfig, task: &MqarConfig) -> Result<()> {
    model.validate()?;
    task.validate()?;
    if task.vocab.vocab_size() > model.vocab_size {
        return Err(Error::invalid(alloc::format!(
            "task uses {} token ids, model vocab is {}",
            task.vocab.vocab_size(),
            model.vocab_size
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the episode's queries and its gradient, computed
/// on the prefix that holds every target.
pub fn episode_loss_and_grad(params: &Parameters, config: &ModelConfig, ep: &MqarEpisode) -> Result<(f64, Parameters)> {
    let n = ep.prefix_len();
    let (value, grads, _) = model::loss_and_grad(params, config, &ep.tokens[..n], &ep.targets[..n])?;
    Ok((value, grads))
}

/// Averages per-episode results strictly in the given order, so the sum
/// does not depend on how the episodes were scheduled.
pub fn reduce_in_order(parts: Vec<(f64, Parameters)>) -> Result<(f64, Parameters)> {
    let n = parts.len();
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::invalid("empty batch"))?;
    for (l, g) in iter {
        loss += l;
        grads.add_scaled(1.0, &g)?;
    }
    let scale = 1.0 / n as f64;
    for t in grads.tensors_mut() {
        t.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((loss * scale, grads))
}

/// Serial batch gradient.
pub fn batch_loss_and_grad(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[MqarEpisode],
) -> Result<(f64, Parameters)> {
    let parts = batch
        .iter()
        .map(|ep| episode_loss_and_grad(params, config, ep))
        .collect::<Result<Vec<_>>>()?;
    reduce_in_order(parts)
}

/// Loss and recall counts on one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    /// Sum of per-query cross-entropies.
    pub loss_sum: f64,
    pub correct: usize,
    pub total: usize,
}

impl EvalStats {
    pub fn merge(self, other: EvalStats) -> EvalStats {
        EvalStats {
            loss_sum: self.loss_sum + other.loss_sum,
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }

    pub fn loss(&self) -> f64 {
        self.loss_sum / self.total.max(1) as f64
    }

    pub fn recall(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

pub fn evaluate_episode(
    params: &Parameters,
    config: &ModelConfig,
    ep: &MqarEpisode,
    mode: ScanMode,
) -> Result<EvalStats> {
    let trace = model::forward(params, config, &ep.tokens, mode)?;
    let (mean, _) = model::cross_entropy(&trace.logits, &ep.targets)?;
    let (correct, total) = recall_counts(&trace.logits, &ep.targets)?;
    Ok(EvalStats {
        loss_sum: mean * total as f64,
        correct,
        total,
    })
}

/// Serial evaluation; gold labels are checked against the last-binding scan
/// before use.
pub fn evaluate(
    params: &Parameters,
    config: &ModelConfig,
    task: &MqarConfig,
    episodes: &[MqarEpisode],
) -> Result<EvalStats> {
    let mut stats = EvalStats::default();
    for ep in episodes {
        check_episode(ep, &task.vocab)?;
        stats = stats.merge(evaluate_episode(params, config, ep, ScanMode::Sequential)?);
    }
    if stats.total == 0 {
        return Err(Error::invalid("no target positions"));
    }
    Ok(stats)
}

/// Result of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: Parameters,
    pub optimizer: AdamW,
    pub step: usize,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(params: Parameters, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        let optimizer = AdamW::new(config.optimizer.clone(), sizes);
        Ok(Trainer {
            params,
            optimizer,
            step: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Clips and applies one batch gradient. Non-finite gradients are
    /// rejected before any state changes.
    pub fn apply(&mut self, mut grads: Parameters) -> Result<StepInfo> {
        let norm = global_norm(&grads.tensors().iter().map(|t| t.data).collect::<Vec<_>>());
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        if let Some(clip) = self.config.grad_clip {
            if norm > clip {
                let scale = clip / norm;
                for t in grads.tensors_mut() {
                    t.iter_mut().for_each(|x| *x *= scale);
                }
            }
        }
        let step = self.step + 1;
        let lr = self.config.schedule.lr_at(step);
        let g = grads.tensors();
        let g: Vec<&[f64]> = g.iter().map(|t| t.data).collect();
        self.optimizer.step(&mut self.params.tensors_mut(), &g, lr)?;
        self.step = step;
        Ok(StepInfo {
            step,
            lr,
            grad_norm: norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;
    use crate::numerics::Rng;
    use crate::RuleKind;

    fn setup() -> (ModelConfig, MqarConfig, Parameters) {
        let model = ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            head_dim: 8,
            hybrid_ratio: 0,
            rule: RuleKind::Fg2Gdn,
            mlp_mult: 1,
            seed: 3,
        };
        let task = MqarConfig::new(16, 3, 24, 4).unwrap();
        let params = init_parameters(&model).unwrap();
        (model, task, params)
    }

    #[test]
    fn prefix_loss_equals_full_loss() {
        let (model, task, params) = setup();
        for ep in gen_mqar(&task, &mut Rng::new(1)).unwrap() {
            let full = model::loss(&params, &model, &ep.tokens, &ep.targets).unwrap();
            let (prefix, _) = episode_loss_and_grad(&params, &model, &ep).unwrap();
            assert!((full - prefix).abs() <= 1e-14);
            let stats = evaluate_episode(&params, &model, &ep, ScanMode::Sequential).unwrap();
            assert!((stats.loss() - full).abs() <= 1e-14);
        }
    }

    #[test]
    fn batch_gradient_is_the_mean() {
        let (model, task, params) = setup();
        let batch = gen_mqar(&task, &mut Rng::new(2)).unwrap();
        let (loss, grads) = batch_loss_and_grad(&params, &model, &batch).unwrap();
        let mut want = params.zeros_like();
        let mut want_loss = 0.0;
        for ep in &batch {
            let (l, g) = episode_loss_and_grad(&params, &model, ep).unwrap();
            want_loss += l / 4.0;
            want.add_scaled(0.25, &g).unwrap();
        }
        assert!((loss - want_loss).abs() <= 1e-14);
        for (a, b) in grads.tensors().iter().zip(want.tensors()) {
            assert!(crate::numerics::max_abs_diff(a.data, b.data) <= 1e-15);
        }
        assert!(reduce_in_order(Vec::new()).is_err());
    }

    #[test]
    fn training_steps_are_deterministic_and_reduce_loss() {
        let (model, task, params) = setup();
        let config = TrainConfig {
            schedule: Schedule {
                peak_lr: 1e-2,
                final_lr: 1e-3,
                warmup_steps: 2,
                total_steps: 30,
            },
            ..TrainConfig::default()
        };
        let run = || {
            let mut trainer = Trainer::new(params.clone(), config.clone()).unwrap();
            let mut rng = Rng::new(5);
            let batch = gen_mqar(&task, &mut rng).unwrap();
            let mut losses = Vec::new();
            for _ in 0..30 {
                let (loss, grads) = batch_loss_and_grad(&trainer.params, &model, &batch).unwrap();
                losses.push(loss);
                trainer.apply(grads).unwrap();
            }
            (losses, trainer.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a[29] < 0.5 * a[0], "{} -> {}", a[0], a[29]);
    }

    #[test]
    fn clipping_bounds_the_first_update() {
        let (_, _, params) = setup();
        let mut config = TrainConfig {
            grad_clip: Some(1e-3),
            ..TrainConfig::default()
        };
        config.optimizer.weight_decay = 0.0;
        let mut trainer = Trainer::new(params.clone(), config).unwrap();
        let mut grads = params.zeros_like();
        grads.norm_final.0[0] = 10.0;
        let info = trainer.apply(grads.clone()).unwrap();
        assert_eq!(info.grad_norm, 10.0);
        assert!((trainer.optimizer.m.last().unwrap()[0] - 0.1 * 1e-3).abs() <= 1e-18);
        grads.norm_final.0[1] = f64::NAN;
        let before = trainer.params.clone();
        assert!(trainer.apply(grads).is_err());
        assert_eq!(trainer.params, before);
        assert_eq!(trainer.step, 1);
    }

    #[test]
    fn evaluation_rejects_bad_labels() {
        let (model, task, params) = setup();
        let mut eps = gen_mqar(&task, &mut Rng::new(6)).unwrap();
        assert!(evaluate(&params, &model, &task, &eps).is_ok());
        let pos = eps[0].targets.iter().position(Option::is_some).unwrap();
        eps[0].targets[pos] = Some(eps[0].targets[pos].unwrap() ^ 1);
        assert!(evaluate(&params, &model, &task, &eps).is_err());
    }

    #[test]
    fn compatibility() {
        let (mut model, task, _) = setup();
        assert!(check_compatible(&model, &task).is_ok());
        model.vocab_size = 12;
        assert!(check_compatible(&model, &task).is_err());
    }
}
