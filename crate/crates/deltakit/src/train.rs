//! Training loop: data-parallel gradients over the batch, serial optimizer
//! step, periodic evaluation, metrics and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use deltakit_core::model::{init_parameters, ModelConfig, Parameters, ScanMode};
use deltakit_core::train::{
    check_compatible, check_episode, episode_loss_and_grad, evaluate_episode, gen_mqar, reduce_in_order, EvalStats,
    MqarConfig, MqarEpisode, TrainConfig, Trainer,
};
use deltakit_core::{Error, Rng};

use crate::checkpoint::save_checkpoint;

/// Everything a training run needs; the JSON accepted by `deltakit train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: MqarConfig,
}

impl RunConfig {
    pub fn validate(&self) -> deltakit_core::Result<()> {
        check_compatible(&self.model, &self.task)?;
        self.train.validate()
    }

    /// Held-out evaluation episodes; the data stream never draws from this
    /// seed.
    pub fn eval_episodes(&self, seed: u64) -> deltakit_core::Result<Vec<MqarEpisode>> {
        let mut task = self.task.clone();
        task.batch_size = self.train.eval_episodes;
        gen_mqar(&task, &mut Rng::new(seed).split(2))
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: usize,
    pub lr: f64,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub grad_norm: f64,
    pub eval_loss: f64,
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    TargetRecall,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub history: Vec<Metrics>,
    pub steps: usize,
    pub stop: StopReason,
}

#[derive(Debug, thiserror::Error)]
#[error("non-finite loss or gradient at step {step}; last good checkpoint is from step {last_good:?}")]
pub struct Diverged {
    pub step: usize,
    pub last_good: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Echo each metrics record to stderr.
    pub verbose: bool,
}

/// Parallel over episodes, reduced in episode order: the result is the same
/// for any thread count.
pub fn parallel_batch_grad(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[MqarEpisode],
) -> deltakit_core::Result<(f64, Parameters)> {
    let parts = batch
        .par_iter()
        .map(|ep| episode_loss_and_grad(params, config, ep))
        .collect::<deltakit_core::Result<Vec<_>>>()?;
    reduce_in_order(parts)
}

pub fn parallel_evaluate(
    params: &Parameters,
    run: &RunConfig,
    episodes: &[MqarEpisode],
) -> deltakit_core::Result<EvalStats> {
    let parts = episodes
        .par_iter()
        .map(|ep| {
            check_episode(ep, &run.task.vocab)?;
            evaluate_episode(params, &run.model, ep, ScanMode::Sequential)
        })
        .collect::<deltakit_core::Result<Vec<_>>>()?;
    let stats = parts.into_iter().fold(EvalStats::default(), EvalStats::merge);
    if stats.total == 0 {
        return Err(Error::InvalidArgument("no target positions".into()));
    }
    Ok(stats)
}

pub fn train_loop(run: &RunConfig, out: &Outputs) -> anyhow::Result<TrainOutcome> {
    run.validate().context("invalid run config")?;
    let params = init_parameters(&run.model)?;
    let mut trainer = Trainer::new(params, run.train.clone())?;
    let mut data_rng = Rng::new(run.train.seed).split(1);
    let eval_set = run.eval_episodes(run.train.seed)?;
    let mut metrics = match &out.metrics {
        Some(path) => Some(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => None,
    };
    let total = run.train.schedule.total_steps;
    let mut history = Vec::new();
    let mut last_good = None;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop = StopReason::Completed;

    while trainer.step < total {
        let step = trainer.step + 1;
        let batch = gen_mqar(&run.task, &mut data_rng)?;
        let (loss, grads) = match parallel_batch_grad(&trainer.params, &run.model, &batch) {
            Err(Error::NonFinite { .. }) => return Err(Diverged { step, last_good }.into()),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Diverged { step, last_good }.into());
        }
        let info = match trainer.apply(grads) {
            Err(Error::NonFinite { .. }) => return Err(Diverged { step, last_good }.into()),
            other => other?,
        };
        if !trainer.params.is_finite() {
            return Err(Diverged { step, last_good }.into());
        }
        loss_sum += loss;
        loss_count += 1;

        if step % run.train.eval_interval == 0 || step == total {
            let stats = match parallel_evaluate(&trainer.params, run, &eval_set) {
                Err(Error::NonFinite { .. }) => return Err(Diverged { step, last_good }.into()),
                other => other?,
            };
            let record = Metrics {
                step,
                lr: info.lr,
                train_loss: loss_sum / loss_count as f64,
                grad_norm: info.grad_norm,
                eval_loss: stats.loss(),
                recall: stats.recall(),
            };
            loss_sum = 0.0;
            loss_count = 0;
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            if out.verbose {
                eprintln!(
                    "step {:>5}  lr {:.2e}  loss {:.4}  eval {:.4}  recall {:.4}",
                    record.step, record.lr, record.train_loss, record.eval_loss, record.recall
                );
            }
            if let Some(path) = &out.checkpoint {
                save_checkpoint(path, &trainer.params, &run.model)?;
                last_good = Some(step);
            }
            let reached = matches!(run.train.target_recall, Some(t) if record.recall >= t);
            history.push(record);
            if reached {
                stop = StopReason::TargetRecall;
                break;
            }
        }
    }
    if total == 0 {
        if let Some(path) = &out.checkpoint {
            save_checkpoint(path, &trainer.params, &run.model)?;
        }
    }
    Ok(TrainOutcome {
        steps: trainer.step,
        params: trainer.params,
        history,
        stop,
    })
}

/// Reads an NDJSON metrics file.
pub fn read_metrics(path: &std::path::Path) -> anyhow::Result<Vec<Metrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    if out.is_empty() {
        bail!("{} holds no metrics", path.display());
    }
    Ok(out)
}

/// The smoke configuration: 2 pure linear layers, d_model 64, MQAR with 8
/// pairs at L = 128 over a 64-token vocabulary.
pub fn smoke_config(seed: u64) -> RunConfig {
    let model = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let mut train = TrainConfig {
        seed,
        target_recall: Some(0.95),
        ..TrainConfig::default()
    };
    train.schedule.peak_lr = 3e-3;
    train.schedule.final_lr = 3e-4;
    let task = MqarConfig::new(64, 8, 128, 16).expect("smoke task is valid");
    RunConfig { model, train, task }
}

/// The harder comparison task: the smoke model on 16 pairs with overwrite,
/// trained for the full budget without early stopping.
pub fn overwrite_config(seed: u64) -> RunConfig {
    let mut run = smoke_config(seed);
    run.train.target_recall = None;
    run.task = MqarConfig {
        allow_overwrite: true,
        ..MqarConfig::new(64, 16, 128, 16).expect("overwrite task is valid")
    };
    run
}
