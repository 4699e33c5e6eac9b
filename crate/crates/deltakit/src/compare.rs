//! Final recall of several rules over several seeds on one task, as a CSV
//! table. Runs are independent and executed one after another; each run
//! parallelizes over its batch.

use std::io::Write;

use serde::Serialize;

use deltakit_core::RuleKind;

use crate::train::{train_loop, Outputs, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub rule: RuleKind,
    pub seed: u64,
    pub steps: usize,
    pub recall: f64,
    pub eval_loss: f64,
}

/// Trains `base` once per (rule, seed), overriding the rule and both seeds.
/// Early stopping is disabled so every run spends the same budget.
pub fn run_compare(
    base: &RunConfig,
    rules: &[RuleKind],
    seeds: &[u64],
    mut progress: impl FnMut(&CompareRow),
) -> anyhow::Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for &rule in rules {
        for &seed in seeds {
            let mut run = base.clone();
            run.model.rule = rule;
            run.model.seed = seed;
            run.train.seed = seed;
            run.train.target_recall = None;
            let out = train_loop(&run, &Outputs::default())?;
            let last = out.history.last();
            let row = CompareRow {
                rule,
                seed,
                steps: out.steps,
                recall: last.map_or(f64::NAN, |m| m.recall),
                eval_loss: last.map_or(f64::NAN, |m| m.eval_loss),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[CompareRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "rule,seed,steps,final_recall,final_eval_loss")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.4},{:.4}",
            r.rule, r.seed, r.steps, r.recall, r.eval_loss
        )?;
    }
    Ok(())
}

/// Mean final recall per rule, in first-appearance order.
pub fn mean_recall(rows: &[CompareRow]) -> Vec<(RuleKind, f64)> {
    let mut out: Vec<(RuleKind, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(rule, _, _)| *rule == r.rule) {
            Some(e) => {
                e.1 += r.recall;
                e.2 += 1;
            }
            None => out.push((r.rule, r.recall, 1)),
        }
    }
    out.into_iter().map(|(rule, sum, n)| (rule, sum / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use deltakit_core::model::ModelConfig;
    use deltakit_core::train::{MqarConfig, TrainConfig};

    #[test]
    fn one_row_per_rule_and_seed() {
        let mut train = TrainConfig {
            eval_interval: 1,
            eval_episodes: 2,
            ..TrainConfig::default()
        };
        train.schedule.total_steps = 2;
        train.schedule.warmup_steps = 1;
        let base = RunConfig {
            model: ModelConfig {
                vocab_size: 16,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                head_dim: 4,
                ..ModelConfig::default()
            },
            train,
            task: MqarConfig {
                allow_overwrite: true,
                ..MqarConfig::new(16, 3, 20, 2).unwrap()
            },
        };
        let mut seen = 0;
        let rows = run_compare(&base, &[RuleKind::Gdn, RuleKind::Fg2GdnPlus], &[0, 1], |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(
            rows.iter().map(|r| (r.rule, r.seed, r.steps)).collect::<Vec<_>>(),
            vec![
                (RuleKind::Gdn, 0, 2),
                (RuleKind::Gdn, 1, 2),
                (RuleKind::Fg2GdnPlus, 0, 2),
                (RuleKind::Fg2GdnPlus, 1, 2)
            ]
        );
        let means = mean_recall(&rows);
        assert_eq!(means.len(), 2);
        assert!((means[0].1 - (rows[0].recall + rows[1].recall) / 2.0).abs() < 1e-15);
        let mut csv = Vec::new();
        write_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }
}
