//! Command-line surface. Exit codes: 0 success, 1 a check failed, 2 usage
//! or configuration error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use deltakit_core::rules::catalog;
use deltakit_core::train::MqarConfig;
use deltakit_core::RuleKind;

use crate::bench::{self, BenchGrid};
use crate::checkpoint::load_checkpoint;
use crate::compare;
use crate::gradcheck::{self, GradcheckConfig};
use crate::train::{self, Outputs, RunConfig};
use crate::verify::{self, VerifyGrid};

pub const THREADS_ENV: &str = "DELTAKIT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "deltakit",
    version,
    about = "Gated delta-rule recurrences: verification, gradients, benchmarks, training"
)]
pub struct Cli {
    /// Worker threads; overrides DELTAKIT_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunkwise kernel vs. sequential scan over a grid of lengths, chunk sizes and seeds.
    Verify(VerifyArgs),
    /// Analytic gradients vs. central finite differences.
    Gradcheck(GradcheckArgs),
    /// Wall-time medians of the sequential and chunkwise paths.
    Bench(BenchArgs),
    /// Train on associative recall from a JSON run config.
    Train(TrainArgs),
    /// Recall of a checkpoint on freshly generated episodes.
    Eval(EvalArgs),
    /// Final recall of several rules over several seeds on one task.
    Compare(CompareArgs),
    /// The rule catalog.
    Rules(RulesArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Rule to check; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    pub rule: Vec<String>,
    /// Every rule with a chunkwise kernel (every rule with --sequential-only).
    #[arg(long, conflicts_with = "rule")]
    pub all: bool,
    #[arg(long = "L", alias = "len", value_delimiter = ',', default_values_t = [1, 5, 64, 257, 1024])]
    pub lengths: Vec<usize>,
    /// Chunk sizes; 0 means the whole sequence.
    #[arg(long = "C", alias = "chunk", value_delimiter = ',', default_values_t = [1, 3, 16, 64, 0])]
    pub chunks: Vec<usize>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub dk: usize,
    #[arg(long, default_value_t = 16)]
    pub dv: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Compare the sequential scan with dense transition products instead.
    #[arg(long)]
    pub sequential_only: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_delimiter = ',')]
    pub rule: Vec<String>,
    #[arg(long = "L", alias = "len", default_value_t = 12)]
    pub len: usize,
    #[arg(long, default_value_t = 6)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Also check the 2-layer hybrid model end to end.
    #[arg(long)]
    pub model: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub model_tol: f64,
    /// Include the per-coordinate model comparison in the report.
    #[arg(long, requires = "model")]
    pub per_coordinate: bool,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = ["kda".to_string(), "fg2gdn".to_string(), "fg2gdn_plus".to_string()])]
    pub rule: Vec<String>,
    #[arg(long = "L", alias = "len", value_delimiter = ',', default_values_t = [1024, 8192])]
    pub lengths: Vec<usize>,
    #[arg(long = "C", alias = "chunk", value_delimiter = ',', default_values_t = [16, 64])]
    pub chunks: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Timed repetitions per cell (at least 5).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config JSON with `model`, `train` and `task` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the model and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// NDJSON metrics, one record per evaluation.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config whose task section defines the episodes; the smoke task
    /// when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub episodes: usize,
    /// Episode seed; keep it distinct from training seeds.
    #[arg(long, default_value_t = 1_000_003)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run config JSON; its rule and seeds are overridden per run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = ["gdn".to_string(), "kda".to_string(), "fg2gdn".to_string(), "fg2gdn_plus".to_string()])]
    pub rule: Vec<String>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    #[arg(long)]
    pub json: bool,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Check(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn parse_rules(names: &[String]) -> Result<Vec<RuleKind>, Failure> {
    names
        .iter()
        .map(|n| {
            n.parse::<RuleKind>()
                .map_err(|e| Failure::Usage(anyhow::anyhow!("{e}")))
        })
        .collect()
}

fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_run_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let run: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    run.validate()
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(run)
}

fn cmd_verify(a: VerifyArgs) -> Outcome {
    let rules = if a.all {
        RuleKind::ALL
            .iter()
            .copied()
            .filter(|r| a.sequential_only || r.supports_chunkwise())
            .collect()
    } else if a.rule.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("pass --rule <name> or --all")));
    } else {
        parse_rules(&a.rule)?
    };
    if !a.sequential_only {
        if let Some(r) = rules.iter().find(|r| !r.supports_chunkwise()) {
            return Err(Failure::Usage(anyhow::anyhow!(
                "{r}: chunkwise unsupported; use --sequential-only to check it against dense products"
            )));
        }
        if let Some(&c) = a.chunks.iter().find(|&&c| c != 0 && a.lengths.iter().all(|&l| c > l)) {
            return Err(Failure::Usage(anyhow::anyhow!("chunk size {c} exceeds every length")));
        }
    }
    let grid = VerifyGrid {
        rules,
        lengths: a.lengths,
        chunks: a.chunks,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        d_k: a.dk,
        d_v: a.dv,
        tol: a.tol,
        sequential_only: a.sequential_only,
    };
    if grid.rules.iter().any(|r| r.requires_square_state()) && grid.d_k != grid.d_v {
        return Err(Failure::Usage(anyhow::anyhow!("fg2gdn rules need --dk equal to --dv")));
    }
    let rows = verify::run_verify(&grid)?;
    let mut out = sink(a.out.as_deref())?;
    verify::write_csv(&rows, &mut out)?;
    out.flush()?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let worst = rows.iter().map(|r| r.out_diff.max(r.state_diff)).fold(0.0, f64::max);
    eprintln!(
        "{} cells, {} failed, max abs diff {:.3e} (tol {:.0e})",
        rows.len(),
        failed,
        worst,
        grid.tol
    );
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} cells above tolerance")));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let rules = if a.rule.is_empty() {
        RuleKind::ALL.to_vec()
    } else {
        parse_rules(&a.rule)?
    };
    let config = GradcheckConfig {
        rules: rules.clone(),
        len: a.len,
        d: a.d,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        h: a.h,
        tol: a.tol,
    };
    let report = gradcheck::run_gradcheck(&config);
    for run in &report.runs {
        eprintln!(
            "{} seed {}: {}",
            if run.report.passed() { "PASS" } else { "FAIL" },
            run.seed,
            run.report.summary()
        );
    }
    let mut passed = report.passed;
    let mut json = serde_json::to_value(&report)?;
    if a.model {
        let mut checks = Vec::new();
        for &rule in &rules {
            let check = gradcheck::run_model_check(rule, a.seed, 6, a.h, a.model_tol, a.per_coordinate)?;
            eprintln!(
                "{} model {}: directional max rel err {:.3e}",
                if check.passed() { "PASS" } else { "FAIL" },
                rule,
                check.directional.max_rel_error
            );
            passed &= check.passed();
            checks.push(check);
        }
        json["model"] = serde_json::to_value(&checks)?;
        json["passed"] = passed.into();
    }
    let mut out = sink(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &json)?;
    writeln!(out)?;
    out.flush()?;
    if !passed {
        return Err(Failure::Check(format!(
            "gradient check above tolerance (max rel err {:.3e})",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Outcome {
    if a.reps < 5 {
        return Err(Failure::Usage(anyhow::anyhow!("--reps must be at least 5")));
    }
    let grid = BenchGrid {
        rules: parse_rules(&a.rule)?,
        lengths: a.lengths,
        chunks: a.chunks,
        d: a.d,
        reps: a.reps,
        warmup: a.warmup,
        seed: a.seed,
    };
    let rows = bench::run_bench(&grid, |cell, med| {
        let chunk = cell.chunk.map(|c| format!(" C={c}")).unwrap_or_default();
        eprintln!(
            "{} {} L={}{}: median {:.3} ms",
            cell.rule,
            cell.path.name(),
            cell.len,
            chunk,
            med as f64 * 1e-6
        );
    })?;
    let mut out = sink(a.out.as_deref())?;
    bench::write_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let Some(path) = a.config else {
        return Err(Failure::Usage(anyhow::anyhow!(
            "missing --config <run.json>; see configs/ for examples"
        )));
    };
    let mut run = read_run_config(&path)?;
    if let Some(seed) = a.seed {
        run.model.seed = seed;
        run.train.seed = seed;
    }
    let outputs = Outputs {
        metrics: a.metrics,
        checkpoint: a.checkpoint,
        verbose: !a.quiet,
    };
    let outcome = match train::train_loop(&run, &outputs) {
        Ok(o) => o,
        Err(e) if e.is::<train::Diverged>() => return Err(Failure::Check(format!("{e}"))),
        Err(e) => return Err(Failure::Usage(e)),
    };
    let last = outcome.history.last();
    let summary = serde_json::json!({
        "steps": outcome.steps,
        "stop": outcome.stop,
        "recall": last.map(|m| m.recall),
        "eval_loss": last.map(|m| m.eval_loss),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let (model, params) = load_checkpoint(&a.checkpoint)?;
    let task = match &a.config {
        Some(p) => read_run_config(p)?.task,
        None => MqarConfig::new(model.vocab_size, 8, 128, 1)?,
    };
    let mut run = train::smoke_config(0);
    run.model = model;
    run.task = task;
    run.train.eval_episodes = a.episodes;
    run.validate()?;
    let episodes = run.eval_episodes(a.seed)?;
    let stats = train::parallel_evaluate(&params, &run, &episodes)?;
    let summary = serde_json::json!({
        "episodes": a.episodes,
        "queries": stats.total,
        "recall": stats.recall(),
        "loss": stats.loss(),
        "chance": 1.0 / run.task.vocab.values.len() as f64,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Outcome {
    let Some(path) = a.config else {
        return Err(Failure::Usage(anyhow::anyhow!(
            "missing --config <run.json>; see configs/ for examples"
        )));
    };
    let base = read_run_config(&path)?;
    let rules = parse_rules(&a.rule)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let rows = compare::run_compare(&base, &rules, &seeds, |r| {
        eprintln!(
            "{} seed {}: recall {:.4} after {} steps",
            r.rule, r.seed, r.recall, r.steps
        );
    })?;
    let mut out = sink(a.out.as_deref())?;
    compare::write_csv(&rows, &mut out)?;
    out.flush()?;
    for (rule, mean) in compare::mean_recall(&rows) {
        eprintln!("{rule:<12} mean final recall {mean:.4}");
    }
    Ok(())
}

fn cmd_rules(a: RulesArgs) -> Outcome {
    let rows = catalog();
    let mut out = io::stdout().lock();
    if a.json {
        serde_json::to_writer_pretty(&mut out, &rows)?;
        writeln!(out)?;
        return Ok(());
    }
    writeln!(out, "{:<12} {:<16} {:<6} chunkwise", "rule", "transition", "delta")?;
    for r in rows {
        let mark = |b: bool| if b { "yes" } else { "no" };
        writeln!(
            out,
            "{:<12} {:<16} {:<6} {}",
            r.name,
            r.transition,
            mark(r.delta),
            mark(r.chunkwise)
        )?;
    }
    Ok(())
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let from_env = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .with_context(|| format!("{THREADS_ENV}={v} is not a count"))
        })
        .transpose()?;
    if let Some(n) = flag.or(from_env) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> ExitCode {
    let result = init_threads(cli.threads)
        .map_err(Failure::Usage)
        .and_then(|()| match cli.command {
            Command::Verify(a) => cmd_verify(a),
            Command::Gradcheck(a) => cmd_gradcheck(a),
            Command::Bench(a) => cmd_bench(a),
            Command::Train(a) => cmd_train(a),
            Command::Eval(a) => cmd_eval(a),
            Command::Compare(a) => cmd_compare(a),
            Command::Rules(a) => cmd_rules(a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("FAIL: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
