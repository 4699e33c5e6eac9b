//! Wall-time comparison of the sequential scan and the chunkwise kernel.
//! Only ratios between rows are meaningful.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use deltakit_core::chunkwise::{run_chunkwise, KernelStats};
use deltakit_core::scan::run_sequential;
use deltakit_core::{Result, RuleKind};

use crate::verify::instance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    Sequential,
    Chunkwise,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::Sequential => "sequential",
            Path::Chunkwise => "chunkwise",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchGrid {
    pub rules: Vec<RuleKind>,
    pub lengths: Vec<usize>,
    pub chunks: Vec<usize>,
    pub d: usize,
    /// Timed repetitions per cell, at least 5.
    pub reps: usize,
    /// Untimed runs before the first repetition.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            rules: vec![RuleKind::Kda, RuleKind::Fg2Gdn, RuleKind::Fg2GdnPlus],
            lengths: vec![1024, 8192],
            chunks: vec![16, 64],
            d: 64,
            reps: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

/// One cell: a (rule, path, L, C) combination. The sequential path has no
/// chunk size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub rule: RuleKind,
    pub path: Path,
    pub len: usize,
    pub chunk: Option<usize>,
}

impl BenchGrid {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &rule in &self.rules {
            for &len in &self.lengths {
                out.push(Cell {
                    rule,
                    path: Path::Sequential,
                    len,
                    chunk: None,
                });
                if rule.supports_chunkwise() {
                    for &c in self.chunks.iter().filter(|&&c| c <= len) {
                        out.push(Cell {
                            rule,
                            path: Path::Chunkwise,
                            len,
                            chunk: Some(c),
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct Measurement {
    pub rule: RuleKind,
    pub path: Path,
    pub len: usize,
    pub chunk: Option<usize>,
    pub d: usize,
    pub rep: usize,
    pub wall_ns: u64,
    pub wall_ns_median_of_k: u64,
    pub k: usize,
    pub tokens_per_s: f64,
}

pub fn median(xs: &[u64]) -> u64 {
    let mut s = xs.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n == 0 {
        0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2
    }
}

/// Runs one cell once and returns its wall time; chunkwise runs also
/// return kernel counters with `wall_ns` filled in.
pub fn time_once(cell: &Cell, inputs: &deltakit_core::SequenceInputs) -> Result<(u64, Option<KernelStats>)> {
    let start = Instant::now();
    let stats = match cell.path {
        Path::Sequential => {
            black_box(run_sequential(black_box(inputs))?);
            None
        }
        Path::Chunkwise => {
            let (out, stats) = run_chunkwise(black_box(inputs), cell.chunk.unwrap_or(cell.len))?;
            black_box(out);
            Some(stats)
        }
    };
    let ns = start.elapsed().as_nanos() as u64;
    Ok((ns, stats.map(|s| KernelStats { wall_ns: ns, ..s })))
}

/// Measures every cell serially; timings are never taken concurrently.
pub fn run_bench(grid: &BenchGrid, mut progress: impl FnMut(&Cell, u64)) -> Result<Vec<Measurement>> {
    let k = grid.reps.max(5);
    let mut rows = Vec::new();
    for cell in grid.cells() {
        let inputs = instance(cell.rule, cell.len, grid.d, grid.d, grid.seed);
        for _ in 0..grid.warmup {
            time_once(&cell, &inputs)?;
        }
        let times = (0..k)
            .map(|_| time_once(&cell, &inputs).map(|t| t.0))
            .collect::<Result<Vec<_>>>()?;
        let med = median(&times);
        progress(&cell, med);
        for (rep, &wall_ns) in times.iter().enumerate() {
            rows.push(Measurement {
                rule: cell.rule,
                path: cell.path,
                len: cell.len,
                chunk: cell.chunk,
                d: grid.d,
                rep,
                wall_ns,
                wall_ns_median_of_k: med,
                k,
                tokens_per_s: cell.len as f64 / (med.max(1) as f64 * 1e-9),
            });
        }
    }
    Ok(rows)
}

/// Median wall time of the cell matching `(rule, path, len, chunk)`.
pub fn median_of(rows: &[Measurement], rule: RuleKind, path: Path, len: usize, chunk: Option<usize>) -> Option<u64> {
    rows.iter()
        .find(|r| r.rule == rule && r.path == path && r.len == len && r.chunk == chunk)
        .map(|r| r.wall_ns_median_of_k)
}

pub fn write_csv(rows: &[Measurement], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "rule,path,L,C,d,rep,k,wall_ns,wall_ns_median_of_k,tokens_per_s")?;
    for r in rows {
        let chunk = r.chunk.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{:.1}",
            r.rule,
            r.path.name(),
            r.len,
            chunk,
            r.d,
            r.rep,
            r.k,
            r.wall_ns,
            r.wall_ns_median_of_k,
            r.tokens_per_s
        )?;
    }
    Ok(())
}
