//! Differential testing of the chunkwise kernel against the sequential
//! scan, and of the sequential scan against dense transition products.

use std::io::Write;

use rayon::prelude::*;

use deltakit_core::chunkwise::run_chunkwise;
use deltakit_core::reference::run_dense;
use deltakit_core::scan::run_sequential;
use deltakit_core::{Result, Rng, RuleKind, SequenceInputs};

#[derive(Clone, Debug)]
pub struct VerifyGrid {
    pub rules: Vec<RuleKind>,
    pub lengths: Vec<usize>,
    /// Chunk sizes; 0 stands for "the whole sequence". Sizes above `L` are
    /// skipped and duplicates after clamping are dropped.
    pub chunks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub d_k: usize,
    pub d_v: usize,
    pub tol: f64,
    /// Compare the sequential scan with dense products instead of the
    /// chunkwise kernel.
    pub sequential_only: bool,
}

impl VerifyGrid {
    /// Chunk sizes exercised at length `len`.
    pub fn chunks_for(&self, len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &c in &self.chunks {
            let c = if c == 0 { len } else { c };
            if c <= len && !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct VerifyRow {
    pub rule: RuleKind,
    pub len: usize,
    /// `None` for the dense comparison.
    pub chunk: Option<usize>,
    pub seed: u64,
    pub out_diff: f64,
    pub state_diff: f64,
    pub pass: bool,
}

/// Random instance for one cell, a pure function of its coordinates.
pub fn instance(rule: RuleKind, len: usize, d_k: usize, d_v: usize, seed: u64) -> SequenceInputs {
    let mut rng = Rng::new(seed).split(len as u64);
    SequenceInputs::random(rule, len, d_k, d_v, &mut rng)
}

fn cells(grid: &VerifyGrid, rule: RuleKind, len: usize, seed: u64) -> Result<Vec<VerifyRow>> {
    let inputs = instance(rule, len, grid.d_k, grid.d_v, seed);
    let reference = run_sequential(&inputs)?;
    let row = |chunk, (out_diff, state_diff): (f64, f64)| VerifyRow {
        rule,
        len,
        chunk,
        seed,
        out_diff,
        state_diff,
        pass: out_diff <= grid.tol && state_diff <= grid.tol,
    };
    if grid.sequential_only {
        let dense = run_dense(&inputs)?;
        return Ok(vec![row(None, reference.max_abs_diff(&dense))]);
    }
    grid.chunks_for(len)
        .into_iter()
        .map(|c| {
            let (out, _) = run_chunkwise(&inputs, c)?;
            Ok(row(Some(c), reference.max_abs_diff(&out)))
        })
        .collect()
}

/// Every cell of the grid, in rule, length, seed, chunk order regardless of
/// scheduling.
pub fn run_verify(grid: &VerifyGrid) -> Result<Vec<VerifyRow>> {
    let mut jobs = Vec::new();
    for &rule in &grid.rules {
        for &len in &grid.lengths {
            for &seed in &grid.seeds {
                jobs.push((rule, len, seed));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(rule, len, seed)| cells(grid, rule, len, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_csv(rows: &[VerifyRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "rule,L,C,seed,max_abs_diff_o,max_abs_diff_state,status")?;
    for r in rows {
        let chunk = r.chunk.map(|c| c.to_string()).unwrap_or_default();
        let status = if r.pass { "PASS" } else { "FAIL" };
        writeln!(
            w,
            "{},{},{},{},{:e},{:e},{}",
            r.rule, r.len, chunk, r.seed, r.out_diff, r.state_diff, status
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VerifyGrid {
        VerifyGrid {
            rules: vec![RuleKind::Fg2Gdn, RuleKind::Gla],
            lengths: vec![1, 5, 20],
            chunks: vec![1, 3, 16, 0],
            seeds: vec![0, 1],
            d_k: 4,
            d_v: 4,
            tol: 1e-10,
            sequential_only: false,
        }
    }

    #[test]
    fn chunk_sizes_are_clamped_and_deduplicated() {
        let g = grid();
        assert_eq!(g.chunks_for(1), vec![1]);
        assert_eq!(g.chunks_for(5), vec![1, 3, 5]);
        assert_eq!(g.chunks_for(16), vec![1, 3, 16]);
        assert_eq!(g.chunks_for(20), vec![1, 3, 16, 20]);
    }

    #[test]
    fn small_grid_passes_in_order() {
        let g = grid();
        let rows = run_verify(&g).unwrap();
        assert_eq!(rows.len(), 2 * 2 * (1 + 3 + 4));
        assert!(rows.iter().all(|r| r.pass));
        assert_eq!((rows[0].rule, rows[0].len, rows[0].seed), (RuleKind::Fg2Gdn, 1, 0));
        assert_eq!(rows.last().unwrap().rule, RuleKind::Gla);
        let mut csv = Vec::new();
        write_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(text.lines().nth(1).unwrap().starts_with("fg2gdn,1,1,0,"));
    }

    #[test]
    fn dense_comparison_covers_rwkv7() {
        let mut g = grid();
        g.rules = vec![RuleKind::Rwkv7];
        g.sequential_only = true;
        let rows = run_verify(&g).unwrap();
        assert_eq!(rows.len(), 3 * 2);
        assert!(rows.iter().all(|r| r.pass && r.chunk.is_none()));
        g.sequential_only = false;
        assert!(run_verify(&g).is_err());
    }
}
