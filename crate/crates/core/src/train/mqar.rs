//! Multi-query associative recall episodes.
//!
//! Layout of one episode of length `L`:
//!
//! ```text
//! k₁ v₁ k₂ v₂ … k_P v_P | ▸ k_a ▸ k_b … | pad pad …
//! ```
//!
//! A query is the marker followed by a key; its target sits on the key
//! position and is the value most recently bound to that key. Every other
//! position carries no target.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Partition of the token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VocabSplit {
    pub pad: usize,
    pub marker: usize,
    pub keys: Range<usize>,
    pub values: Range<usize>,
}

impl VocabSplit {
    /// Pad 0, marker 1, then the remaining ids split evenly between keys and
    /// values (the odd one goes to values).
    pub fn standard(vocab_size: usize) -> Result<VocabSplit> {
        if vocab_size < 4 {
            return Err(Error::invalid(format!(
                "vocab_size {vocab_size} leaves no key or value ids"
            )));
        }
        let keys = (vocab_size - 2) / 2;
        Ok(VocabSplit {
            pad: 0,
            marker: 1,
            keys: 2..2 + keys,
            values: 2 + keys..vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        [self.pad + 1, self.marker + 1, self.keys.end, self.values.end]
            .into_iter()
            .max()
            .unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        let overlaps = |a: &Range<usize>, b: &Range<usize>| a.start < b.end && b.start < a.end;
        let single = |x: usize| x..x + 1;
        let ranges = [
            single(self.pad),
            single(self.marker),
            self.keys.clone(),
            self.values.clone(),
        ];
        for (i, a) in ranges.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::invalid("empty key or value alphabet"));
            }
            for b in &ranges[i + 1..] {
                if overlaps(a, b) {
                    return Err(Error::invalid("pad, marker, key and value ids must be disjoint"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MqarConfig {
    pub vocab: VocabSplit,
    /// Binding slots in the first segment. With overwrite some slots rebind
    /// an earlier key.
    pub num_kv_pairs: usize,
    /// Queries in the second segment. Keys are asked in shuffled rounds, so
    /// more queries than distinct keys repeat keys.
    pub num_queries: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub allow_overwrite: bool,
}

impl MqarConfig {
    /// `num_kv_pairs` pairs and as many queries as fit in `seq_len`,
    /// standard split.
    pub fn new(vocab_size: usize, num_kv_pairs: usize, seq_len: usize, batch_size: usize) -> Result<MqarConfig> {
        let config = MqarConfig {
            vocab: VocabSplit::standard(vocab_size)?,
            num_kv_pairs,
            num_queries: seq_len.saturating_sub(2 * num_kv_pairs) / 2,
            seq_len,
            batch_size,
            allow_overwrite: false,
        };
        config.validate()?;
        Ok(config)
    }

    /// Binding slots that rebind an earlier key; zero without overwrite.
    pub fn rebinds(&self) -> usize {
        if self.allow_overwrite {
            (self.num_kv_pairs / 4).max(1)
        } else {
            0
        }
    }

    pub fn distinct_keys(&self) -> usize {
        self.num_kv_pairs - self.rebinds()
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.num_kv_pairs == 0 {
            return Err(Error::invalid("num_kv_pairs must be positive"));
        }
        if self.num_queries == 0 {
            return Err(Error::invalid(format!(
                "no room for queries: seq_len {} holds {} pairs and nothing else",
                self.seq_len, self.num_kv_pairs
            )));
        }
        if self.allow_overwrite && self.num_kv_pairs < 2 {
            return Err(Error::invalid("overwrite needs at least two binding slots"));
        }
        if self.distinct_keys() > self.vocab.keys.len() {
            return Err(Error::invalid(format!(
                "{} distinct keys need a key alphabet of that size, have {}",
                self.distinct_keys(),
                self.vocab.keys.len()
            )));
        }
        if self.allow_overwrite && self.vocab.values.len() < 2 {
            return Err(Error::invalid("overwrite needs at least two value ids"));
        }
        let used = 2 * self.num_kv_pairs + 2 * self.num_queries;
        if used > self.seq_len {
            return Err(Error::invalid(format!(
                "{} pairs and {} queries need {used} positions, seq_len is {}",
                self.num_kv_pairs, self.num_queries, self.seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MqarEpisode {
    pub tokens: Vec<usize>,
    /// Gold value at query positions, `None` elsewhere.
    pub targets: Vec<Option<usize>>,
}

impl MqarEpisode {
    /// Length of the shortest prefix holding every target. By causality the
    /// loss over the full episode equals the loss over this prefix.
    pub fn prefix_len(&self) -> usize {
        self.targets.iter().rposition(Option::is_some).map_or(0, |p| p + 1)
    }

    pub fn num_queries(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn episode(config: &MqarConfig, rng: &mut Rng) -> MqarEpisode {
    let v = &config.vocab;
    let distinct = config.distinct_keys();
    let mut keys: Vec<usize> = v.keys.clone().collect();
    rng.shuffle(&mut keys);
    keys.truncate(distinct);
    let value = |rng: &mut Rng| v.values.start + rng.below(v.values.len());

    let mut bound: Vec<usize> = keys.iter().map(|_| value(rng)).collect();
    let mut slots: Vec<(usize, usize)> = keys.iter().copied().zip(bound.iter().copied()).collect();
    for _ in 0..config.rebinds() {
        let which = rng.below(distinct);
        let mut fresh = value(rng);
        while fresh == bound[which] {
            fresh = value(rng);
        }
        bound[which] = fresh;
        // Somewhere after the key's latest binding.
        let last = slots.iter().rposition(|&(k, _)| k == keys[which]).unwrap_or(0);
        let at = last + 1 + rng.below(slots.len() - last);
        slots.insert(at, (keys[which], fresh));
    }

    let mut tokens = vec![v.pad; config.seq_len];
    let mut targets = vec![None; config.seq_len];
    for (i, &(k, val)) in slots.iter().enumerate() {
        tokens[2 * i] = k;
        tokens[2 * i + 1] = val;
    }
    let mut order: Vec<usize> = Vec::with_capacity(config.num_queries);
    while order.len() < config.num_queries {
        let mut round: Vec<usize> = (0..distinct).collect();
        rng.shuffle(&mut round);
        order.extend(round);
    }
    order.truncate(config.num_queries);
    let base = 2 * slots.len();
    for (j, &which) in order.iter().enumerate() {
        tokens[base + 2 * j] = v.marker;
        tokens[base + 2 * j + 1] = keys[which];
        targets[base + 2 * j + 1] = Some(bound[which]);
    }
    MqarEpisode { tokens, targets }
}

/// One batch, deterministic in the state of `rng`.
pub fn gen_mqar(config: &MqarConfig, rng: &mut Rng) -> Result<Vec<MqarEpisode>> {
    config.validate()?;
    Ok((0..config.batch_size).map(|_| episode(config, rng)).collect())
}

/// Value most recently bound to the key at `pos`, found by scanning the
/// tokens before it for `key value` pairs. Independent of how the episode
/// was generated.
pub fn last_binding(tokens: &[usize], vocab: &VocabSplit, pos: usize) -> Option<usize> {
    let key = *tokens.get(pos)?;
    if !vocab.keys.contains(&key) {
        return None;
    }
    let mut found = None;
    for j in 0..pos.saturating_sub(1) {
        if tokens[j] == key && vocab.values.contains(&tokens[j + 1]) && (j == 0 || tokens[j - 1] != vocab.marker) {
            found = Some(tokens[j + 1]);
        }
    }
    found
}

/// Checks every target against [`last_binding`].
pub fn check_episode(ep: &MqarEpisode, vocab: &VocabSplit) -> Result<()> {
    for (pos, target) in ep.targets.iter().enumerate() {
        if let Some(gold) = *target {
            if last_binding(&ep.tokens, vocab, pos) != Some(gold) {
                return Err(Error::invalid(format!(
                    "target {gold} at position {pos} is not the latest binding"
                )));
            }
        }
    }
    Ok(())
}

/// `(correct, total)` argmax matches at positions with a target.
pub fn recall_counts(logits: &Matrix, targets: &[Option<usize>]) -> Result<(usize, usize)> {
    if logits.rows() != targets.len() {
        return Err(Error::DimensionMismatch {
            op: "recall targets",
            expected: logits.rows(),
            found: targets.len(),
        });
    }
    let mut correct = 0;
    let mut total = 0;
    for (t, target) in targets.iter().enumerate() {
        let Some(gold) = *target else { continue };
        let row = logits.row(t);
        // First maximum wins ties.
        let best = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
            )
            .0;
        total += 1;
        correct += usize::from(best == gold);
    }
    Ok((correct, total))
}

/// Exact-match fraction of argmax predictions at target positions.
pub fn recall_accuracy(logits: &Matrix, targets: &[Option<usize>]) -> Result<f64> {
    let (correct, total) = recall_counts(logits, targets)?;
    if total == 0 {
        return Err(Error::invalid("no target positions"));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(pairs: usize, overwrite: bool) -> MqarConfig {
        let mut c = MqarConfig::new(64, pairs, 128, 32).unwrap();
        c.allow_overwrite = overwrite;
        c
    }

    // Written against the layout only: walk the bindings, remember the
    // latest value per key, read queries off the second segment.
    fn oracle_targets(tokens: &[usize], v: &VocabSplit) -> Vec<Option<usize>> {
        let mut memory = [None; 64];
        let mut out = vec![None; tokens.len()];
        let mut i = 0;
        while i + 1 < tokens.len() && v.keys.contains(&tokens[i]) {
            memory[tokens[i]] = Some(tokens[i + 1]);
            i += 2;
        }
        while i + 1 < tokens.len() && tokens[i] == v.marker {
            out[i + 1] = memory[tokens[i + 1]];
            i += 2;
        }
        assert!(tokens[i..].iter().all(|&t| t == v.pad));
        out
    }

    #[test]
    fn standard_split() {
        let v = VocabSplit::standard(64).unwrap();
        assert_eq!((v.keys.clone(), v.values.clone()), (2..33, 33..64));
        assert_eq!(v.vocab_size(), 64);
        assert!(VocabSplit::standard(3).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let c = config(8, true);
        let a = gen_mqar(&c, &mut Rng::new(1)).unwrap();
        assert_eq!(a, gen_mqar(&c, &mut Rng::new(1)).unwrap());
        assert_ne!(a, gen_mqar(&c, &mut Rng::new(2)).unwrap());
    }

    #[test]
    fn targets_match_scan_oracles() {
        for (pairs, overwrite) in [(1, false), (8, false), (8, true), (16, true), (31, false)] {
            let c = config(pairs, overwrite);
            for ep in gen_mqar(&c, &mut Rng::new(pairs as u64)).unwrap() {
                assert_eq!(ep.tokens.len(), 128);
                assert_eq!(ep.targets, oracle_targets(&ep.tokens, &c.vocab));
                check_episode(&ep, &c.vocab).unwrap();
                assert_eq!(ep.num_queries(), c.num_queries);
                assert_eq!(ep.prefix_len(), 2 * c.num_kv_pairs + 2 * c.num_queries);
            }
        }
    }

    #[test]
    fn overwrite_rebinds_a_key() {
        let c = config(16, true);
        let mut answered_by_rebind = 0;
        for ep in gen_mqar(&c, &mut Rng::new(3)).unwrap() {
            let keys: Vec<usize> = ep.tokens[..32].iter().step_by(2).copied().collect();
            let mut distinct = keys.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert_eq!(keys.len() - distinct.len(), c.rebinds());
            for (p, t) in ep.targets.iter().enumerate() {
                if let Some(gold) = *t {
                    let first = ep.tokens.iter().position(|&x| x == ep.tokens[p]).unwrap();
                    answered_by_rebind += usize::from(ep.tokens[first + 1] != gold);
                }
            }
        }
        assert!(answered_by_rebind > 0);
    }

    #[test]
    fn queries_come_in_rounds_over_all_keys() {
        let c = config(8, true);
        assert_eq!(c.num_queries, 56);
        for ep in gen_mqar(&c, &mut Rng::new(7)).unwrap() {
            let bound: Vec<usize> = ep.tokens[..16].iter().step_by(2).copied().collect();
            let asked: Vec<usize> = ep.tokens[16..].iter().skip(1).step_by(2).copied().collect();
            for round in asked.chunks(c.distinct_keys()) {
                let mut r = round.to_vec();
                r.sort_unstable();
                r.dedup();
                assert_eq!(r.len(), round.len());
                assert!(r.iter().all(|k| bound.contains(k)));
            }
        }
    }

    #[test]
    fn single_pair() {
        let mut c = config(1, false);
        c.num_queries = 1;
        let ep = &gen_mqar(&c, &mut Rng::new(4)).unwrap()[0];
        assert_eq!(ep.num_queries(), 1);
        assert_eq!(ep.tokens[2], c.vocab.marker);
        assert_eq!(ep.tokens[3], ep.tokens[0]);
        assert_eq!(ep.targets[3], Some(ep.tokens[1]));
    }

    #[test]
    fn config_errors() {
        assert!(MqarConfig::new(64, 32, 512, 1).is_err()); // 31 keys only
        assert!(MqarConfig::new(64, 16, 33, 1).is_err());
        assert_eq!(MqarConfig::new(64, 8, 32, 1).unwrap().num_queries, 8);
        let mut c = MqarConfig::new(64, 8, 32, 1).unwrap();
        c.num_queries = 9;
        assert!(c.validate().is_err());
        assert!(MqarConfig::new(64, 0, 32, 1).is_err());
        let mut c = config(8, false);
        c.vocab.values = 30..64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn recall_extremes() {
        let targets = [None, Some(3), None, Some(5)];
        let mut gold = Matrix::zeros(4, 8);
        gold.set(1, 3, 1.0);
        gold.set(3, 5, 1.0);
        assert_eq!(recall_accuracy(&gold, &targets).unwrap(), 1.0);
        let mut wrong = Matrix::zeros(4, 8);
        wrong.set(1, 4, 1.0);
        wrong.set(3, 4, 1.0);
        assert_eq!(recall_accuracy(&wrong, &targets).unwrap(), 0.0);
        assert!(recall_accuracy(&gold, &[None; 4]).is_err());
        assert!(recall_accuracy(&gold, &targets[..3]).is_err());
    }

    #[test]
    fn random_logits_hit_chance() {
        let mut rng = Rng::new(5);
        let n = 10_000;
        let logits = rng.normal_matrix(n, 64, 1.0);
        let targets: Vec<Option<usize>> = (0..n).map(|_| Some(rng.below(64))).collect();
        let acc = recall_accuracy(&logits, &targets).unwrap();
        let p = 1.0 / 64.0;
        let sigma = libm::sqrt(p * (1.0 - p) / n as f64);
        assert!((acc - p).abs() <= 3.0 * sigma, "{acc}");
    }
}
