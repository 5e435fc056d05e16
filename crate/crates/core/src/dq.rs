//! Dataset quantization: greedy submodular bin formation followed by
//! uniform per-bin sampling.
//!
//! Bins are built one after another from the pool of not-yet-binned patches.
//! Inside a bin, each step adds the pool candidate `x` with the largest gain
//!
//! ```text
//! P(x) = sum_{p in partial bin} |f(p) - f(x)|^2  -  sum_{p in pool \ {x}} |f(p) - f(x)|^2
//! ```
//!
//! and removes it from the pool. Ties go to the lowest patch index. A fixed
//! proportion of every finished bin is then drawn uniformly at random; the
//! coreset is the union of the draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 5;

/// Ordered, disjoint bins covering `0..source_n`. Bin members are stored in
/// the order the greedy pass added them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinPartition {
    pub bins: Vec<Vec<usize>>,
    pub source_n: usize,
}

impl BinPartition {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    /// Check disjointness, coverage, non-emptiness and the +-1 size balance.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("invalid bin partition: {msg}")));
        if self.bins.is_empty() {
            return bad("no bins".into());
        }
        let mut seen = vec![false; self.source_n];
        for (b, bin) in self.bins.iter().enumerate() {
            if bin.is_empty() {
                return bad(format!("bin {b} is empty"));
            }
            for &i in bin {
                if i >= self.source_n {
                    return bad(format!("index {i} out of range"));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return bad(format!("index {i} appears twice"));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return bad(format!("index {missing} is not in any bin"));
        }
        let min = self.bins.iter().map(Vec::len).min().unwrap_or(0);
        let max = self.bins.iter().map(Vec::len).max().unwrap_or(0);
        if max - min > 1 {
            return bad(format!("bin sizes range from {min} to {max}"));
        }
        Ok(())
    }
}

/// A sampled coreset with per-bin provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetSelection {
    pub rate: f64,
    pub seed: u64,
    /// Concatenation of the `per_bin` selections, in bin order.
    pub selected: Vec<usize>,
    /// `(bin index, selected patch indices in ascending order)`.
    pub per_bin: Vec<(usize, Vec<usize>)>,
}

impl CoresetSelection {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Per-bin sample size: `max(1, round_half_up(rate * size))`, capped at `size`.
pub fn quota(bin_size: usize, rate: f64) -> usize {
    if bin_size == 0 {
        return 0;
    }
    // The epsilon absorbs binary representation error in products such as
    // 0.3 * 5 so that exact halves round up.
    let scaled = rate * bin_size as f64;
    let rounded = (scaled + 0.5 + 1e-9).floor() as usize;
    rounded.clamp(1, bin_size)
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rate {rate} is outside (0, 1]")))
    }
}

/// Evaluate the gain of `candidate` directly from its definition.
///
/// `partial_bin` is summed in the order given, `pool` in the order given with
/// `candidate` skipped.
pub fn gain(
    candidate: usize,
    partial_bin: &[usize],
    pool: &[usize],
    m: &EmbeddingMatrix,
) -> Result<f64> {
    for &i in std::iter::once(&candidate).chain(partial_bin).chain(pool) {
        m.check_index(i)?;
    }
    if !pool.contains(&candidate) {
        return Err(Error::InvalidArgument(format!(
            "candidate {candidate} is not in the pool"
        )));
    }
    if let Some(p) = partial_bin.iter().find(|p| pool.contains(p)) {
        return Err(Error::InvalidArgument(format!(
            "patch {p} is in both the partial bin and the pool"
        )));
    }
    let to_bin: f64 = partial_bin.iter().map(|&p| m.sq_dist(p, candidate)).sum();
    let to_pool: f64 = pool
        .iter()
        .filter(|&&p| p != candidate)
        .map(|&p| m.sq_dist(p, candidate))
        .sum();
    Ok(to_bin - to_pool)
}

/// Incremental state for filling one bin from a fixed set of unbinned
/// patches `R`.
///
/// For a candidate `c`, `total[c] = sum_{p in R} d(p, c)` is computed once,
/// and `to_bin[c]` accumulates distances to the partial bin as members are
/// added. Because `R` is the disjoint union of the partial bin and the pool
/// (and `d(c, c) = 0`), the distance to `pool \ {c}` is `total - to_bin`, so
/// each step costs one pass over the pool.
pub struct BinBuilder<'a> {
    m: &'a EmbeddingMatrix,
    /// Unbinned patch indices, ascending.
    remaining: Vec<usize>,
    total: Vec<f64>,
    to_bin: Vec<f64>,
    in_pool: Vec<bool>,
    members: Vec<usize>,
}

impl<'a> BinBuilder<'a> {
    /// `remaining` must be sorted ascending and valid for `m`.
    pub fn new(m: &'a EmbeddingMatrix, remaining: Vec<usize>) -> Self {
        debug_assert!(remaining.windows(2).all(|w| w[0] < w[1]));
        let total = remaining
            .par_iter()
            .map(|&c| remaining.iter().map(|&p| m.sq_dist(p, c)).sum())
            .collect();
        let len = remaining.len();
        BinBuilder {
            m,
            remaining,
            total,
            to_bin: vec![0.0; len],
            in_pool: vec![true; len],
            members: Vec::new(),
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Gain of the pool candidate at position `pos` of `remaining`.
    fn gain_at(&self, pos: usize) -> f64 {
        let to_bin = self.to_bin[pos];
        let to_pool = self.total[pos] - to_bin;
        to_bin - to_pool
    }

    /// Gain of patch `candidate`, or `None` if it is not in the pool.
    pub fn gain(&self, candidate: usize) -> Option<f64> {
        let pos = self.remaining.binary_search(&candidate).ok()?;
        self.in_pool[pos].then(|| self.gain_at(pos))
    }

    /// Highest-gain pool candidate, lowest index on ties.
    pub fn best(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for pos in (0..self.remaining.len()).filter(|&p| self.in_pool[p]) {
            let g = self.gain_at(pos);
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((pos, g));
            }
        }
        best.map(|(pos, _)| self.remaining[pos])
    }

    /// Move `candidate` from the pool into the bin.
    pub fn take(&mut self, candidate: usize) -> Result<()> {
        let pos = self
            .remaining
            .binary_search(&candidate)
            .ok()
            .filter(|&p| self.in_pool[p])
            .ok_or_else(|| {
                Error::InvalidArgument(format!("patch {candidate} is not in the pool"))
            })?;
        self.in_pool[pos] = false;
        self.members.push(candidate);
        let m = self.m;
        let row = m.row(candidate);
        self.to_bin
            .par_iter_mut()
            .zip(self.remaining.par_iter())
            .for_each(|(acc, &c)| *acc += crate::embeddings::sq_dist(row, m.row(c)));
        Ok(())
    }

    pub fn into_members(self) -> Vec<usize> {
        self.members
    }
}

/// Balanced bin sizes: the first `n % n_bins` bins hold one extra patch.
pub fn bin_sizes(n: usize, n_bins: usize) -> Vec<usize> {
    (0..n_bins)
        .map(|b| n / n_bins + usize::from(b < n % n_bins))
        .collect()
}

/// Partition every patch into `n_bins` bins by the greedy gain criterion.
/// Deterministic; no randomness is involved.
pub fn form_bins(m: &EmbeddingMatrix, n_bins: usize) -> Result<BinPartition> {
    let n = m.n();
    if n_bins == 0 || n_bins > n {
        return Err(Error::InvalidArgument(format!(
            "bin count {n_bins} must be between 1 and {n}"
        )));
    }
    let mut unbinned: Vec<usize> = (0..n).collect();
    let mut bins = Vec::with_capacity(n_bins);
    for size in bin_sizes(n, n_bins) {
        let mut builder = BinBuilder::new(m, unbinned.clone());
        for _ in 0..size {
            let next = builder.best().expect("pool holds at least one patch per remaining slot");
            builder.take(next)?;
        }
        let members = builder.into_members();
        let mut taken = vec![false; n];
        for &i in &members {
            taken[i] = true;
        }
        unbinned.retain(|&i| !taken[i]);
        bins.push(members);
    }
    Ok(BinPartition { bins, source_n: n })
}

/// ChaCha20 keyed by `seed` on stream `bin`; draws for one bin do not depend
/// on any other bin.
pub fn bin_rng(seed: u64, bin: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(bin as u64);
    rng
}

/// `k` distinct positions from `0..len` via a partial Fisher-Yates shuffle.
fn draw_positions(rng: &mut ChaCha20Rng, len: usize, k: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.random_range(i..len);
        positions.swap(i, j);
    }
    positions.truncate(k);
    positions
}

fn sample_bins(bins: &[Vec<usize>], rate: f64, seed: u64) -> CoresetSelection {
    let per_bin: Vec<(usize, Vec<usize>)> = bins
        .iter()
        .enumerate()
        .map(|(b, members)| {
            let k = quota(members.len(), rate);
            let mut rng = bin_rng(seed, b);
            let mut chosen: Vec<usize> = draw_positions(&mut rng, members.len(), k)
                .into_iter()
                .map(|pos| members[pos])
                .collect();
            chosen.sort_unstable();
            (b, chosen)
        })
        .collect();
    let selected = per_bin.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    CoresetSelection {
        rate,
        seed,
        selected,
        per_bin,
    }
}

/// Draw `quota(|bin|, rate)` patches uniformly without replacement from each
/// bin. Selections at different rates are drawn independently, so a lower
/// rate's coreset is not necessarily a subset of a higher rate's.
pub fn sample_coreset(p: &BinPartition, rate: f64, seed: u64) -> Result<CoresetSelection> {
    check_rate(rate)?;
    Ok(sample_bins(&p.bins, rate, seed))
}

/// Uniform random subset of `quota(n, rate)` patches, recorded as a single
/// pseudo-bin.
pub fn random_baseline(n: usize, rate: f64, seed: u64) -> Result<CoresetSelection> {
    check_rate(rate)?;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample from zero patches".into()));
    }
    Ok(sample_bins(&[(0..n).collect()], rate, seed))
}

/// A random baseline drawing exactly `count` patches, for count-matched
/// comparisons against a DQ selection.
pub fn random_with_count(n: usize, count: usize, seed: u64) -> Result<CoresetSelection> {
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} of {n} patches"
        )));
    }
    let mut rng = bin_rng(seed, 0);
    let mut selected = draw_positions(&mut rng, n, count);
    selected.sort_unstable();
    Ok(CoresetSelection {
        rate: count as f64 / n as f64,
        seed,
        selected: selected.clone(),
        per_bin: vec![(0, selected)],
    })
}
