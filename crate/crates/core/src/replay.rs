//! Replay mixtures: a fraction of the source domain, chosen by DQ, added to
//! the full target-domain training set. The mix is a flat union; ordering
//! and shuffling are left to the trainer.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::listing::CoresetFile;

/// Which source patches to replay.
#[derive(Debug, Clone)]
pub enum ReplaySource {
    /// Rate 0: target only.
    None,
    /// A coreset drawn at some rate.
    Coreset(CoresetFile),
    /// Every source patch (rate 1 without going through a coreset).
    Full(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: crate::listing::SelectionMethod,
    pub rate: f64,
    pub seed: u64,
    pub n_bins: usize,
}

/// `mix.json`. `patches` is the training listing: source patches followed
/// by target patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMix {
    pub source_rate: f64,
    pub source_count: usize,
    pub target_count: usize,
    pub provenance: Option<Provenance>,
    pub source_patches: Vec<String>,
    pub target_patches: Vec<String>,
    pub patches: Vec<String>,
}

impl ReplayMix {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn check_no_duplicates(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    match ids.iter().find(|id| !seen.insert(id.as_str())) {
        Some(dup) => Err(Error::InvalidArgument(format!("duplicate {what} patch `{dup}`"))),
        None => Ok(()),
    }
}

pub fn compose_replay(source: &ReplaySource, target: &[String]) -> Result<ReplayMix> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("target patch list is empty".into()));
    }
    check_no_duplicates(target, "target")?;
    let (source_rate, provenance, source_patches) = match source {
        ReplaySource::None => (0.0, None, Vec::new()),
        ReplaySource::Coreset(c) => (
            c.rate,
            Some(Provenance {
                method: c.method,
                rate: c.rate,
                seed: c.seed,
                n_bins: c.n_bins,
            }),
            c.selection.clone(),
        ),
        ReplaySource::Full(ids) => (1.0, None, ids.clone()),
    };
    check_no_duplicates(&source_patches, "source")?;

    let target_set: HashSet<&str> = target.iter().map(String::as_str).collect();
    let overlap: Vec<String> = source_patches
        .iter()
        .filter(|id| target_set.contains(id.as_str()))
        .cloned()
        .collect();
    if !overlap.is_empty() {
        return Err(Error::DomainOverlap(overlap));
    }

    let patches = source_patches.iter().chain(target).cloned().collect();
    Ok(ReplayMix {
        source_rate,
        source_count: source_patches.len(),
        target_count: target.len(),
        provenance,
        source_patches,
        target_patches: target.to_vec(),
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dq::{self, BinPartition};
    use crate::listing::SelectionMethod;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}:{i}:0")).collect()
    }

    fn coreset(n: usize, bins: usize, rate: f64) -> CoresetFile {
        let names = ids("cyto", n);
        let mut start = 0;
        let partition = BinPartition {
            bins: dq::bin_sizes(n, bins)
                .into_iter()
                .map(|s| {
                    let b: Vec<usize> = (start..start + s).collect();
                    start += s;
                    b
                })
                .collect(),
            source_n: n,
        };
        let sel = dq::sample_coreset(&partition, rate, 11).unwrap();
        CoresetFile::new(SelectionMethod::Dq, &sel, &partition, &names)
    }

    #[test]
    fn zero_rate_is_target_only() {
        let target = ids("histo", 5);
        let mix = compose_replay(&ReplaySource::None, &target).unwrap();
        assert_eq!(mix.patches, target);
        assert_eq!(mix.source_rate, 0.0);
        assert!(mix.source_patches.is_empty());
    }

    #[test]
    fn full_source_union() {
        let mix = compose_replay(&ReplaySource::Full(ids("cyto", 10)), &ids("histo", 5)).unwrap();
        assert_eq!(mix.len(), 15);
        assert_eq!(mix.source_rate, 1.0);
    }

    #[test]
    fn five_percent_of_two_hundred() {
        let target = ids("histo", 30);
        let mix = compose_replay(&ReplaySource::Coreset(coreset(200, 5, 0.05)), &target).unwrap();
        assert_eq!(mix.source_count, 10);
        assert_eq!(mix.len(), 40);
        assert_eq!(mix.provenance.as_ref().unwrap().n_bins, 5);
    }

    #[test]
    fn overlap_rejected() {
        let mut target = ids("histo", 3);
        let source = coreset(10, 1, 1.0);
        target.push(source.selection[4].clone());
        match compose_replay(&ReplaySource::Coreset(source), &target) {
            Err(Error::DomainOverlap(ids)) => assert_eq!(ids.len(), 1),
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn empty_target_rejected() {
        assert!(compose_replay(&ReplaySource::None, &[]).is_err());
    }

    #[test]
    fn source_count_monotone_in_rate() {
        let target = ids("histo", 3);
        let mut last = 0;
        for rate in [0.01, 0.03, 0.05, 0.1, 0.25, 0.3, 0.5, 0.77, 1.0] {
            let mix = compose_replay(&ReplaySource::Coreset(coreset(137, 5, rate)), &target).unwrap();
            assert!(mix.source_count >= last);
            assert_eq!(mix.len(), mix.source_count + 3);
            last = mix.source_count;
        }
        assert_eq!(last, 137);
    }
}
