//! JSON files exchanged between commands: the patch ledger, coreset files
//! and replay mixes. All of them can serve as a stage's subset listing.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dq::{BinPartition, CoresetSelection};
use crate::error::{Error, Result};

/// Pretty JSON with a trailing newline, written via a temporary file and a
/// rename so readers never observe a partial file.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: String,
    pub image: String,
    pub row: usize,
    pub col: usize,
    /// Relative to the ledger's directory.
    pub image_file: String,
    pub mask_file: String,
}

/// `patches.json`: every patch cut from a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLedger {
    pub window: usize,
    pub stride: usize,
    pub patches: Vec<LedgerEntry>,
}

impl PatchLedger {
    pub fn ids(&self) -> Vec<String> {
        self.patches.iter().map(|p| p.id.clone()).collect()
    }

    pub fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        match self.patches.iter().find(|p| !seen.insert(p.id.as_str())) {
            Some(dup) => Err(Error::InvalidArgument(format!("duplicate patch id `{}`", dup.id))),
            None => Ok(()),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Dq,
    Random,
}

/// `coreset.json`: a selection expressed in patch ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetFile {
    pub method: SelectionMethod,
    pub rate: f64,
    pub seed: u64,
    pub n_bins: usize,
    /// Bin members in greedy insertion order.
    pub bins: Vec<Vec<String>>,
    pub per_bin_selection: Vec<Vec<String>>,
    pub selection: Vec<String>,
}

impl CoresetFile {
    pub fn new(
        method: SelectionMethod,
        selection: &CoresetSelection,
        partition: &BinPartition,
        ids: &[String],
    ) -> Self {
        let name = |v: &[usize]| v.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
        CoresetFile {
            method,
            rate: selection.rate,
            seed: selection.seed,
            n_bins: partition.n_bins(),
            bins: partition.bins.iter().map(|b| name(b)).collect(),
            per_bin_selection: selection.per_bin.iter().map(|(_, s)| name(s)).collect(),
            selection: name(&selection.selected),
        }
    }

    /// Map the ids back onto row indices of an embedding matrix.
    pub fn resolve(&self, ids: &[String]) -> Result<(BinPartition, CoresetSelection)> {
        let index: HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let lookup = |names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    index.get(n.as_str()).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!("patch `{n}` is not in the embeddings"))
                    })
                })
                .collect()
        };
        let bins = self.bins.iter().map(|b| lookup(b)).collect::<Result<Vec<_>>>()?;
        let per_bin = self
            .per_bin_selection
            .iter()
            .enumerate()
            .map(|(b, s)| Ok((b, lookup(s)?)))
            .collect::<Result<Vec<_>>>()?;
        let partition = BinPartition {
            bins,
            source_n: ids.len(),
        };
        let selection = CoresetSelection {
            rate: self.rate,
            seed: self.seed,
            selected: lookup(&self.selection)?,
            per_bin,
        };
        Ok((partition, selection))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

/// Bare bin listing, `{"bins": [[ids...], ...]}`. A coreset file also parses
/// as one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinsFile {
    pub bins: Vec<Vec<String>>,
}

/// Read the patch ids a training stage should use from any subset listing:
/// a ledger (`patches` of objects), a replay mix (`patches` of strings) or a
/// coreset (`selection`).
pub fn read_subset_patches(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let value: serde_json::Value = read_json(path)?;
    let bad = || {
        Error::InvalidArgument(format!(
            "{} is not a patch ledger, coreset or replay mix",
            path.display()
        ))
    };
    let list = value
        .get("patches")
        .or_else(|| value.get("selection"))
        .and_then(|v| v.as_array())
        .ok_or_else(bad)?;
    list.iter()
        .map(|entry| {
            entry
                .as_str()
                .or_else(|| entry.get("id").and_then(|v| v.as_str()))
                .map(str::to_string)
                .ok_or_else(bad)
        })
        .collect()
}
