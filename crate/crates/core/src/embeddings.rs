//! Per-patch feature matrices and the `.emb` file format.
//!
//! An `.emb` file is a single UTF-8 JSON header line followed by the raw
//! little-endian `f32` payload in row-major order:
//!
//! ```text
//! {"format_version":1,"n":2,"d":3,"dtype":"f32","ids":["a:0:0","a:0:112"],"metadata":{}}\n
//! <n * d * 4 bytes>
//! ```
//!
//! The header is validated against the payload on read; any mismatch is an
//! error rather than a best-effort recovery.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32";

/// Identity of one sliding-window patch: `image:row:col`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchId {
    pub source_image: String,
    pub row: usize,
    pub col: usize,
}

impl PatchId {
    pub fn new(source_image: impl Into<String>, row: usize, col: usize) -> Self {
        PatchId {
            source_image: source_image.into(),
            row,
            col,
        }
    }
}

impl fmt::Display for PatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.source_image, self.row, self.col)
    }
}

impl FromStr for PatchId {
    type Err = Error;

    // Split from the right so image names may themselves contain ':'.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("`{s}` is not a patch id (image:row:col)"));
        let mut parts = s.rsplitn(3, ':');
        let col = parts.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let row = parts.next().and_then(|r| r.parse().ok()).ok_or_else(bad)?;
        let image = parts.next().filter(|i| !i.is_empty()).ok_or_else(bad)?;
        Ok(PatchId::new(image, row, col))
    }
}

/// An `n x d` single-precision feature matrix with one id per row.
///
/// Immutable after construction; every instance satisfies: `n >= 1`,
/// `d >= 1`, unique ids, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    metadata: BTreeMap<String, serde_json::Value>,
}

impl EmbeddingMatrix {
    pub fn new(d: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidEmbeddings("feature dimension d must be >= 1".into()));
        }
        if ids.is_empty() {
            return Err(Error::InvalidEmbeddings("matrix must have at least one row".into()));
        }
        let n = ids.len();
        if data.len() != n * d {
            return Err(Error::InvalidEmbeddings(format!(
                "{} values do not form {n} rows of dimension {d}",
                data.len()
            )));
        }
        check_unique(&ids).map_err(Error::InvalidEmbeddings)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbeddings(format!(
                "non-finite value {} at row {}, column {}",
                data[pos],
                pos / d,
                pos % d
            )));
        }
        Ok(EmbeddingMatrix {
            n,
            d,
            data,
            ids,
            metadata: BTreeMap::new(),
        })
    }

    /// Convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f32>], ids: Vec<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidEmbeddings("rows have differing lengths".into()));
        }
        if rows.len() != ids.len() {
            return Err(Error::InvalidEmbeddings(format!(
                "{} rows but {} ids",
                rows.len(),
                ids.len()
            )));
        }
        Self::new(d, rows.concat(), ids)
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.metadata
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i < self.n {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: i,
                len: self.n,
            })
        }
    }

    /// Squared Euclidean distance between rows, accumulated in `f64` in
    /// column order.
    pub fn sq_dist(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.row(i), self.row(j))
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.sq_dist(i, j).sqrt()
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = f64::from(x) - f64::from(y);
            diff * diff
        })
        .sum()
}

fn check_unique(ids: &[String]) -> std::result::Result<(), String> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(format!("duplicate id `{id}`"));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    n: usize,
    d: usize,
    dtype: String,
    ids: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Encode a matrix into the `.emb` byte layout.
pub fn encode(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        n: m.n,
        d: m.d,
        dtype: DTYPE.to_string(),
        ids: m.ids.clone(),
        metadata: m.metadata.clone(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::json("embedding header", e))?;
    out.push(b'\n');
    out.reserve(m.data.len() * 4);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode and validate `.emb` bytes.
pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    if header.dtype != DTYPE {
        return Err(Error::MalformedHeader(format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.n == 0 || header.d == 0 {
        return Err(Error::MalformedHeader(format!(
            "n and d must be positive (n={}, d={})",
            header.n, header.d
        )));
    }
    if header.ids.len() != header.n {
        return Err(Error::MalformedHeader(format!(
            "header declares n={} but lists {} ids",
            header.n,
            header.ids.len()
        )));
    }
    let payload = &bytes[newline + 1..];
    let expected = header
        .n
        .checked_mul(header.d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader("n*d overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(EmbeddingMatrix::new(header.d, data, header.ids)?.with_metadata(header.metadata))
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(m)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
