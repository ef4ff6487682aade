//! Embedding sets and their on-disk formats.
//!
//! `UEB1` (embedding set), little-endian:
//!
//! ```text
//! magic    55 45 42 31            "UEB1"
//! u32      version (= 1)
//! u8       modality (0 = text, 1 = image)
//! u8       normalized (0/1)
//! u8       has_labels (0/1)
//! u8       reserved (= 0)
//! u32      count
//! u32      dim
//! f32      count × dim payload, row-major
//! repeat count: u16 byte length + UTF-8 id
//! i32      count labels, only if has_labels = 1
//! ```
//!
//! `USM1` (score matrix): magic `55 53 4D 31`, u32 version, u8 provenance
//! (0 = cosine, 1 = external), three reserved bytes, u32 rows, u32 cols, then
//! rows × cols f32.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{Provenance, SimilarityMatrix};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"UEB1";
pub const SCORE_MAGIC: [u8; 4] = *b"USM1";
pub const FORMAT_VERSION: u32 = 1;

/// Row norms of a normalized set must be within this distance of 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            _ => None,
        }
    }
}

/// A modality-tagged matrix of feature vectors with ids and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    modality: Modality,
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    labels: Option<Vec<i32>>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Builds a set, checking every invariant (finite rows, unique ids, label
    /// count, unit norms when `normalized`).
    pub fn new(
        modality: Modality,
        dim: usize,
        data: Vec<f32>,
        ids: Vec<String>,
        labels: Option<Vec<i32>>,
        normalized: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadHeader { field: "dim", value: 0 });
        }
        if ids.is_empty() {
            return Err(Error::BadHeader { field: "count", value: 0 });
        }
        if data.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} rows of dim {}",
                data.len(),
                ids.len(),
                dim
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != ids.len() {
                return Err(Error::LengthMismatch {
                    left: labels.len(),
                    right: ids.len(),
                });
            }
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: i / dim,
                    col: i % dim,
                });
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id.len() > usize::from(u16::MAX) {
                return Err(Error::ShapeMismatch(format!(
                    "id at row {row} is {} bytes; the format allows 65535",
                    id.len()
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId {
                    row,
                    id: id.clone(),
                });
            }
        }
        let set = EmbeddingSet {
            modality,
            dim,
            data,
            ids,
            labels,
            normalized,
        };
        if normalized {
            for row in 0..set.count() {
                let norm = row_norm(set.row(row));
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::NormCheckFailed { row, norm });
                }
            }
        }
        Ok(set)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Same metadata, new payload. Used by transforms that preserve shape.
    pub(crate) fn with_data(&self, data: Vec<f32>, normalized: bool) -> Result<Self> {
        EmbeddingSet::new(
            self.modality,
            self.dim,
            data,
            self.ids.clone(),
            self.labels.clone(),
            normalized,
        )
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Scales `row` (given in f64) to unit length and rounds to f32.
pub(crate) fn normalize_row_into(row: &[f64], out: &mut [f32]) -> Option<()> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v / norm) as f32;
    }
    Some(())
}

/// Scales every row to unit L2 norm. Norms are accumulated in f64.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let dim = set.dim();
    let mut out = vec![0f32; set.data.len()];
    let mut buf = vec![0f64; dim];
    for (i, chunk) in out.chunks_mut(dim).enumerate() {
        for (b, &v) in buf.iter_mut().zip(set.row(i)) {
            *b = f64::from(v);
        }
        normalize_row_into(&buf, chunk).ok_or(Error::ZeroVectorRow(i))?;
    }
    set.with_data(out, true)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedFile {
                offset: self.bytes.len() as u64,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let b = self.take(4, "magic")?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(Error::MagicMismatch { expected, found });
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or(Error::TruncatedFile {
            offset: self.bytes.len() as u64,
            what,
        })?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes after offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn flag(value: u8, field: &'static str) -> Result<bool> {
    match value {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::BadHeader {
            field,
            value: u64::from(v),
        }),
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(EMBEDDING_MAGIC)?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let modality_code = r.u8("modality")?;
    let modality = Modality::from_code(modality_code).ok_or(Error::BadHeader {
        field: "modality",
        value: u64::from(modality_code),
    })?;
    let normalized = flag(r.u8("normalized")?, "normalized")?;
    let has_labels = flag(r.u8("has_labels")?, "has_labels")?;
    let _reserved = r.u8("reserved")?;
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    let data = r.f32s(count.saturating_mul(dim), "payload")?;
    let mut ids = Vec::with_capacity(count);
    for row in 0..count {
        let len = usize::from(r.u16("id length")?);
        let raw = r.take(len, "id bytes")?;
        let id = std::str::from_utf8(raw).map_err(|_| Error::InvalidId { row })?;
        ids.push(id.to_owned());
    }
    let labels = if has_labels {
        let raw = r.take(count * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        None
    };
    r.finish()?;
    EmbeddingSet::new(modality, dim, data, ids, labels, normalized)
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let ids_len: usize = set.ids.iter().map(|s| 2 + s.len()).sum();
    let mut out = Vec::with_capacity(20 + set.data.len() * 4 + ids_len + set.count() * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(set.modality.code());
    out.push(u8::from(set.normalized));
    out.push(u8::from(set.labels.is_some()));
    out.push(0);
    out.extend_from_slice(&(set.count() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in &set.ids {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    if let Some(labels) = &set.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(set)).map_err(|e| Error::io(path, e))
}

pub fn decode_scores(bytes: &[u8]) -> Result<SimilarityMatrix> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(SCORE_MAGIC)?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let code = r.u8("provenance")?;
    let provenance = match code {
        0 => Provenance::Cosine,
        1 => Provenance::External,
        v => {
            return Err(Error::BadHeader {
                field: "provenance",
                value: u64::from(v),
            })
        }
    };
    r.take(3, "reserved")?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let scores = r.f32s(rows.saturating_mul(cols), "scores")?;
    r.finish()?;
    SimilarityMatrix::new(rows, cols, scores, provenance)
}

pub fn encode_scores(s: &SimilarityMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + s.scores().len() * 4);
    out.extend_from_slice(&SCORE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match s.provenance() {
        Provenance::Cosine => 0,
        Provenance::External => 1,
    });
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(s.n_text() as u32).to_le_bytes());
    out.extend_from_slice(&(s.n_image() as u32).to_le_bytes());
    for v in s.scores() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<SimilarityMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scores(&bytes)
}

pub fn save_scores(s: &SimilarityMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scores(s)).map_err(|e| Error::io(path, e))
}
