//! Unit-norm embedding vectors, id-aligned matrices and their binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "DAEM"            4 bytes magic
//! version           u8   (currently 1)
//! modality          u8   (0 = text, 1 = image)
//! dim               u32
//! count             u64
//! backend_id_len    u16
//! backend_id        backend_id_len bytes of UTF-8
//! count × { id: u64, values: dim × f32 }
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"DAEM";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    fn to_byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::usage(format!(
                "unknown modality `{other}` (expected text or image)"
            ))),
        }
    }
}

/// A unit-norm vector stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Wraps values that must already be unit-norm.
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::degenerate("embedding has dimension 0"));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Invariant(format!(
                "embedding norm {norm} is not within {UNIT_NORM_TOLERANCE} of 1"
            )));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Scale `raw` to unit length. Arithmetic is done in f64, then stored as f32.
pub fn normalize(raw: &[f64]) -> Result<EmbeddingVector> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if raw.is_empty() || norm == 0.0 || !norm.is_finite() {
        return Err(Error::degenerate(
            "cannot normalize a zero, empty or non-finite vector",
        ));
    }
    let values: Vec<f32> = raw.iter().map(|v| (v / norm) as f32).collect();
    EmbeddingVector::from_unit(values)
}

pub fn normalize_f32(raw: &[f32]) -> Result<EmbeddingVector> {
    let wide: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
    normalize(&wide)
}

/// Cosine similarity of unit vectors (their dot product), clamped to [-1, 1].
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::usage(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(dot(&a.values, &b.values))
}

/// f64 dot product of equal-length f32 slices, clamped to [-1, 1].
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    s.clamp(-1.0, 1.0)
}

/// Unit-norm vectors of one modality, aligned with strictly ascending record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<u64>,
    vectors: Vec<EmbeddingVector>,
    dim: usize,
    modality: Modality,
    backend_id: String,
}

impl EmbeddingMatrix {
    pub fn new(
        ids: Vec<u64>,
        vectors: Vec<EmbeddingVector>,
        dim: usize,
        modality: Modality,
        backend_id: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invariant("matrix dimension must be positive".into()));
        }
        if ids.len() != vectors.len() {
            return Err(Error::Invariant(format!(
                "{} ids but {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant("matrix ids must be strictly ascending".into()));
        }
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::Invariant(format!(
                "vector of dim {} in a matrix of dim {dim}",
                v.dim()
            )));
        }
        Ok(EmbeddingMatrix {
            ids,
            vectors,
            dim,
            modality,
            backend_id: backend_id.into(),
        })
    }

    pub fn empty(dim: usize, modality: Modality, backend_id: impl Into<String>) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), dim, modality, backend_id)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&EmbeddingVector> {
        self.ids.binary_search(&id).ok().map(|i| &self.vectors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &EmbeddingVector)> {
        self.ids.iter().copied().zip(self.vectors.iter())
    }

    /// Sub-matrix restricted to `ids` (ids absent from the matrix are an error).
    pub fn select(&self, ids: &[u64]) -> Result<EmbeddingMatrix> {
        let mut wanted: Vec<u64> = ids.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let mut vectors = Vec::with_capacity(wanted.len());
        for &id in &wanted {
            let v = self
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("id {id} not present in matrix")))?;
            vectors.push(v.clone());
        }
        EmbeddingMatrix::new(wanted, vectors, self.dim, self.modality, self.backend_id.clone())
    }

    /// Largest cosine similarity between `query` and any row.
    pub fn max_similarity(&self, query: &EmbeddingVector) -> Result<Option<(u64, f64)>> {
        if query.dim() != self.dim {
            return Err(Error::usage(format!(
                "dimension mismatch: query {} vs matrix {}",
                query.dim(),
                self.dim
            )));
        }
        let mut best: Option<(u64, f64)> = None;
        for (id, v) in self.iter() {
            let s = dot(v.values(), query.values());
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((id, s));
            }
        }
        Ok(best)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tag = self.backend_id.as_bytes();
        let mut out = Vec::with_capacity(24 + tag.len() + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.modality.to_byte());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(tag.len() as u16).to_le_bytes());
        out.extend_from_slice(tag);
        for (id, v) in self.iter() {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected DAEM".into(),
            });
        }
        let version = r.take(1, "version")?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let modality = Modality::from_byte(r.take(1, "modality")?[0]).ok_or(Error::Format {
            offset: 5,
            message: "unknown modality byte".into(),
        })?;
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::Format {
                offset: 6,
                message: "dimension is zero".into(),
            });
        }
        let count = r.u64("count")?;
        let tag_len = r.u16("backend id length")? as usize;
        let tag_at = r.pos;
        let backend_id = std::str::from_utf8(r.take(tag_len, "backend id")?)
            .map_err(|_| Error::Format {
                offset: tag_at as u64,
                message: "backend id is not UTF-8".into(),
            })?
            .to_string();

        let record_len = 8 + 4 * dim;
        let remaining = bytes.len() - r.pos;
        if (remaining as u64) < count.saturating_mul(record_len as u64) {
            let stored = remaining / record_len;
            return Err(Error::Format {
                offset: (r.pos + stored * record_len) as u64,
                message: format!("declared {count} records but only {stored} are stored"),
            });
        }
        let mut ids = Vec::with_capacity(count as usize);
        let mut vectors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.pos;
            let id = r.u64("record id")?;
            let values: Vec<f32> = r
                .take(4 * dim, "record values")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let v = EmbeddingVector::from_unit(values).map_err(|e| match e {
                Error::Invariant(m) => Error::Invariant(format!("record {id} at byte {at}: {m}")),
                other => other,
            })?;
            ids.push(id);
            vectors.push(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        EmbeddingMatrix::new(ids, vectors, dim, modality, backend_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::ingest::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_matrix(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    m.save(path)
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::load(path)
}
