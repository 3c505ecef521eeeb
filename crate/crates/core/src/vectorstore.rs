//! Exact cosine-distance datastore.
//!
//! Vectors are kept contiguously in single precision; distances are computed
//! in double precision by a linear scan. Results are ordered by ascending
//! distance, ties by ascending `entry_id`.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! header : magic "VILLADS\0" | version u32 | dim u32 | count u64
//! record : len u32 (bytes that follow)
//!          entry_id str | pub_id str | kind u8 | chunk_index u32
//!          vector dim x f32 | text str
//! str    : len u32 | UTF-8 bytes
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

pub const MAGIC: &[u8; 8] = b"VILLADS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: store has {expected}, vector has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("entry_id `{0}` already names a different entry")]
    EntryIdConflict(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store at byte {offset}: {message}")]
    Corrupt { offset: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Abstract,
    Chunk,
}

impl EntryKind {
    fn tag(self) -> u8 {
        match self {
            EntryKind::Abstract => 0,
            EntryKind::Chunk => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(EntryKind::Abstract),
            1 => Some(EntryKind::Chunk),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreEntry {
    pub entry_id: String,
    pub pub_id: String,
    pub kind: EntryKind,
    pub chunk_index: u32,
    pub vector: EmbeddingVector,
    pub text: String,
}

impl DatastoreEntry {
    pub fn abstract_entry(pub_id: &str, vector: EmbeddingVector, text: &str) -> Self {
        Self {
            entry_id: format!("{pub_id}#abstract"),
            pub_id: pub_id.to_string(),
            kind: EntryKind::Abstract,
            chunk_index: 0,
            vector,
            text: text.to_string(),
        }
    }

    pub fn chunk_entry(pub_id: &str, chunk_index: u32, vector: EmbeddingVector, text: &str) -> Self {
        Self {
            entry_id: format!("{pub_id}#chunk{chunk_index:06}"),
            pub_id: pub_id.to_string(),
            kind: EntryKind::Chunk,
            chunk_index,
            vector,
            text: text.to_string(),
        }
    }

    fn key(&self) -> (String, EntryKind, u32) {
        (self.pub_id.clone(), self.kind, self.chunk_index)
    }
}

/// Metadata of a stored entry, without its vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub entry_id: String,
    pub pub_id: String,
    pub kind: EntryKind,
    pub chunk_index: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entry: EntryMeta,
    pub distance: f64,
}

/// `1 - a.b / (|a||b|)` in double precision.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, StoreError> {
    cosine_distance_slices(a.as_slice(), b.as_slice())
}

pub fn cosine_distance_slices(a: &[f32], b: &[f32]) -> Result<f64, StoreError> {
    if a.len() != b.len() {
        return Err(StoreError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(StoreError::ZeroVector);
    }
    Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query<'a> {
    pub vector: &'a EmbeddingVector,
    pub k: usize,
    /// Inclusive distance threshold in [0, 2].
    pub threshold: f64,
    /// Restrict to one publication.
    pub pub_id: Option<&'a str>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorStore {
    dim: usize,
    meta: Vec<EntryMeta>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    by_key: HashMap<(String, EntryKind, u32), usize>,
    by_entry_id: HashMap<String, usize>,
    by_pub: HashMap<String, Vec<usize>>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = DatastoreEntry> + '_ {
        (0..self.len()).map(|i| self.entry(i))
    }

    fn entry(&self, i: usize) -> DatastoreEntry {
        let m = &self.meta[i];
        DatastoreEntry {
            entry_id: m.entry_id.clone(),
            pub_id: m.pub_id.clone(),
            kind: m.kind,
            chunk_index: m.chunk_index,
            vector: EmbeddingVector::new(self.vector(i).to_vec()).expect("stored vectors are finite"),
            text: m.text.clone(),
        }
    }

    fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, entry_id: &str) -> Option<DatastoreEntry> {
        self.by_entry_id.get(entry_id).map(|&i| self.entry(i))
    }

    /// Distinct publication ids, in first-insertion order.
    pub fn pub_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.meta
            .iter()
            .filter(|m| seen.insert(m.pub_id.as_str()))
            .map(|m| m.pub_id.as_str())
            .collect()
    }

    /// Insert, replacing an existing entry with the same
    /// (pub_id, kind, chunk_index) in place.
    pub fn insert(&mut self, entry: DatastoreEntry) -> Result<(), StoreError> {
        if entry.vector.dim() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: entry.vector.dim(),
            });
        }
        let norm = entry.vector.norm();
        if norm == 0.0 {
            return Err(StoreError::ZeroVector);
        }
        let key = entry.key();
        let existing = self.by_key.get(&key).copied();
        if let Some(&other) = self.by_entry_id.get(&entry.entry_id) {
            if Some(other) != existing {
                return Err(StoreError::EntryIdConflict(entry.entry_id));
            }
        }
        let meta = EntryMeta {
            entry_id: entry.entry_id,
            pub_id: entry.pub_id,
            kind: entry.kind,
            chunk_index: entry.chunk_index,
            text: entry.text,
        };
        match existing {
            Some(i) => {
                self.by_entry_id.remove(&self.meta[i].entry_id);
                self.by_entry_id.insert(meta.entry_id.clone(), i);
                self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(entry.vector.as_slice());
                self.norms[i] = norm;
                self.meta[i] = meta;
            }
            None => {
                let i = self.meta.len();
                self.by_key.insert(key, i);
                self.by_entry_id.insert(meta.entry_id.clone(), i);
                self.by_pub.entry(meta.pub_id.clone()).or_default().push(i);
                self.vectors.extend_from_slice(entry.vector.as_slice());
                self.norms.push(norm);
                self.meta.push(meta);
            }
        }
        Ok(())
    }

    /// Exact thresholded top-k: every candidate within `threshold` (and the
    /// publication filter) sorted by (distance, entry_id), truncated to `k`.
    pub fn top_k(&self, query: Query<'_>) -> Result<Vec<ScoredEntry>, StoreError> {
        if query.k == 0 {
            return Err(StoreError::InvalidQuery("k must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&query.threshold) {
            return Err(StoreError::InvalidQuery(format!(
                "threshold {} outside [0, 2]",
                query.threshold
            )));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = query.vector.as_slice();
        if q.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        let qn = query.vector.norm();
        if qn == 0.0 {
            return Err(StoreError::ZeroVector);
        }

        let score = |i: usize| {
            let dot: f64 = self
                .vector(i)
                .iter()
                .zip(q)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            (1.0 - dot / (self.norms[i] * qn), i)
        };
        let mut hits: Vec<(f64, usize)> = match query.pub_id {
            Some(p) => self
                .by_pub
                .get(p)
                .map(|ix| ix.iter().map(|&i| score(i)).collect())
                .unwrap_or_default(),
            None => (0..self.len()).map(score).collect(),
        };
        hits.retain(|(d, _)| *d <= query.threshold);
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then_with(|| self.meta[a.1].entry_id.cmp(&self.meta[b.1].entry_id))
        };
        if hits.len() > query.k {
            hits.select_nth_unstable_by(query.k - 1, cmp);
            hits.truncate(query.k);
        }
        hits.sort_unstable_by(cmp);
        Ok(hits
            .into_iter()
            .map(|(distance, i)| ScoredEntry {
                entry: self.meta[i].clone(),
                distance,
            })
            .collect())
    }

    /// Serialize to the binary format described in the module docs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.vectors.len() * 4 + self.meta.len() * 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, m) in self.meta.iter().enumerate() {
            let mut rec = Vec::new();
            put_str(&mut rec, &m.entry_id);
            put_str(&mut rec, &m.pub_id);
            rec.push(m.kind.tag());
            rec.extend_from_slice(&m.chunk_index.to_le_bytes());
            for v in self.vector(i) {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            put_str(&mut rec, &m.text);
            out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.corrupt(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(r.corrupt(8, &format!("unsupported version {version}")));
        }
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        let mut store = VectorStore::new(dim);
        for n in 0..count {
            let rec_start = r.pos;
            let len = r.u32("record length")? as usize;
            let body_start = r.pos;
            let body = r.take(len, "record body")?;
            let mut rr = Reader {
                bytes: body,
                pos: 0,
            };
            let ctx = |e: StoreError| match e {
                StoreError::Corrupt { offset, message } => StoreError::Corrupt {
                    offset: body_start + offset,
                    message: format!("record {n}: {message}"),
                },
                other => other,
            };
            let entry_id = rr.str("entry_id").map_err(ctx)?;
            let pub_id = rr.str("pub_id").map_err(ctx)?;
            let tag_at = rr.pos;
            let kind = EntryKind::from_tag(rr.u8("kind").map_err(ctx)?)
                .ok_or_else(|| ctx(rr.corrupt(tag_at, "unknown entry kind")))?;
            let chunk_index = rr.u32("chunk_index").map_err(ctx)?;
            let raw = rr.take(dim * 4, "vector").map_err(ctx)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let text = rr.str("text").map_err(ctx)?;
            if rr.pos != body.len() {
                return Err(ctx(rr.corrupt(rr.pos, "trailing bytes in record")));
            }
            let vector =
                EmbeddingVector::new(values).ok_or_else(|| r.corrupt(rec_start, "non-finite or empty vector"))?;
            store
                .insert(DatastoreEntry {
                    entry_id,
                    pub_id,
                    kind,
                    chunk_index,
                    vector,
                    text,
                })
                .map_err(|e| r.corrupt(rec_start, &e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, "trailing bytes after last record"));
        }
        if store.len() as u64 != count {
            return Err(r.corrupt(20, "duplicate records"));
        }
        Ok(store)
    }

    /// Write atomically (temp file then rename).
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, message: &str) -> StoreError {
        StoreError::Corrupt {
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(
                self.pos,
                &format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, StoreError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String, StoreError> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt(at, &format!("{what} is not UTF-8")))
    }
}
