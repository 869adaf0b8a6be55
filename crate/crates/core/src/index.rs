//! Exact inner-product nearest-neighbor search over row embeddings.
//!
//! Two storage layouts answer the same queries with identical results:
//! a dense row-major matrix, and a sparse column-major layout (one posting
//! list per coordinate) suited to hashed n-gram embeddings, which are mostly
//! zeros. In both, a similarity is accumulated in `f64` over the query's
//! nonzero coordinates in ascending order, so the two layouts produce
//! bit-identical scores.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{read_dump, write_dump, EmbedError, RowEmbedding};

pub type RowId = u64;

/// Default number of neighbors to retrieve.
pub const DEFAULT_K: usize = 128;

const UNIT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate row id {0}")]
    DuplicateRowId(RowId),
    #[error("row {0} is neither unit-norm nor zero")]
    NotNormalized(RowId),
    #[error("too many rows for sparse storage")]
    TooManyRows,
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Dump(#[from] EmbedError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageKind {
    #[default]
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Posting {
    row: u32,
    value: f32,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(Vec<f32>),
    Sparse(Vec<Vec<Posting>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub row_id: RowId,
    pub similarity: f64,
}

/// Sorted by descending similarity, ties by ascending row id.
pub type NeighborList = Vec<Neighbor>;

// Ordering where "greater" means "worse": lower similarity, then higher id.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    sim: f64,
    id: RowId,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.sim.total_cmp(&self.sim).then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    storage: Storage,
    row_ids: Vec<RowId>,
    id_set: HashSet<RowId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    storage: StorageKind,
    row_ids: Vec<RowId>,
}

impl VectorIndex {
    pub fn new(dim: usize, kind: StorageKind) -> Self {
        let storage = match kind {
            StorageKind::Dense => Storage::Dense(Vec::new()),
            StorageKind::Sparse => Storage::Sparse(vec![Vec::new(); dim]),
        };
        Self { dim, storage, row_ids: Vec::new(), id_set: HashSet::new() }
    }

    pub fn build<I>(dim: usize, kind: StorageKind, rows: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (RowId, RowEmbedding)>,
    {
        let mut index = Self::new(dim, kind);
        index.append(rows)?;
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn storage_kind(&self) -> StorageKind {
        match self.storage {
            Storage::Dense(_) => StorageKind::Dense,
            Storage::Sparse(_) => StorageKind::Sparse,
        }
    }

    pub fn row_ids(&self) -> &[RowId] {
        &self.row_ids
    }

    pub fn contains(&self, id: RowId) -> bool {
        self.id_set.contains(&id)
    }

    /// Bytes held by the vector storage (excluding row-id metadata).
    pub fn storage_bytes(&self) -> usize {
        match &self.storage {
            Storage::Dense(v) => v.capacity() * std::mem::size_of::<f32>(),
            Storage::Sparse(cols) => cols.iter().map(|c| c.capacity() * std::mem::size_of::<Posting>()).sum(),
        }
    }

    /// Appends a batch. The batch is validated in full before anything is
    /// inserted, so a failed append leaves the index unchanged.
    pub fn append<I>(&mut self, rows: I) -> Result<(), IndexError>
    where
        I: IntoIterator<Item = (RowId, RowEmbedding)>,
    {
        let batch: Vec<(RowId, RowEmbedding)> = rows.into_iter().collect();
        let mut fresh = HashSet::with_capacity(batch.len());
        for (id, emb) in &batch {
            if emb.dim() != self.dim {
                return Err(IndexError::DimensionMismatch { expected: self.dim, found: emb.dim() });
            }
            if self.id_set.contains(id) || !fresh.insert(*id) {
                return Err(IndexError::DuplicateRowId(*id));
            }
            let sq: f64 = emb.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            if sq != 0.0 && (sq.sqrt() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(IndexError::NotNormalized(*id));
            }
        }
        if let Storage::Sparse(_) = self.storage {
            if self.row_ids.len() + batch.len() > u32::MAX as usize {
                return Err(IndexError::TooManyRows);
            }
        }
        for (id, emb) in batch {
            let pos = self.row_ids.len();
            match &mut self.storage {
                Storage::Dense(data) => data.extend_from_slice(&emb.values),
                Storage::Sparse(cols) => {
                    for (j, &v) in emb.values.iter().enumerate() {
                        if v != 0.0 {
                            cols[j].push(Posting { row: pos as u32, value: v });
                        }
                    }
                }
            }
            self.row_ids.push(id);
            self.id_set.insert(id);
        }
        Ok(())
    }

    /// Dense copy of the stored vector at position `pos`.
    pub fn vector(&self, pos: usize) -> Vec<f32> {
        match &self.storage {
            Storage::Dense(data) => data[pos * self.dim..(pos + 1) * self.dim].to_vec(),
            Storage::Sparse(cols) => {
                let mut v = vec![0.0; self.dim];
                for (j, col) in cols.iter().enumerate() {
                    if let Ok(i) = col.binary_search_by_key(&(pos as u32), |p| p.row) {
                        v[j] = col[i].value;
                    }
                }
                v
            }
        }
    }

    fn check_query(&self, q: &[f32]) -> Result<(), IndexError> {
        if q.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, found: q.len() });
        }
        Ok(())
    }

    /// Similarity of `q` against every stored row, by position.
    fn scores_into(&self, q: &[f32], out: &mut Vec<f64>) {
        let nz: Vec<(usize, f64)> =
            q.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| (j, f64::from(v))).collect();
        out.clear();
        match &self.storage {
            Storage::Dense(data) => {
                out.extend(data.chunks_exact(self.dim).map(|row| {
                    let mut s = 0.0f64;
                    for &(j, qv) in &nz {
                        s += f64::from(row[j]) * qv;
                    }
                    s
                }));
            }
            Storage::Sparse(cols) => {
                out.resize(self.row_ids.len(), 0.0);
                for &(j, qv) in &nz {
                    for p in &cols[j] {
                        out[p.row as usize] += f64::from(p.value) * qv;
                    }
                }
            }
        }
    }

    fn select(&self, scores: &[f64], k: usize, exclude: Option<&HashSet<RowId>>) -> NeighborList {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (pos, &s) in scores.iter().enumerate() {
            let id = self.row_ids[pos];
            if exclude.is_some_and(|ex| ex.contains(&id)) {
                continue;
            }
            // folds -0.0 into +0.0 so total_cmp agrees with ==
            let cand = Candidate { sim: s + 0.0, id };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(cand);
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor { row_id: c.id, similarity: c.sim.clamp(-1.0, 1.0) })
            .collect()
    }

    /// Top-`k` rows by inner product, skipping any id in `exclude`.
    pub fn query(&self, q: &[f32], k: usize, exclude: Option<&HashSet<RowId>>) -> Result<NeighborList, IndexError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        self.check_query(q)?;
        let mut scores = Vec::new();
        self.scores_into(q, &mut scores);
        Ok(self.select(&scores, k, exclude))
    }

    /// Runs many queries in parallel; output order follows `queries`.
    pub fn query_batch(
        &self,
        queries: &[&[f32]],
        k: usize,
        exclude: Option<&HashSet<RowId>>,
    ) -> Result<Vec<NeighborList>, IndexError> {
        if self.is_empty() {
            return Ok(vec![Vec::new(); queries.len()]);
        }
        for q in queries {
            self.check_query(q)?;
        }
        Ok(queries
            .par_iter()
            .map_init(Vec::new, |scores, q| {
                self.scores_into(q, scores);
                self.select(scores, k, exclude)
            })
            .collect())
    }

    /// Writes `<stem>.emb` (embedding dump) and `<stem>.ids.json` (sidecar).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<(), IndexError> {
        let stem = stem.as_ref();
        let emb = BufWriter::new(File::create(stem.with_extension("emb"))?);
        match &self.storage {
            Storage::Dense(data) => write_dump(emb, self.dim, self.len(), data.chunks_exact(self.dim.max(1)))?,
            Storage::Sparse(cols) => {
                // postings are sorted by row, so one cursor per column suffices
                let mut cursor = vec![0usize; self.dim];
                let rows = (0..self.len()).map(|pos| {
                    let mut v = vec![0.0f32; self.dim];
                    for (j, col) in cols.iter().enumerate() {
                        if let Some(p) = col.get(cursor[j]).filter(|p| p.row as usize == pos) {
                            v[j] = p.value;
                            cursor[j] += 1;
                        }
                    }
                    v
                });
                write_dump(emb, self.dim, self.len(), rows)?
            }
        }
        let sidecar = Sidecar { dim: self.dim, storage: self.storage_kind(), row_ids: self.row_ids.clone() };
        serde_json::to_writer(BufWriter::new(File::create(stem.with_extension("ids.json"))?), &sidecar)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self, IndexError> {
        let stem = stem.as_ref();
        let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(stem.with_extension("ids.json"))?))?;
        let (dim, rows) = read_dump(BufReader::new(File::open(stem.with_extension("emb"))?))?;
        if dim != sidecar.dim {
            return Err(IndexError::DimensionMismatch { expected: sidecar.dim, found: dim });
        }
        if rows.len() != sidecar.row_ids.len() {
            return Err(EmbedError::BadDump(format!(
                "{} vectors but {} row ids",
                rows.len(),
                sidecar.row_ids.len()
            ))
            .into());
        }
        let embs = sidecar.row_ids.into_iter().zip(rows).map(|(id, values)| {
            let norm_is_unit = values.iter().any(|&v| v != 0.0);
            (id, RowEmbedding { values, norm_is_unit })
        });
        Self::build(dim, sidecar.storage, embs)
    }
}
