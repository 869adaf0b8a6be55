//! Stateless row embeddings from hashed bags of character n-grams.
//!
//! Every cell is mapped to a fixed-width count vector by hashing its
//! character n-grams; the per-cell vectors are concatenated in schema order
//! and the whole row is L2-normalized. There is no fitted vocabulary.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error("bad embedding dump: {0}")]
    BadDump(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub cell_dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub use_boundary_sentinels: bool,
    pub signed_hashing: bool,
    pub hash_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            cell_dim: 256,
            ngram_min: 3,
            ngram_max: 3,
            use_boundary_sentinels: true,
            signed_hashing: true,
            hash_seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if !self.cell_dim.is_power_of_two() || self.cell_dim < 16 {
            return Err(EmbedError::InvalidConfig(format!(
                "cell_dim must be a power of two >= 16, got {}",
                self.cell_dim
            )));
        }
        if !(1 <= self.ngram_min && self.ngram_min <= self.ngram_max && self.ngram_max <= 8) {
            return Err(EmbedError::InvalidConfig(format!(
                "need 1 <= ngram_min <= ngram_max <= 8, got {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }

    pub fn row_dim(&self, n_columns: usize) -> usize {
        self.cell_dim * n_columns
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `bytes`, with the seed folded into the offset basis.
/// A zero seed gives plain FNV-1a.
pub fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Bucket and sign contribution of one n-gram. The sign comes from bit 63.
pub fn ngram_slot(ngram: &str, config: &EmbedderConfig) -> (usize, f32) {
    let h = fnv1a(ngram.as_bytes(), config.hash_seed);
    let bucket = (h % config.cell_dim as u64) as usize;
    let sign = if config.signed_hashing && (h >> 63) == 1 { -1.0 } else { 1.0 };
    (bucket, sign)
}

/// Calls `f` for every character n-gram of `text` (after sentinel wrapping).
pub fn for_each_ngram(text: &str, config: &EmbedderConfig, mut f: impl FnMut(&str)) {
    if text.is_empty() {
        return;
    }
    let wrapped;
    let s = if config.use_boundary_sentinels {
        wrapped = format!("^{text}$");
        wrapped.as_str()
    } else {
        text
    };
    // byte offsets of every char boundary, including the end
    let bounds: Vec<usize> = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len())).collect();
    let n_chars = bounds.len() - 1;
    for n in config.ngram_min..=config.ngram_max {
        if n > n_chars {
            break;
        }
        for start in 0..=(n_chars - n) {
            f(&s[bounds[start]..bounds[start + n]]);
        }
    }
}

fn add_cell(text: &str, config: &EmbedderConfig, out: &mut [f32]) {
    for_each_ngram(text, config, |g| {
        let (bucket, sign) = ngram_slot(g, config);
        out[bucket] += sign;
    });
}

/// Raw (unnormalized) hashed n-gram counts for one cell.
pub fn embed_cell(text: &str, config: &EmbedderConfig) -> Vec<f32> {
    let mut v = vec![0.0; config.cell_dim];
    add_cell(text, config, &mut v);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowEmbedding {
    pub values: Vec<f32>,
    /// False only for the zero vector.
    pub norm_is_unit: bool,
}

impl RowEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim], norm_is_unit: false }
    }

    /// L2-normalizes `values` in place unless they are all zero.
    pub fn normalized(mut values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self { values, norm_is_unit: false };
        }
        for v in &mut values {
            *v = (f64::from(*v) / norm) as f32;
        }
        Self { values, norm_is_unit: true }
    }
}

/// Concatenates per-cell vectors in column order and normalizes the row.
/// The cell at `blank` (the target column) is embedded as empty text.
pub fn embed_row<S: AsRef<str>>(cells: &[S], blank: Option<usize>, config: &EmbedderConfig) -> RowEmbedding {
    let mut values = vec![0.0f32; config.row_dim(cells.len())];
    for (j, (cell, slot)) in cells.iter().zip(values.chunks_mut(config.cell_dim)).enumerate() {
        if Some(j) != blank {
            add_cell(cell.as_ref(), config, slot);
        }
    }
    RowEmbedding::normalized(values)
}

/// Embeds many rows in parallel, preserving order.
pub fn embed_rows<R, S>(rows: &[R], blank: Option<usize>, config: &EmbedderConfig) -> Vec<RowEmbedding>
where
    R: AsRef<[S]> + Sync,
    S: AsRef<str> + Sync,
{
    rows.par_iter().map(|r| embed_row(r.as_ref(), blank, config)).collect()
}

pub const DUMP_MAGIC: [u8; 4] = *b"RCEM";
pub const DUMP_VERSION: u32 = 1;

/// Writes embeddings as a 16-byte header (magic, version, row count, dim;
/// little-endian u32s) followed by row-major little-endian f32 values.
pub fn write_dump<W, I, R>(mut w: W, dim: usize, row_count: usize, rows: I) -> Result<(), EmbedError>
where
    W: Write,
    I: IntoIterator<Item = R>,
    R: AsRef<[f32]>,
{
    let header_field = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| EmbedError::BadDump(format!("{what} {v} exceeds u32")))
    };
    w.write_all(&DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&header_field(row_count, "row count")?.to_le_bytes())?;
    w.write_all(&header_field(dim, "dim")?.to_le_bytes())?;
    let mut written = 0usize;
    let mut buf = Vec::with_capacity(dim * 4);
    for row in rows {
        let row = row.as_ref();
        if row.len() != dim {
            return Err(EmbedError::BadDump(format!("row of length {} in a dim-{dim} dump", row.len())));
        }
        buf.clear();
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        written += 1;
    }
    w.flush()?;
    if written != row_count {
        return Err(EmbedError::BadDump(format!("header says {row_count} rows, wrote {written}")));
    }
    Ok(())
}

/// Reads a dump written by [`write_dump`]; returns `(dim, rows)`.
pub fn read_dump<R: Read>(mut r: R) -> Result<(usize, Vec<Vec<f32>>), EmbedError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if header[..4] != DUMP_MAGIC {
        return Err(EmbedError::BadDump("bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
    let version = field(4);
    if version != DUMP_VERSION as usize {
        return Err(EmbedError::BadDump(format!("unsupported version {version}")));
    }
    let (rows, dim) = (field(8), field(12));
    let mut buf = vec![0u8; dim * 4];
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        r.read_exact(&mut buf)?;
        out.push(buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect());
    }
    Ok((dim, out))
}
