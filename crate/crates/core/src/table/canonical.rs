use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::infer::parse_date;
use super::{ColumnKind, Schema, Table};
use crate::numeric::{format_scientific, parse_scientific};

/// The strings that delimit cells and rows in serialized text. Canonical cell
/// text never contains either of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Separators {
    pub cell: String,
    pub row: String,
}

impl Default for Separators {
    fn default() -> Self {
        Self { cell: " | ".to_string(), row: "\n".to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalCell {
    pub text: String,
    pub is_missing: bool,
}

impl CanonicalCell {
    pub fn missing() -> Self {
        Self { text: String::new(), is_missing: true }
    }

    pub fn present(text: impl Into<String>) -> Self {
        let text = text.into();
        let is_missing = text.is_empty();
        Self { text, is_missing }
    }
}

/// Canonicalizes one cell. The second value is true when a Numeric or Date
/// cell failed to parse and was canonicalized as text instead.
pub fn canonicalize_cell(raw: Option<&str>, kind: ColumnKind, seps: &Separators) -> (CanonicalCell, bool) {
    let Some(raw) = raw else {
        return (CanonicalCell::missing(), false);
    };
    if raw.trim().is_empty() {
        return (CanonicalCell::missing(), false);
    }
    match kind {
        ColumnKind::Numeric => match parse_scientific(raw).ok().and_then(|v| format_scientific(v).ok()) {
            Some(text) => (CanonicalCell::present(text), false),
            None => (CanonicalCell::present(canonicalize_text(raw, seps)), true),
        },
        ColumnKind::Date => match canonicalize_date(raw) {
            Some(text) => (CanonicalCell::present(text), false),
            None => (CanonicalCell::present(canonicalize_text(raw, seps)), true),
        },
        ColumnKind::Text => (CanonicalCell::present(canonicalize_text(raw, seps)), false),
    }
}

/// `YYYY-MM-DD` for plain dates, `YYYY-MM-DDTHH:MM:SS` when a time is present.
pub fn canonicalize_date(raw: &str) -> Option<String> {
    let t = raw.trim();
    if let Ok(d) = chrono::NaiveDate::parse_from_str(t, "%Y-%m-%d") {
        return Some(d.format("%Y-%m-%d").to_string());
    }
    parse_date(t).map(|dt| dt.format("%Y-%m-%dT%H:%M:%S").to_string())
}

/// NFC-normalizes, replaces line breaks and separator strings by spaces, and
/// trims. Trailing characters that would combine with a following separator
/// into a spurious separator match are dropped.
pub fn canonicalize_text(raw: &str, seps: &Separators) -> String {
    let mut s: String = raw.nfc().collect();
    s = s.replace("\r\n", " ").replace(['\r', '\n'], " ");
    for sep in [&seps.cell, &seps.row] {
        if sep.is_empty() || sep == " " {
            continue;
        }
        while s.contains(sep.as_str()) {
            s = s.replace(sep.as_str(), " ");
        }
    }
    let mut s = s.trim().to_string();
    while !s.is_empty() && (straddles(&s, &seps.cell) || straddles(&s, &seps.row)) {
        s.pop();
        s.truncate(s.trim_end().len());
    }
    s
}

// True when `cell + sep` contains `sep` starting inside `cell`.
fn straddles(cell: &str, sep: &str) -> bool {
    if sep.len() < 2 {
        return false;
    }
    let joined = format!("{cell}{sep}");
    joined.find(sep).is_some_and(|p| p < cell.len())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub name: String,
    pub kind: Option<ColumnKind>,
    pub missing: usize,
    pub coerced: usize,
}

/// Per-column counts of missing cells and cells coerced to text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestionReport {
    pub rows: usize,
    pub columns: Vec<ColumnReport>,
}

impl IngestionReport {
    pub fn total_coerced(&self) -> usize {
        self.columns.iter().map(|c| c.coerced).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTable {
    pub schema: Schema,
    pub rows: Vec<Vec<CanonicalCell>>,
    pub report: IngestionReport,
}

impl CanonicalTable {
    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn target_index(&self) -> Option<usize> {
        self.schema.target_index
    }

    pub fn select_rows(&self, indices: &[usize]) -> CanonicalTable {
        CanonicalTable {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            report: self.report.clone(),
        }
    }
}

const CHUNK_ROWS: usize = 4096;

/// Canonicalizes every cell. Chunks of rows are processed in parallel and
/// reassembled in source order.
pub fn canonicalize_table(table: &Table, seps: &Separators) -> CanonicalTable {
    let kinds: Vec<ColumnKind> = table.schema.columns.iter().map(|c| c.kind).collect();
    let chunks: Vec<(Vec<Vec<CanonicalCell>>, Vec<(usize, usize)>)> = table
        .rows
        .par_chunks(CHUNK_ROWS)
        .map(|chunk| {
            let mut counts = vec![(0usize, 0usize); kinds.len()];
            let rows = chunk
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&kinds)
                        .enumerate()
                        .map(|(j, (cell, &kind))| {
                            let (c, coerced) = canonicalize_cell(cell.as_deref(), kind, seps);
                            counts[j].0 += usize::from(c.is_missing);
                            counts[j].1 += usize::from(coerced);
                            c
                        })
                        .collect()
                })
                .collect();
            (rows, counts)
        })
        .collect();

    let mut columns: Vec<ColumnReport> = table
        .schema
        .columns
        .iter()
        .map(|c| ColumnReport { name: c.name.clone(), kind: Some(c.kind), ..Default::default() })
        .collect();
    let mut rows = Vec::with_capacity(table.rows.len());
    for (chunk_rows, counts) in chunks {
        rows.extend(chunk_rows);
        for (col, (missing, coerced)) in columns.iter_mut().zip(counts) {
            col.missing += missing;
            col.coerced += coerced;
        }
    }
    CanonicalTable {
        schema: table.schema.clone(),
        report: IngestionReport { rows: rows.len(), columns },
        rows,
    }
}
