//! Tabular ingestion: schema inference, CSV reading and cell canonicalization.

mod canonical;
mod infer;
mod reader;

pub use canonical::{
    canonicalize_cell, canonicalize_date, canonicalize_table, canonicalize_text, CanonicalCell,
    CanonicalTable, IngestionReport, Separators,
};
pub use infer::{infer_schema, parse_date, InferenceConfig, DEFAULT_MISSING_MARKERS};
pub use reader::{read_csv, read_csv_str, CsvOptions};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("no rows")]
    NoRows,
    #[error("duplicate column name: {0:?}")]
    DuplicateColumn(String),
    #[error("empty column name at position {0}")]
    EmptyColumnName(usize),
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("unknown column: {0:?}")]
    UnknownColumn(String),
    #[error("target index {0} out of range")]
    TargetOutOfRange(usize),
    #[error("numeric threshold must lie in (0.5, 1.0], got {0}")]
    BadThreshold(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Text,
    Date,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
    pub target_index: Option<usize>,
}

impl Schema {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        let name = name.trim();
        self.columns.iter().position(|c| c.name == name)
    }

    /// Designates `name` as the prediction target.
    pub fn set_target(&mut self, name: &str) -> Result<usize, TableError> {
        let idx = self
            .position(name)
            .ok_or_else(|| TableError::UnknownColumn(name.to_string()))?;
        self.target_index = Some(idx);
        Ok(idx)
    }

    pub fn with_target_index(mut self, idx: Option<usize>) -> Result<Self, TableError> {
        if let Some(i) = idx {
            if i >= self.columns.len() {
                return Err(TableError::TargetOutOfRange(i));
            }
        }
        self.target_index = idx;
        Ok(self)
    }
}

/// A cell as read from the source; `None` marks a missing value.
pub type RawRow = Vec<Option<String>>;

/// Rows and header names before any kinds have been inferred.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<RawRow>,
}

impl RawTable {
    pub fn new(headers: Vec<String>, rows: Vec<RawRow>) -> Result<Self, TableError> {
        let headers: Vec<String> = headers.into_iter().map(|h| h.trim().to_string()).collect();
        check_names(&headers)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != headers.len() {
                return Err(TableError::RaggedRow { row: i, found: row.len(), expected: headers.len() });
            }
        }
        Ok(Self { headers, rows })
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = Option<&str>> {
        self.rows.iter().map(move |r| r[idx].as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<RawRow>,
}

impl Table {
    pub fn new(schema: Schema, rows: Vec<RawRow>) -> Result<Self, TableError> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(TableError::RaggedRow { row: i, found: row.len(), expected: schema.len() });
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Returns a table holding only the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

pub(crate) fn check_names(names: &[String]) -> Result<(), TableError> {
    let mut seen = std::collections::HashSet::new();
    for (i, name) in names.iter().enumerate() {
        let name = name.trim();
        if name.is_empty() {
            return Err(TableError::EmptyColumnName(i));
        }
        if !seen.insert(name) {
            return Err(TableError::DuplicateColumn(name.to_string()));
        }
    }
    Ok(())
}
