use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{check_names, Column, ColumnKind, RawTable, Schema, TableError};
use crate::numeric::is_numeric;

pub const DEFAULT_MISSING_MARKERS: &[&str] = &["", "NA", "N/A", "null", "NaN"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Fraction of non-missing cells that must parse for a column to take a kind.
    pub numeric_threshold: f64,
    /// Compared case-insensitively after trimming.
    pub missing_markers: Vec<String>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            numeric_threshold: 0.9,
            missing_markers: DEFAULT_MISSING_MARKERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl InferenceConfig {
    pub fn is_missing(&self, raw: &str) -> bool {
        let t = raw.trim();
        t.is_empty() || self.missing_markers.iter().any(|m| m.trim().eq_ignore_ascii_case(t))
    }

    pub fn validate(&self) -> Result<(), TableError> {
        let t = self.numeric_threshold;
        if !(t > 0.5 && t <= 1.0) {
            return Err(TableError::BadThreshold(t));
        }
        Ok(())
    }
}

/// Parses ISO-8601 dates and datetimes, plus `YYYY-MM-DD HH:MM[:SS]`.
///
/// Offsets are converted to UTC and dropped.
pub fn parse_date(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if s.len() < 10 {
        return None;
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    const FORMATS: &[&str] = &[
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
    ];
    for fmt in FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|dt| dt.naive_utc())
}

/// Infers column kinds and nullability.
///
/// Cells are expected to already have missing markers mapped to `None`
/// (see [`super::read_csv`]); markers still present as strings are also
/// treated as missing.
pub fn infer_schema(raw: &RawTable, config: &InferenceConfig) -> Result<Schema, TableError> {
    config.validate()?;
    if raw.rows.is_empty() {
        return Err(TableError::NoRows);
    }
    check_names(&raw.headers)?;

    let columns = raw
        .headers
        .iter()
        .enumerate()
        .map(|(idx, name)| {
            let mut present = 0usize;
            let mut numeric = 0usize;
            let mut dates = 0usize;
            let mut nullable = false;
            for cell in raw.column(idx) {
                match cell {
                    Some(v) if !config.is_missing(v) => {
                        present += 1;
                        if is_numeric(v) {
                            numeric += 1;
                        } else if parse_date(v).is_some() {
                            dates += 1;
                        }
                    }
                    _ => nullable = true,
                }
            }
            let meets = |count: usize| present > 0 && count as f64 >= config.numeric_threshold * present as f64;
            let kind = if meets(numeric) {
                ColumnKind::Numeric
            } else if meets(dates) {
                ColumnKind::Date
            } else {
                ColumnKind::Text
            };
            Column { name: name.trim().to_string(), kind, nullable }
        })
        .collect();

    Ok(Schema { columns, target_index: None })
}
