//! Linear text serialization of canonical rows.
//!
//! A row is its cell texts joined by the cell separator and closed by the row
//! terminator. The target column is moved to the end (by default) so that a
//! prompt can stop right where the target value begins. No natural-language
//! instruction is ever added.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{canonicalize_text, CanonicalCell, CanonicalTable, Schema, Separators};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SerializeError {
    #[error("invalid serialization config: {0}")]
    InvalidConfig(String),
    #[error("budget exhausted by query")]
    BudgetExhausted,
    #[error("target column {0:?} not found")]
    UnknownTarget(String),
    #[error("no target column designated")]
    NoTarget,
    #[error("table needs at least two columns, found {0}")]
    TooFewColumns(usize),
    #[error("table has no rows")]
    EmptyTable,
    #[error("no supervision: every retained target is missing")]
    NoSupervision,
    #[error("sample size must be at least 1")]
    ZeroSample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializationConfig {
    pub cell_separator: String,
    pub row_terminator: String,
    pub include_header_row: bool,
    pub target_last: bool,
}

impl Default for SerializationConfig {
    fn default() -> Self {
        Self {
            cell_separator: " | ".to_string(),
            row_terminator: "\n".to_string(),
            include_header_row: true,
            target_last: true,
        }
    }
}

impl SerializationConfig {
    pub fn validate(&self) -> Result<(), SerializeError> {
        let (c, r) = (&self.cell_separator, &self.row_terminator);
        if c.is_empty() || r.is_empty() {
            return Err(SerializeError::InvalidConfig("separators must be non-empty".into()));
        }
        if c.contains(r.as_str()) || r.contains(c.as_str()) {
            return Err(SerializeError::InvalidConfig(
                "cell separator and row terminator must not contain each other".into(),
            ));
        }
        if c == " " || r == " " {
            return Err(SerializeError::InvalidConfig("a bare space cannot be a separator".into()));
        }
        Ok(())
    }

    pub fn separators(&self) -> Separators {
        Separators { cell: self.cell_separator.clone(), row: self.row_terminator.clone() }
    }

    /// Column positions in emission order.
    pub fn column_order(&self, n_columns: usize, target: Option<usize>) -> Vec<usize> {
        match target {
            Some(t) if self.target_last && t < n_columns => {
                (0..n_columns).filter(|&j| j != t).chain(std::iter::once(t)).collect()
            }
            _ => (0..n_columns).collect(),
        }
    }
}

/// Counts tokens for budget enforcement.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Count of the concatenation of `parts`.
    fn count_parts(&self, parts: &[&str]) -> usize {
        self.count(&parts.concat())
    }
}

/// `ceil(bytes / 3)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicCounter;

impl HeuristicCounter {
    pub fn for_bytes(bytes: usize) -> usize {
        bytes.div_ceil(3)
    }
}

impl TokenCounter for HeuristicCounter {
    fn count(&self, text: &str) -> usize {
        Self::for_bytes(text.len())
    }

    fn count_parts(&self, parts: &[&str]) -> usize {
        Self::for_bytes(parts.iter().map(|p| p.len()).sum())
    }
}

pub fn estimate_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

/// Half-open byte range into a serialized string.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedRow {
    pub text: String,
    /// Byte range of the target value; `None` when masked or no target.
    pub target_span: Option<Span>,
}

/// Serializes one canonical row.
///
/// With `mask_target` the row stops right after the separator preceding the
/// target and carries no terminator. If the target is not the last emitted
/// column, cells after it are dropped from a masked row since generation must
/// begin where the target sits.
pub fn serialize_row(
    row: &[CanonicalCell],
    target: Option<usize>,
    config: &SerializationConfig,
    mask_target: bool,
) -> SerializedRow {
    let order = config.column_order(row.len(), target);
    let mut text = String::new();
    let mut span = None;
    for (pos, &j) in order.iter().enumerate() {
        let is_target = Some(j) == target;
        if pos > 0 {
            text.push_str(&config.cell_separator);
        }
        if is_target && mask_target {
            return SerializedRow { text, target_span: None };
        }
        let start = text.len();
        text.push_str(&row[j].text);
        if is_target {
            span = Some((start, text.len()));
        }
    }
    text.push_str(&config.row_terminator);
    SerializedRow { text, target_span: span }
}

/// Column names serialized like a data row (target name last).
pub fn header_row(schema: &Schema, target: Option<usize>, config: &SerializationConfig) -> String {
    let seps = config.separators();
    let cells: Vec<CanonicalCell> =
        schema.names().map(|n| CanonicalCell::present(canonicalize_text(n, &seps))).collect();
    serialize_row(&cells, target, config, false).text
}

/// Splits one serialized line (terminator already removed) back into cells.
pub fn split_row<'a>(line: &'a str, config: &SerializationConfig) -> Vec<&'a str> {
    line.split(config.cell_separator.as_str()).collect()
}

/// A prompt's parts recovered from text produced by [`build_prompt`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt<'a> {
    pub header: Option<Vec<&'a str>>,
    pub exemplars: Vec<Vec<&'a str>>,
    /// Cells preceding the empty target.
    pub query: Vec<&'a str>,
}

pub fn parse_prompt<'a>(text: &'a str, config: &SerializationConfig) -> ParsedPrompt<'a> {
    let mut lines: Vec<&str> = text.split(config.row_terminator.as_str()).collect();
    let query_line = lines.pop().unwrap_or_default();
    let mut query = split_row(query_line, config);
    // the masked query ends with a separator, leaving an empty final piece
    if query.last() == Some(&"") {
        query.pop();
    }
    let mut rows = lines.into_iter();
    let header = if config.include_header_row { rows.next().map(|l| split_row(l, config)) } else { None };
    ParsedPrompt { header, exemplars: rows.map(|l| split_row(l, config)).collect(), query }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    /// Byte offset at which the model's continuation begins (== text length).
    pub query_target_offset: usize,
    pub stop_sequence: String,
    pub exemplar_count: usize,
    /// Positions (into the exemplar slice given to [`build_prompt`]) of the
    /// exemplars that made it in, most similar first.
    pub included: Vec<usize>,
}

/// Assembles header, exemplars and the masked query under `token_budget`.
///
/// `exemplars` must be ordered by descending similarity. They are admitted
/// greedily from the front until the next one would overflow the budget, then
/// emitted in ascending similarity so the closest rows sit next to the query.
/// Exemplars with a missing target are passed over.
pub fn build_prompt<R: AsRef<[CanonicalCell]>>(
    exemplars: &[R],
    query: &[CanonicalCell],
    schema: &Schema,
    config: &SerializationConfig,
    token_budget: usize,
    counter: &dyn TokenCounter,
) -> Result<Prompt, SerializeError> {
    config.validate()?;
    let target = schema.target_index.ok_or(SerializeError::NoTarget)?;
    let header = if config.include_header_row { header_row(schema, Some(target), config) } else { String::new() };
    let query_text = serialize_row(query, Some(target), config, true).text;

    if counter.count_parts(&[&header, &query_text]) > token_budget {
        return Err(SerializeError::BudgetExhausted);
    }

    let mut rows: Vec<String> = Vec::new();
    let mut included = Vec::new();
    for (i, ex) in exemplars.iter().enumerate() {
        let ex = ex.as_ref();
        if ex.get(target).is_none_or(|c| c.is_missing) {
            continue;
        }
        let row = serialize_row(ex, Some(target), config, false).text;
        let mut parts: Vec<&str> = Vec::with_capacity(rows.len() + 3);
        parts.push(&header);
        parts.push(&row);
        parts.extend(rows.iter().rev().map(String::as_str));
        parts.push(&query_text);
        if counter.count_parts(&parts) > token_budget {
            break;
        }
        rows.push(row);
        included.push(i);
    }

    let mut text = header;
    for row in rows.iter().rev() {
        text.push_str(row);
    }
    text.push_str(&query_text);
    Ok(Prompt {
        query_target_offset: text.len(),
        text,
        stop_sequence: config.row_terminator.clone(),
        exemplar_count: included.len(),
        included,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub text: String,
    pub target_spans: Vec<Span>,
    pub table_id: String,
    pub target_column: String,
}

impl TrainingExample {
    pub fn target_texts(&self) -> impl Iterator<Item = &str> {
        self.target_spans.iter().map(|&(s, e)| &self.text[s..e])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingOptions {
    pub sample_size: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self { sample_size: 256, max_tokens: 16_384, seed: 0 }
    }
}

/// Statistics about one built example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainingStats {
    pub sampled_rows: usize,
    pub retained_rows: usize,
}

impl TrainingStats {
    pub fn truncated(&self) -> bool {
        self.retained_rows < self.sampled_rows
    }
}

/// Samples rows uniformly, serializes them with visible targets and records
/// the byte span of every non-missing target value.
///
/// Whole trailing rows are dropped until the text fits `max_tokens`.
pub fn build_training_example(
    table: &CanonicalTable,
    table_id: &str,
    target_column: &str,
    opts: &TrainingOptions,
    config: &SerializationConfig,
    counter: &dyn TokenCounter,
) -> Result<(TrainingExample, TrainingStats), SerializeError> {
    config.validate()?;
    if opts.sample_size == 0 {
        return Err(SerializeError::ZeroSample);
    }
    let n_cols = table.schema.len();
    if n_cols < 2 {
        return Err(SerializeError::TooFewColumns(n_cols));
    }
    if table.rows.is_empty() {
        return Err(SerializeError::EmptyTable);
    }
    let target = table
        .schema
        .position(target_column)
        .ok_or_else(|| SerializeError::UnknownTarget(target_column.to_string()))?;

    let n = table.rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked = sample(&mut rng, n, opts.sample_size.min(n)).into_vec();
    picked.sort_unstable();

    let mut text = if config.include_header_row { header_row(&table.schema, Some(target), config) } else { String::new() };
    let mut spans = Vec::new();
    let mut retained = 0usize;
    for &i in &picked {
        let row = &table.rows[i];
        let ser = serialize_row(row, Some(target), config, false);
        if counter.count_parts(&[&text, &ser.text]) > opts.max_tokens {
            break;
        }
        if !row[target].is_missing {
            let (s, e) = ser.target_span.expect("visible target always has a span");
            spans.push((text.len() + s, text.len() + e));
        }
        text.push_str(&ser.text);
        retained += 1;
    }
    if spans.is_empty() {
        return Err(SerializeError::NoSupervision);
    }
    Ok((
        TrainingExample {
            text,
            target_spans: spans,
            table_id: table_id.to_string(),
            target_column: table.schema.columns[target].name.clone(),
        },
        TrainingStats { sampled_rows: picked.len(), retained_rows: retained },
    ))
}
