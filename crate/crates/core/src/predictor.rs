//! Retrieve, serialize, generate and decode for one query row at a time.

use std::collections::{BTreeSet, HashSet};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backend::{Backend, BackendCounter, BackendError, FinishReason, GenerationRequest};
use crate::embedder::{embed_row, EmbedderConfig, RowEmbedding};
use crate::index::{IndexError, RowId, StorageKind, VectorIndex, DEFAULT_K};
use crate::numeric::{format_scientific, parse_scientific};
use crate::serializer::{build_prompt, SerializationConfig, SerializeError};
use crate::table::{CanonicalCell, CanonicalTable, TableError};

pub const DEFAULT_TOKEN_BUDGET: usize = 128_000;
pub const MIN_TOKEN_BUDGET: usize = 1024;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("backend error ({detail}) for prompt of {prompt_bytes} bytes with {exemplar_count} exemplars")]
    Backend { detail: String, prompt_bytes: usize, exemplar_count: usize, source: Option<BackendError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodePath {
    Exact,
    Normalized,
    Fallback,
}

/// Training data and settings for one prediction problem.
#[derive(Debug, Clone)]
pub struct PredictionTask {
    /// Canonical training rows; `schema.target_index` is set.
    pub train: CanonicalTable,
    pub target_column: String,
    pub task_kind: TaskKind,
    /// Distinct non-missing training targets (classification only).
    pub label_vocabulary: BTreeSet<String>,
    pub k: usize,
    pub token_budget: usize,
}

impl PredictionTask {
    pub fn new(
        mut train: CanonicalTable,
        target_column: &str,
        task_kind: TaskKind,
        k: usize,
        token_budget: usize,
    ) -> Result<Self, PredictError> {
        let target = train.schema.set_target(target_column)?;
        if token_budget < MIN_TOKEN_BUDGET {
            return Err(PredictError::InvalidTask(format!(
                "token_budget must be at least {MIN_TOKEN_BUDGET}, got {token_budget}"
            )));
        }
        let label_vocabulary: BTreeSet<String> = match task_kind {
            TaskKind::Classification => {
                train.rows.iter().map(|r| &r[target]).filter(|c| !c.is_missing).map(|c| c.text.clone()).collect()
            }
            TaskKind::Regression => BTreeSet::new(),
        };
        if task_kind == TaskKind::Classification && label_vocabulary.is_empty() {
            return Err(PredictError::InvalidTask("no labelled training rows".into()));
        }
        Ok(Self {
            target_column: train.schema.columns[target].name.clone(),
            train,
            task_kind,
            label_vocabulary,
            k,
            token_budget,
        })
    }

    pub fn with_defaults(train: CanonicalTable, target_column: &str, task_kind: TaskKind) -> Result<Self, PredictError> {
        Self::new(train, target_column, task_kind, DEFAULT_K, DEFAULT_TOKEN_BUDGET)
    }

    pub fn target_index(&self) -> usize {
        self.train.schema.target_index.expect("set in PredictionTask::new")
    }

    fn targets(&self) -> impl Iterator<Item = &CanonicalCell> {
        let t = self.target_index();
        self.train.rows.iter().map(move |r| &r[t])
    }

    /// Most frequent training label; ties go to the first seen.
    pub fn majority_label(&self) -> Option<String> {
        let labels: Vec<&str> = self.targets().filter(|c| !c.is_missing).map(|c| c.text.as_str()).collect();
        (!labels.is_empty()).then(|| crate::backend::majority_label(&labels).to_string())
    }

    pub fn train_mean(&self) -> Option<f64> {
        mean(self.targets().filter(|c| !c.is_missing).filter_map(|c| parse_scientific(&c.text).ok()))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub value: String,
    pub numeric_value: Option<f64>,
    pub decode_path: DecodePath,
    pub exemplars_used: usize,
    pub raw_generation: String,
    pub latency_ms: u64,
}

/// One JSON-lines record of batch output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: u64,
    pub value: String,
    pub numeric_value: Option<f64>,
    pub decode_path: DecodePath,
    pub exemplars_used: usize,
    pub latency_ms: u64,
}

impl PredictionRecord {
    pub fn new(query_id: u64, p: &Prediction) -> Self {
        Self {
            query_id,
            value: p.value.clone(),
            numeric_value: p.numeric_value,
            decode_path: p.decode_path,
            exemplars_used: p.exemplars_used,
            latency_ms: p.latency_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub serialization: SerializationConfig,
    pub embedder: EmbedderConfig,
    pub storage: StorageKind,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            serialization: SerializationConfig::default(),
            embedder: EmbedderConfig::default(),
            storage: StorageKind::Dense,
            max_new_tokens: 32,
            temperature: 0.0,
        }
    }
}

/// Indexes every training row with a non-missing target, keyed by its
/// position. The target slot is blanked so labels never influence retrieval.
pub fn build_train_index(
    train: &CanonicalTable,
    embedder: &EmbedderConfig,
    storage: StorageKind,
) -> Result<VectorIndex, PredictError> {
    embedder.validate().map_err(|e| PredictError::InvalidTask(e.to_string()))?;
    let target = train.schema.target_index;
    let dim = embedder.row_dim(train.schema.len());
    let rows: Vec<(RowId, RowEmbedding)> = train
        .rows
        .par_iter()
        .enumerate()
        .filter(|(_, r)| target.is_none_or(|t| !r[t].is_missing))
        .map(|(i, r)| {
            let texts: Vec<&str> = r.iter().map(|c| c.text.as_str()).collect();
            (i as RowId, embed_row(&texts, target, embedder))
        })
        .collect();
    Ok(VectorIndex::build(dim, storage, rows)?)
}

pub struct Predictor {
    task: PredictionTask,
    config: PredictorConfig,
    index: VectorIndex,
    majority: String,
    train_mean: f64,
}

impl Predictor {
    pub fn new(task: PredictionTask, config: PredictorConfig) -> Result<Self, PredictError> {
        let index = build_train_index(&task.train, &config.embedder, config.storage)?;
        Self::with_index(task, config, index)
    }

    /// Uses an index built elsewhere over `task.train` (row ids are row positions).
    pub fn with_index(task: PredictionTask, config: PredictorConfig, index: VectorIndex) -> Result<Self, PredictError> {
        config.serialization.validate()?;
        let expected = config.embedder.row_dim(task.train.schema.len());
        if index.dim() != expected {
            return Err(IndexError::DimensionMismatch { expected, found: index.dim() }.into());
        }
        let majority = task.majority_label().unwrap_or_default();
        let train_mean = task.train_mean().unwrap_or(0.0);
        Ok(Self { task, config, index, majority, train_mean })
    }

    pub fn task(&self) -> &PredictionTask {
        &self.task
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    /// Predicts the target of `query`. When `query_id` names an indexed
    /// training row, that row is excluded from its own exemplars.
    pub fn predict_one(
        &self,
        query: &[CanonicalCell],
        query_id: Option<RowId>,
        backend: &dyn Backend,
    ) -> Result<Prediction, PredictError> {
        self.predict_with_k(query, query_id, self.task.k, backend)
    }

    pub fn predict_with_k(
        &self,
        query: &[CanonicalCell],
        query_id: Option<RowId>,
        k: usize,
        backend: &dyn Backend,
    ) -> Result<Prediction, PredictError> {
        let target = self.task.target_index();
        if query.len() != self.task.train.schema.len() {
            return Err(PredictError::InvalidTask(format!(
                "query has {} cells, schema has {}",
                query.len(),
                self.task.train.schema.len()
            )));
        }

        let neighbors = if k == 0 {
            Vec::new()
        } else {
            if self.index.is_empty() {
                warn!("retrieval index is empty, predicting zero-shot");
            }
            let texts: Vec<&str> = query.iter().map(|c| c.text.as_str()).collect();
            let q = embed_row(&texts, Some(target), &self.config.embedder);
            let exclude: Option<HashSet<RowId>> = query_id.map(|id| HashSet::from([id]));
            self.index.query(&q.values, k, exclude.as_ref())?
        };
        let exemplars: Vec<&[CanonicalCell]> =
            neighbors.iter().map(|n| self.task.train.rows[n.row_id as usize].as_slice()).collect();

        let prompt = build_prompt(
            &exemplars,
            query,
            &self.task.train.schema,
            &self.config.serialization,
            self.task.token_budget,
            &BackendCounter(backend),
        )?;
        let request = GenerationRequest {
            prompt: prompt.text,
            stop_sequence: prompt.stop_sequence,
            max_new_tokens: self.config.max_new_tokens,
            temperature: self.config.temperature,
        };
        let backend_err = |detail: String, source: Option<BackendError>| PredictError::Backend {
            detail,
            prompt_bytes: prompt.query_target_offset,
            exemplar_count: prompt.exemplar_count,
            source,
        };
        let result = backend.generate(&request).map_err(|e| backend_err(e.to_string(), Some(e)))?;
        if result.finish_reason == FinishReason::Error {
            return Err(backend_err(result.detail.unwrap_or_else(|| "generation failed".into()), None));
        }

        let (value, numeric_value, decode_path) = match self.task.task_kind {
            TaskKind::Classification => {
                let (label, path) = decode_classification(&result.text, &self.task.label_vocabulary, &self.majority);
                (label, None, path)
            }
            TaskKind::Regression => {
                let fallback = mean(
                    prompt
                        .included
                        .iter()
                        .filter_map(|&i| parse_scientific(&exemplars[i][target].text).ok()),
                )
                .unwrap_or(self.train_mean);
                let (v, path) = decode_regression(&result.text, fallback);
                let text = format_scientific(v).expect("decoded values are finite");
                (text, Some(v), path)
            }
        };
        Ok(Prediction {
            value,
            numeric_value,
            decode_path,
            exemplars_used: prompt.exemplar_count,
            raw_generation: result.text,
            latency_ms: result.latency_ms,
        })
    }

    /// Predicts many queries concurrently, bounded by `workers` and the
    /// backend's own ceiling. Output order follows `queries`.
    pub fn predict_batch(
        &self,
        queries: &[Vec<CanonicalCell>],
        query_ids: Option<&[RowId]>,
        k: usize,
        backend: &dyn Backend,
        workers: usize,
    ) -> Vec<Result<Prediction, PredictError>> {
        let threads = workers.min(backend.max_concurrency()).max(1);
        let run = || {
            queries
                .par_iter()
                .enumerate()
                .map(|(i, q)| self.predict_with_k(q, query_ids.map(|ids| ids[i]), k, backend))
                .collect()
        };
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        }
    }
}

fn first_line(raw: &str) -> &str {
    raw.split('\n').next().unwrap_or_default().trim()
}

fn normalize_label(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Maps a generation onto the closed label set.
///
/// Tries an exact match of the trimmed first line, then a case- and
/// whitespace-insensitive match (numeric answers are compared in canonical
/// form), then a unique prefix match; otherwise returns `majority`.
pub fn decode_classification(raw: &str, vocabulary: &BTreeSet<String>, majority: &str) -> (String, DecodePath) {
    let line = first_line(raw);
    if vocabulary.contains(line) {
        return (line.to_string(), DecodePath::Exact);
    }
    let norm = normalize_label(line);
    if !norm.is_empty() {
        if let Some(l) = vocabulary.iter().find(|l| normalize_label(l) == norm) {
            return (l.clone(), DecodePath::Normalized);
        }
        if let Some(canon) = parse_scientific(line).ok().and_then(|v| format_scientific(v).ok()) {
            if vocabulary.contains(&canon) {
                return (canon, DecodePath::Normalized);
            }
        }
        let mut prefixed = vocabulary.iter().filter(|l| {
            let nl = normalize_label(l);
            !nl.is_empty() && (nl.starts_with(&norm) || norm.starts_with(&nl))
        });
        if let (Some(l), None) = (prefixed.next(), prefixed.next()) {
            return (l.clone(), DecodePath::Normalized);
        }
    }
    let fallback = if vocabulary.contains(majority) {
        majority.to_string()
    } else {
        vocabulary.iter().next().cloned().unwrap_or_default()
    };
    (fallback, DecodePath::Fallback)
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?").expect("valid regex"));

/// Parses a numeric generation: the first token of the first line, else the
/// first number found anywhere on that line, else `fallback`.
pub fn decode_regression(raw: &str, fallback: f64) -> (f64, DecodePath) {
    let line = first_line(raw);
    if let Some(v) = line.split_whitespace().next().and_then(|t| parse_scientific(t).ok()) {
        return (v, DecodePath::Exact);
    }
    if let Some(v) = NUMBER.find_iter(line).find_map(|m| parse_scientific(m.as_str()).ok()) {
        return (v, DecodePath::Normalized);
    }
    (fallback, DecodePath::Fallback)
}
