//! Metrics, seeded splits, train-subset and context-size sweeps, and mean
//! ranks across datasets.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backend::Backend;
use crate::numeric::parse_scientific;
use crate::predictor::{PredictError, Prediction, PredictionTask, Predictor, PredictorConfig, TaskKind};
use crate::table::CanonicalTable;

pub const DEFAULT_CLIP_FLOOR: f64 = -10.0;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const REGRESSION_STRATA: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {predictions} predictions, {truth} truth values")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("need at least {needed} examples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degenerate target: truth has zero variance")]
    DegenerateTarget,
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("missing score for model {model:?} on dataset {dataset:?}")]
    MissingScore { model: String, dataset: String },
    #[error("invalid sweep spec: {0}")]
    InvalidSpec(String),
    #[error("test split has no labelled rows")]
    NoTestRows,
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of positions where the labels are identical strings.
pub fn accuracy<S: AsRef<str>>(predictions: &[S], truth: &[S]) -> Result<f64, EvalError> {
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), truth: truth.len() });
    }
    if truth.is_empty() {
        return Err(EvalError::TooFew { needed: 1, got: 0 });
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p.as_ref() == t.as_ref()).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Coefficient of determination and the same value floored at `clip_floor`.
pub fn r2(predictions: &[f64], truth: &[f64], clip_floor: f64) -> Result<(f64, f64), EvalError> {
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), truth: truth.len() });
    }
    if truth.len() < 2 {
        return Err(EvalError::TooFew { needed: 2, got: truth.len() });
    }
    if let Some(i) = predictions.iter().chain(truth).position(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite(i % truth.len()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::DegenerateTarget);
    }
    let ss_res: f64 = truth.iter().zip(predictions).map(|(y, p)| (y - p).powi(2)).sum();
    let raw = 1.0 - ss_res / ss_tot;
    Ok((raw, raw.max(clip_floor)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Accuracy,
    R2,
}

impl MetricName {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => Self::Accuracy,
            TaskKind::Regression => Self::R2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainSubset,
    ContextK,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.values.is_empty() {
            return Err(EvalError::InvalidSpec("values must not be empty".into()));
        }
        if self.values[0] == 0 {
            return Err(EvalError::InvalidSpec("values must be positive".into()));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidSpec("values must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub dataset_id: String,
    pub model: String,
    pub task_kind: TaskKind,
    pub metric_name: MetricName,
    pub score: f64,
    pub clipped_score: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_columns: usize,
    pub axis: Option<SweepAxis>,
    pub axis_value: Option<usize>,
    pub seed: u64,
    /// Requested subsample size exceeded the training rows available.
    pub capped: bool,
}

/// A dataset ready for evaluation: canonical train and test tables sharing
/// one schema with the target set.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub dataset_id: String,
    pub task_kind: TaskKind,
    pub train: CanonicalTable,
    pub test: CanonicalTable,
}

impl EvalData {
    pub fn target_column(&self) -> &str {
        let t = self.train.target_index().expect("target set");
        &self.train.schema.columns[t].name
    }

    fn labelled_test(&self) -> Result<(Vec<usize>, Vec<String>), EvalError> {
        let t = self.test.target_index().expect("target set");
        let (idx, truth): (Vec<usize>, Vec<String>) = self
            .test
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r[t].is_missing)
            .map(|(i, r)| (i, r[t].text.clone()))
            .unzip();
        if idx.is_empty() {
            return Err(EvalError::NoTestRows);
        }
        Ok((idx, truth))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub model: String,
    pub predictor: PredictorConfig,
    pub k: usize,
    pub token_budget: usize,
    pub clip_floor: f64,
    pub workers: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            model: "rowcast".into(),
            predictor: PredictorConfig::default(),
            k: crate::index::DEFAULT_K,
            token_budget: crate::predictor::DEFAULT_TOKEN_BUDGET,
            clip_floor: DEFAULT_CLIP_FLOOR,
            workers: 1,
            seed: 0,
        }
    }
}

/// Scores predictions against canonical truth strings. Returns (raw, clipped).
pub fn score_predictions(
    kind: TaskKind,
    predictions: &[Prediction],
    truth: &[String],
    clip_floor: f64,
) -> Result<(f64, f64), EvalError> {
    match kind {
        TaskKind::Classification => {
            let labels: Vec<&str> = predictions.iter().map(|p| p.value.as_str()).collect();
            let truth: Vec<&str> = truth.iter().map(String::as_str).collect();
            let acc = accuracy(&labels, &truth)?;
            Ok((acc, acc))
        }
        TaskKind::Regression => {
            let preds: Vec<f64> =
                predictions.iter().map(|p| p.numeric_value.unwrap_or_else(|| parse_num(&p.value))).collect();
            let truth: Vec<f64> = truth.iter().map(|t| parse_num(t)).collect();
            r2(&preds, &truth, clip_floor)
        }
    }
}

fn parse_num(s: &str) -> f64 {
    parse_scientific(s).unwrap_or(f64::NAN)
}

fn evaluate_with(
    data: &EvalData,
    predictor: &Predictor,
    k: usize,
    settings: &EvalSettings,
    backend: &dyn Backend,
) -> Result<(f64, f64, usize), EvalError> {
    let (idx, truth) = data.labelled_test()?;
    let queries: Vec<_> = idx.iter().map(|&i| data.test.rows[i].clone()).collect();
    let predictions = predictor
        .predict_batch(&queries, None, k, backend, settings.workers)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let (raw, clipped) = score_predictions(data.task_kind, &predictions, &truth, settings.clip_floor)?;
    Ok((raw, clipped, truth.len()))
}

fn make_predictor(train: CanonicalTable, data: &EvalData, settings: &EvalSettings) -> Result<Predictor, EvalError> {
    let target = data.target_column().to_string();
    let task = PredictionTask::new(train, &target, data.task_kind, settings.k, settings.token_budget)?;
    Ok(Predictor::new(task, settings.predictor.clone())?)
}

fn result(
    data: &EvalData,
    settings: &EvalSettings,
    (raw, clipped, n_test): (f64, f64, usize),
    n_train: usize,
    axis: Option<(SweepAxis, usize, u64)>,
    capped: bool,
) -> TaskResult {
    TaskResult {
        dataset_id: data.dataset_id.clone(),
        model: settings.model.clone(),
        task_kind: data.task_kind,
        metric_name: MetricName::for_task(data.task_kind),
        score: raw,
        clipped_score: clipped,
        n_train,
        n_test,
        n_columns: data.train.schema.len(),
        axis: axis.map(|a| a.0),
        axis_value: axis.map(|a| a.1),
        seed: axis.map_or(settings.seed, |a| a.2),
        capped,
    }
}

/// Evaluates the test split once with the full training pool.
pub fn evaluate(data: &EvalData, settings: &EvalSettings, backend: &dyn Backend) -> Result<TaskResult, EvalError> {
    let predictor = make_predictor(data.train.clone(), data, settings)?;
    let scored = evaluate_with(data, &predictor, settings.k, settings, backend)?;
    Ok(result(data, settings, scored, data.train.row_count(), None, false))
}

/// Seeded permutation of `0..n`. Prefixes of one permutation give nested
/// subsamples.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// For each size, retrieves only from a seeded subsample of the training
/// rows. Sizes above the training row count use every row and are marked
/// `capped`.
pub fn run_subsample_sweep(
    data: &EvalData,
    spec: &SweepSpec,
    settings: &EvalSettings,
    backend: &dyn Backend,
) -> Result<Vec<TaskResult>, EvalError> {
    spec.validate()?;
    if spec.axis != SweepAxis::TrainSubset {
        return Err(EvalError::InvalidSpec("expected axis train_subset".into()));
    }
    let n = data.train.row_count();
    let perm = seeded_permutation(n, spec.seed);
    let mut out = Vec::with_capacity(spec.values.len());
    for &size in &spec.values {
        let capped = size > n;
        if capped {
            warn!(dataset = %data.dataset_id, requested = size, available = n, "subsample size capped");
        }
        let mut rows: Vec<usize> = perm[..size.min(n)].to_vec();
        rows.sort_unstable();
        let predictor = make_predictor(data.train.select_rows(&rows), data, settings)?;
        let scored = evaluate_with(data, &predictor, settings.k, settings, backend)?;
        info!(dataset = %data.dataset_id, size, score = scored.0, "subsample point done");
        out.push(result(data, settings, scored, rows.len(), Some((SweepAxis::TrainSubset, size, spec.seed)), capped));
    }
    Ok(out)
}

/// Evaluates once per context size over a fixed retrieval pool.
pub fn run_context_sweep(
    data: &EvalData,
    spec: &SweepSpec,
    settings: &EvalSettings,
    backend: &dyn Backend,
) -> Result<Vec<TaskResult>, EvalError> {
    spec.validate()?;
    if spec.axis != SweepAxis::ContextK {
        return Err(EvalError::InvalidSpec("expected axis context_k".into()));
    }
    let predictor = make_predictor(data.train.clone(), data, settings)?;
    spec.values
        .iter()
        .map(|&k| {
            let scored = evaluate_with(data, &predictor, k, settings, backend)?;
            info!(dataset = %data.dataset_id, k, score = scored.0, "context point done");
            Ok(result(data, settings, scored, data.train.row_count(), Some((SweepAxis::ContextK, k, spec.seed)), false))
        })
        .collect()
}

pub fn run_sweep(
    data: &EvalData,
    spec: &SweepSpec,
    settings: &EvalSettings,
    backend: &dyn Backend,
) -> Result<Vec<TaskResult>, EvalError> {
    match spec.axis {
        SweepAxis::TrainSubset => run_subsample_sweep(data, spec, settings, backend),
        SweepAxis::ContextK => run_context_sweep(data, spec, settings, backend),
    }
}

/// Runs `f` over datasets on up to `workers` threads, keeping input order.
pub fn map_datasets<T, F>(datasets: &[EvalData], workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&EvalData) -> T + Sync,
{
    let run = || datasets.par_iter().map(&f).collect();
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

/// Seeded 80:20-style split, stratified by label for classification and by
/// quantile bin for regression. Rows with a missing target always go to
/// train. Both outputs keep source order.
pub fn stratified_split(
    table: &CanonicalTable,
    kind: TaskKind,
    test_fraction: f64,
    seed: u64,
) -> Result<(CanonicalTable, CanonicalTable), EvalError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EvalError::InvalidSpec(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let t = table.target_index().ok_or_else(|| EvalError::InvalidSpec("no target column".into()))?;
    let labelled: Vec<usize> = (0..table.row_count()).filter(|&i| !table.rows[i][t].is_missing).collect();

    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match kind {
        TaskKind::Classification => {
            for &i in &labelled {
                strata.entry(table.rows[i][t].text.clone()).or_default().push(i);
            }
        }
        TaskKind::Regression => {
            let mut by_value: Vec<(f64, usize)> =
                labelled.iter().map(|&i| (parse_num(&table.rows[i][t].text), i)).collect();
            by_value.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let n = by_value.len();
            for (rank, &(_, i)) in by_value.iter().enumerate() {
                let bin = rank * REGRESSION_STRATA / n;
                strata.entry(format!("{bin:02}")).or_default().push(i);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; table.row_count()];
    for members in strata.values_mut() {
        members.sort_unstable();
        members.shuffle(&mut rng);
        let take = (members.len() as f64 * test_fraction).round() as usize;
        for &i in &members[..take] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..table.row_count()).partition(|&i| is_test[i]);
    Ok((table.select_rows(&train), table.select_rows(&test)))
}

/// Model × dataset score matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMatrix {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    /// `scores[m][d]`.
    pub scores: Vec<Vec<Option<f64>>>,
}

impl ScoreMatrix {
    /// Collects clipped scores. The last result for a (model, dataset) pair wins.
    pub fn from_results(results: &[TaskResult]) -> Self {
        let mut models: Vec<String> = results.iter().map(|r| r.model.clone()).collect();
        let mut datasets: Vec<String> = results.iter().map(|r| r.dataset_id.clone()).collect();
        models.sort();
        models.dedup();
        datasets.sort();
        datasets.dedup();
        let mut scores = vec![vec![None; datasets.len()]; models.len()];
        for r in results {
            let m = models.binary_search(&r.model).expect("collected");
            let d = datasets.binary_search(&r.dataset_id).expect("collected");
            scores[m][d] = Some(r.clipped_score);
        }
        Self { models, datasets, scores }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    pub models: Vec<String>,
    /// `ranks[m][d]`, 1 = best.
    pub ranks: Vec<Vec<f64>>,
    pub overall: Vec<f64>,
    /// Stratum name → per-model mean rank over that stratum's datasets.
    pub strata: BTreeMap<String, Vec<f64>>,
}

/// Per-dataset ranks (ties share the average of the ranks they cover) and
/// their means overall and within each stratum.
pub fn mean_rank(
    matrix: &ScoreMatrix,
    higher_is_better: bool,
    strata: Option<&HashMap<String, String>>,
) -> Result<RankSummary, EvalError> {
    let n_models = matrix.models.len();
    if n_models < 2 {
        return Err(EvalError::TooFew { needed: 2, got: n_models });
    }
    if matrix.datasets.is_empty() {
        return Err(EvalError::TooFew { needed: 1, got: 0 });
    }
    let mut ranks = vec![vec![0.0; matrix.datasets.len()]; n_models];
    for (d, dataset) in matrix.datasets.iter().enumerate() {
        let mut col = Vec::with_capacity(n_models);
        for (m, model) in matrix.models.iter().enumerate() {
            match matrix.scores.get(m).and_then(|row| row.get(d)).copied().flatten() {
                Some(s) if !s.is_nan() => col.push((if higher_is_better { -s } else { s }, m)),
                _ => return Err(EvalError::MissingScore { model: model.clone(), dataset: dataset.clone() }),
            }
        }
        col.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut start = 0;
        while start < col.len() {
            let mut end = start + 1;
            while end < col.len() && col[end].0 == col[start].0 {
                end += 1;
            }
            // positions start..end hold ranks start+1..=end
            let avg = (start + 1 + end) as f64 / 2.0;
            for &(_, m) in &col[start..end] {
                ranks[m][d] = avg;
            }
            start = end;
        }
    }
    let mean_over = |cols: &[usize]| -> Vec<f64> {
        ranks.iter().map(|r| cols.iter().map(|&d| r[d]).sum::<f64>() / cols.len() as f64).collect()
    };
    let all: Vec<usize> = (0..matrix.datasets.len()).collect();
    let overall = mean_over(&all);
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    if let Some(strata) = strata {
        for (d, dataset) in matrix.datasets.iter().enumerate() {
            if let Some(s) = strata.get(dataset) {
                groups.entry(s.clone()).or_default().push(d);
            }
        }
    }
    let strata = groups.into_iter().map(|(s, cols)| (s, mean_over(&cols))).collect();
    Ok(RankSummary { models: matrix.models.clone(), ranks, overall, strata })
}

/// Training-set size bucket used for rank stratification.
pub fn row_stratum(n_train: usize) -> &'static str {
    match n_train {
        0..1_000 => "rows<1k",
        1_000..10_000 => "rows<10k",
        _ => "rows>=10k",
    }
}

/// Column count bucket used for rank stratification.
pub fn column_stratum(n_columns: usize) -> &'static str {
    match n_columns {
        0..10 => "cols<10",
        10..50 => "cols<50",
        _ => "cols>=50",
    }
}

/// Writes `model,stratum,mean_rank` rows, overall first.
pub fn write_rank_csv<W: Write>(w: W, summary: &RankSummary) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "stratum", "mean_rank"])?;
    let groups = std::iter::once(("overall", &summary.overall)).chain(summary.strata.iter().map(|(s, v)| (s.as_str(), v)));
    for (stratum, means) in groups {
        for (model, mean) in summary.models.iter().zip(means) {
            out.write_record([model.as_str(), stratum, &mean.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ResultRow<'a> {
    dataset_id: &'a str,
    model: &'a str,
    task_kind: TaskKind,
    metric: MetricName,
    raw: f64,
    clipped: f64,
    n_train: usize,
    n_test: usize,
    n_columns: usize,
    axis: Option<SweepAxis>,
    axis_value: Option<usize>,
    seed: u64,
}

/// Writes results as CSV. Output depends only on `results`, so identical
/// runs give identical bytes.
pub fn write_results_csv<W: Write>(w: W, results: &[TaskResult]) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(ResultRow {
            dataset_id: &r.dataset_id,
            model: &r.model,
            task_kind: r.task_kind,
            metric: r.metric_name,
            raw: r.score,
            clipped: r.clipped_score,
            n_train: r.n_train,
            n_test: r.n_test,
            n_columns: r.n_columns,
            axis: r.axis,
            axis_value: r.axis_value,
            seed: r.seed,
        })?;
    }
    out.flush()?;
    Ok(())
}
