use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rowcast_core::backend::{build_backend, Backend};
use rowcast_core::evalkit::{self, EvalData, EvalSettings, TaskResult};
use rowcast_core::predictor::{
    build_train_index, DecodePath, PredictionRecord, PredictionTask, Predictor, PredictorConfig, TaskKind,
};
use rowcast_core::serializer::{build_training_example, HeuristicCounter, SerializeError, TrainingOptions};
use rowcast_core::table::{
    canonicalize_table, infer_schema, read_csv, CanonicalTable, ColumnKind, CsvOptions, Schema, Table,
};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::config::{DatasetEntry, RunConfig};
use crate::error::UserError;

/// Reads, types and canonicalizes a CSV, optionally marking a target column.
fn ingest_table(path: &Path, target: Option<&str>, cfg: &RunConfig) -> Result<CanonicalTable> {
    let raw = read_csv(path, &CsvOptions::default()).with_context(|| format!("reading {}", path.display()))?;
    let mut schema = infer_schema(&raw, &CsvOptions::default().inference)?;
    if let Some(t) = target {
        schema.set_target(t)?;
    }
    let table = Table::new(schema, raw.rows)?;
    Ok(canonicalize_table(&table, &cfg.serialization.separators()))
}

/// Reads a test CSV against the training schema. Columns are matched by
/// name; a test file may omit the target column entirely.
fn conform_table(path: &Path, schema: &Schema, cfg: &RunConfig) -> Result<CanonicalTable> {
    let raw = read_csv(path, &CsvOptions::default()).with_context(|| format!("reading {}", path.display()))?;
    let mut positions = Vec::with_capacity(schema.len());
    for (i, col) in schema.columns.iter().enumerate() {
        match raw.headers.iter().position(|h| h == &col.name) {
            Some(p) => positions.push(Some(p)),
            None if schema.target_index == Some(i) => positions.push(None),
            None => bail!(UserError(format!("{} lacks column {:?}", path.display(), col.name))),
        }
    }
    let rows = raw
        .rows
        .into_iter()
        .map(|r| positions.iter().map(|p| p.and_then(|p| r[p].clone())).collect())
        .collect();
    let table = Table::new(schema.clone(), rows)?;
    Ok(canonicalize_table(&table, &cfg.serialization.separators()))
}

fn task_kind_for(table: &CanonicalTable, requested: Option<TaskKind>) -> TaskKind {
    requested.unwrap_or_else(|| {
        let t = table.target_index().expect("target set");
        match table.schema.columns[t].kind {
            ColumnKind::Numeric => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    })
}

fn load_dataset(entry: &DatasetEntry, cfg: &RunConfig) -> Result<EvalData> {
    let full = ingest_table(&entry.train_csv, Some(&entry.target_column), cfg)
        .with_context(|| format!("loading dataset {}", entry.id))?;
    let task_kind = task_kind_for(&full, entry.task_kind);
    let (train, test) = match (&entry.test_csv, entry.split_seed) {
        (Some(test), _) => {
            let test = conform_table(test, &full.schema, cfg).with_context(|| format!("loading dataset {}", entry.id))?;
            (full, test)
        }
        (None, Some(seed)) => evalkit::stratified_split(&full, task_kind, cfg.task.test_fraction, seed)?,
        (None, None) => bail!(UserError(format!("dataset {}: no test split", entry.id))),
    };
    info!(dataset = %entry.id, train = train.row_count(), test = test.row_count(), kind = ?task_kind, "dataset loaded");
    Ok(EvalData { dataset_id: entry.id.clone(), task_kind, train, test })
}

fn predictor_config(cfg: &RunConfig) -> PredictorConfig {
    PredictorConfig {
        serialization: cfg.serialization.clone(),
        embedder: cfg.embedder.clone(),
        storage: cfg.index.storage,
        max_new_tokens: cfg.backend.max_new_tokens,
        temperature: cfg.backend.temperature,
    }
}

fn eval_settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        model: cfg.task.model.clone(),
        predictor: predictor_config(cfg),
        k: cfg.task.k,
        token_budget: cfg.task.token_budget,
        clip_floor: cfg.task.clip_floor,
        workers: cfg.workers,
        seed: cfg.seed,
    }
}

fn backend(cfg: &RunConfig) -> Result<std::sync::Arc<dyn Backend>> {
    Ok(build_backend(&cfg.backend, &cfg.serialization)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn print_summary(value: &Value) {
    println!("{}", serde_json::to_string(value).expect("json value"));
}

/// Hash of the effective configuration in its TOML form.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let text = toml::to_string(cfg)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Writes `manifest.json` and the effective `config.toml` that reproduces
/// the run.
fn write_manifest(cfg: &RunConfig, command: &str, out: &Path, outputs: &[&str]) -> Result<()> {
    let split_seeds: BTreeMap<String, Option<u64>> =
        cfg.dataset_entries().unwrap_or_default().into_iter().map(|d| (d.id, d.split_seed)).collect();
    let manifest = json!({
        "tool": "rowcast",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": rowcast_core::VERSION,
        "command": command,
        "config_sha256": config_hash(cfg)?,
        "seeds": {
            "seed": cfg.seed,
            "split_seeds": split_seeds,
            "sweep_seed": cfg.sweep.as_ref().map(|s| s.seed),
            "embedder_hash_seed": cfg.embedder.hash_seed,
        },
        "backend": { "kind": cfg.backend.kind, "model": cfg.backend.model },
        "outputs": outputs,
        "config": cfg,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    std::fs::write(out.join("config.toml"), toml::to_string(cfg)?)?;
    Ok(())
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir()?;
    let table = ingest_table(cfg.train_csv()?, cfg.task.target_column.as_deref(), cfg)?;
    write_json(&out.join("schema.json"), &table.schema)?;
    write_json(&out.join("ingest_report.json"), &table.report)?;
    let mut w = csv::Writer::from_writer(create(&out.join("canonical.csv"))?);
    w.write_record(table.schema.names())?;
    for row in &table.rows {
        w.write_record(row.iter().map(|c| c.text.as_str()))?;
    }
    w.flush()?;
    write_manifest(cfg, "ingest", &out, &["schema.json", "ingest_report.json", "canonical.csv"])?;
    print_summary(&json!({
        "rows": table.row_count(),
        "columns": table.schema.len(),
        "coerced_cells": table.report.total_coerced(),
    }));
    Ok(())
}

pub fn index(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir()?;
    let table = ingest_table(cfg.train_csv()?, cfg.task.target_column.as_deref(), cfg)?;
    let index = build_train_index(&table, &cfg.embedder, cfg.index.storage)?;
    index.save(out.join("index"))?;
    write_manifest(cfg, "index", &out, &["index.emb", "index.ids.json"])?;
    print_summary(&json!({
        "rows_indexed": index.len(),
        "dim": index.dim(),
        "storage": cfg.index.storage,
        "storage_bytes": index.storage_bytes(),
    }));
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let entries = cfg.dataset_entries()?;
    let [entry] = entries.as_slice() else {
        bail!(UserError(format!("predict takes one dataset, config lists {}", entries.len())));
    };
    let out = cfg.output_dir()?;
    let data = load_dataset(entry, cfg)?;
    let backend = backend(cfg)?;
    let task = PredictionTask::new(data.train.clone(), &entry.target_column, data.task_kind, cfg.task.k, cfg.task.token_budget)?;
    let predictor = Predictor::new(task, predictor_config(cfg))?;

    let predictions = predictor
        .predict_batch(&data.test.rows, None, cfg.task.k, backend.as_ref(), cfg.workers)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let mut w = create(&out.join("predictions.jsonl"))?;
    let mut paths: BTreeMap<&str, usize> = [("exact", 0), ("normalized", 0), ("fallback", 0)].into();
    for (i, p) in predictions.iter().enumerate() {
        serde_json::to_writer(&mut w, &PredictionRecord::new(i as u64, p))?;
        w.write_all(b"\n")?;
        let key = match p.decode_path {
            DecodePath::Exact => "exact",
            DecodePath::Normalized => "normalized",
            DecodePath::Fallback => "fallback",
        };
        *paths.get_mut(key).expect("known path") += 1;
    }
    w.flush()?;

    let t = data.test.target_index().expect("target set");
    let labelled: Vec<usize> = (0..data.test.row_count()).filter(|&i| !data.test.rows[i][t].is_missing).collect();
    let metric = if labelled.is_empty() {
        Value::Null
    } else {
        let preds: Vec<_> = labelled.iter().map(|&i| predictions[i].clone()).collect();
        let truth: Vec<String> = labelled.iter().map(|&i| data.test.rows[i][t].text.clone()).collect();
        match evalkit::score_predictions(data.task_kind, &preds, &truth, cfg.task.clip_floor) {
            Ok((raw, clipped)) => json!({
                "name": evalkit::MetricName::for_task(data.task_kind),
                "raw": raw,
                "clipped": clipped,
                "n_labelled": labelled.len(),
            }),
            Err(e) => {
                warn!(error = %e, "metric not computed");
                json!({ "error": e.to_string() })
            }
        }
    };
    let summary = json!({
        "dataset_id": data.dataset_id,
        "task_kind": data.task_kind,
        "backend": backend.name(),
        "k": cfg.task.k,
        "n_train": data.train.row_count(),
        "n_test": data.test.row_count(),
        "decode_paths": paths,
        "metric": metric,
    });
    write_json(&out.join("summary.json"), &summary)?;
    write_manifest(cfg, "predict", &out, &["predictions.jsonl", "summary.json"])?;
    print_summary(&summary);
    Ok(())
}

fn run_datasets(
    cfg: &RunConfig,
    f: impl Fn(&EvalData, &EvalSettings, &dyn Backend) -> Result<Vec<TaskResult>> + Sync,
) -> Result<Vec<TaskResult>> {
    let entries = cfg.dataset_entries()?;
    let backend = backend(cfg)?;
    let settings = eval_settings(cfg);
    let datasets = entries.iter().map(|e| load_dataset(e, cfg)).collect::<Result<Vec<_>>>()?;
    let per_dataset = evalkit::map_datasets(&datasets, cfg.workers, |d| f(d, &settings, backend.as_ref()));
    let mut all = Vec::new();
    for r in per_dataset {
        all.extend(r?);
    }
    Ok(all)
}

fn write_results(cfg: &RunConfig, command: &str, results: &[TaskResult]) -> Result<PathBuf> {
    let out = cfg.output_dir()?;
    let path = out.join("results.csv");
    evalkit::write_results_csv(create(&path)?, results)?;
    write_manifest(cfg, command, &out, &["results.csv"])?;
    Ok(path)
}

fn results_summary(results: &[TaskResult], path: &Path) -> Value {
    json!({
        "results": path.display().to_string(),
        "rows": results.len(),
        "capped": results.iter().filter(|r| r.capped).count(),
        "scores": results.iter().map(|r| json!({
            "dataset_id": r.dataset_id,
            "axis_value": r.axis_value,
            "metric": r.metric_name,
            "clipped": r.clipped_score,
        })).collect::<Vec<_>>(),
    })
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let results = run_datasets(cfg, |d, s, b| Ok(vec![evalkit::evaluate(d, s, b)?]))?;
    let path = write_results(cfg, "evaluate", &results)?;
    print_summary(&results_summary(&results, &path));
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let Some(spec) = cfg.sweep.clone() else {
        bail!(UserError("sweep requires a [sweep] section".into()));
    };
    let results = run_datasets(cfg, |d, s, b| Ok(evalkit::run_sweep(d, &spec, s, b)?))?;
    let path = write_results(cfg, "sweep", &results)?;
    print_summary(&results_summary(&results, &path));
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct PrepareSummary {
    tables_read: usize,
    tables_skipped: usize,
    draws_skipped: usize,
    examples: usize,
    truncated_examples: usize,
    sampled_rows: usize,
    retained_rows: usize,
}

/// Emits training examples: for each table and draw, a random target column
/// and a seeded row sample.
pub fn prepare_train(cfg: &RunConfig) -> Result<()> {
    let prep = cfg.prepare.clone().unwrap_or_default();
    let Some(dir) = prep.tables_dir.clone() else {
        bail!(UserError("prepare.tables_dir is not set".into()));
    };
    if !dir.is_dir() {
        bail!(UserError(format!("not a directory: {}", dir.display())));
    }
    let out = cfg.output_dir()?;
    let mut tables: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    tables.sort();

    let counter = HeuristicCounter;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = PrepareSummary::default();
    let mut w = create(&out.join("train_examples.jsonl"))?;
    for path in &tables {
        let table_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let table = match ingest_table(path, None, cfg) {
            Ok(t) => t,
            Err(e) => {
                warn!(table = %path.display(), error = %format!("{e:#}"), "skipping unreadable table");
                summary.tables_skipped += 1;
                continue;
            }
        };
        if table.schema.len() < 2 {
            warn!(table = %path.display(), "skipping table without feature columns");
            summary.tables_skipped += 1;
            continue;
        }
        summary.tables_read += 1;
        for _ in 0..prep.draws {
            let col = rng.gen_range(0..table.schema.len());
            let opts = TrainingOptions { sample_size: prep.sample_size, max_tokens: prep.max_tokens, seed: rng.gen() };
            let target = table.schema.columns[col].name.clone();
            match build_training_example(&table, &table_id, &target, &opts, &cfg.serialization, &counter) {
                Ok((example, stats)) => {
                    serde_json::to_writer(&mut w, &example)?;
                    w.write_all(b"\n")?;
                    summary.examples += 1;
                    summary.truncated_examples += usize::from(stats.truncated());
                    summary.sampled_rows += stats.sampled_rows;
                    summary.retained_rows += stats.retained_rows;
                }
                Err(e @ (SerializeError::InvalidConfig(_) | SerializeError::ZeroSample)) => return Err(UserError(e.to_string()).into()),
                Err(e) => {
                    warn!(table = %table_id, target = %target, error = %e, "skipping draw");
                    summary.draws_skipped += 1;
                }
            }
        }
    }
    w.flush()?;
    write_json(&out.join("prepare_summary.json"), &summary)?;
    write_manifest(cfg, "prepare-train", &out, &["train_examples.jsonl", "prepare_summary.json"])?;
    print_summary(&serde_json::to_value(&summary)?);
    Ok(())
}
