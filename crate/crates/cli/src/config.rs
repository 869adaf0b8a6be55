use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rowcast_core::backend::BackendConfig;
use rowcast_core::embedder::EmbedderConfig;
use rowcast_core::evalkit::{SweepSpec, DEFAULT_CLIP_FLOOR, DEFAULT_TEST_FRACTION};
use rowcast_core::index::{StorageKind, DEFAULT_K};
use rowcast_core::predictor::{TaskKind, DEFAULT_TOKEN_BUDGET};
use rowcast_core::serializer::{SerializationConfig, TrainingOptions};
use serde::{Deserialize, Serialize};

use crate::error::UserError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workers: usize,
    pub seed: u64,
    pub paths: Paths,
    pub task: TaskSection,
    pub serialization: SerializationConfig,
    pub embedder: EmbedderConfig,
    pub backend: BackendConfig,
    pub index: IndexSection,
    pub sweep: Option<SweepSpec>,
    pub prepare: Option<PrepareSection>,
    /// Extra datasets for `evaluate` and `sweep`; when empty, `paths` and
    /// `task` describe the only dataset.
    pub datasets: Vec<DatasetEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            seed: 0,
            paths: Paths::default(),
            task: TaskSection::default(),
            serialization: SerializationConfig::default(),
            embedder: EmbedderConfig::default(),
            backend: BackendConfig::default(),
            index: IndexSection::default(),
            sweep: None,
            prepare: None,
            datasets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub split_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub target_column: Option<String>,
    /// Inferred from the target column type when absent.
    pub task_kind: Option<TaskKind>,
    pub k: usize,
    pub token_budget: usize,
    /// Model name written to result files.
    pub model: String,
    pub clip_floor: f64,
    pub test_fraction: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            target_column: None,
            task_kind: None,
            k: DEFAULT_K,
            token_budget: DEFAULT_TOKEN_BUDGET,
            model: "rowcast".into(),
            clip_floor: DEFAULT_CLIP_FLOOR,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub storage: StorageKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub tables_dir: Option<PathBuf>,
    pub draws: usize,
    pub sample_size: usize,
    pub max_tokens: usize,
}

impl Default for PrepareSection {
    fn default() -> Self {
        let t = TrainingOptions::default();
        Self { tables_dir: None, draws: 1, sample_size: t.sample_size, max_tokens: t.max_tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub train_csv: PathBuf,
    pub test_csv: Option<PathBuf>,
    pub split_seed: Option<u64>,
    pub target_column: String,
    pub task_kind: Option<TaskKind>,
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<rowcast_core::backend::BackendKind>,
    pub k: Option<usize>,
    pub token_budget: Option<usize>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a TOML config. Relative paths resolve against the file's
    /// directory and are stored absolute, so a written-back config works from
    /// anywhere.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UserError(format!("invalid config {}: {e}", path.display())))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(parent)?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [&mut p.train_csv, &mut p.test_csv, &mut p.output_dir].into_iter().flatten() {
            fix(path);
        }
        if let Some(dir) = self.prepare.as_mut().and_then(|p| p.tables_dir.as_mut()) {
            fix(dir);
        }
        for d in &mut self.datasets {
            fix(&mut d.train_csv);
            if let Some(t) = &mut d.test_csv {
                fix(t);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(s) = o.seed {
            self.seed = s;
            if let Some(sweep) = &mut self.sweep {
                sweep.seed = s;
            }
        }
        if let Some(b) = o.backend {
            self.backend.kind = b;
        }
        if let Some(k) = o.k {
            self.task.k = k;
        }
        if let Some(t) = o.token_budget {
            self.task.token_budget = t;
        }
        if let Some(out) = &o.output {
            self.paths.output_dir = Some(out.clone());
        }
    }

    /// Checks settings shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!(UserError("workers must be at least 1".into()));
        }
        self.serialization.validate().map_err(|e| UserError(e.to_string()))?;
        self.embedder.validate().map_err(|e| UserError(e.to_string()))?;
        if self.task.token_budget < rowcast_core::predictor::MIN_TOKEN_BUDGET {
            bail!(UserError(format!(
                "token_budget must be at least {}",
                rowcast_core::predictor::MIN_TOKEN_BUDGET
            )));
        }
        if let Some(s) = &self.sweep {
            s.validate().map_err(|e| UserError(e.to_string()))?;
        }
        for d in self.dataset_entries_unchecked() {
            if d.test_csv.is_some() && d.split_seed.is_some() {
                bail!(UserError(format!("dataset {}: set only one of test_csv and split_seed", d.id)));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        let dir = self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(dir)
    }

    pub fn train_csv(&self) -> Result<&Path> {
        let p = self.paths.train_csv.as_deref().ok_or_else(|| UserError("paths.train_csv is not set".into()))?;
        must_exist(p)?;
        Ok(p)
    }

    fn dataset_entries_unchecked(&self) -> Vec<DatasetEntry> {
        if !self.datasets.is_empty() {
            return self.datasets.clone();
        }
        match (&self.paths.train_csv, &self.task.target_column) {
            (Some(train), Some(target)) => vec![DatasetEntry {
                id: train.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()),
                train_csv: train.clone(),
                test_csv: self.paths.test_csv.clone(),
                split_seed: self.paths.split_seed,
                target_column: target.clone(),
                task_kind: self.task.task_kind,
            }],
            _ => Vec::new(),
        }
    }

    /// Datasets for commands that need a train/test split. Each must name
    /// existing files and exactly one of `test_csv` and `split_seed`.
    pub fn dataset_entries(&self) -> Result<Vec<DatasetEntry>> {
        let entries = self.dataset_entries_unchecked();
        if entries.is_empty() {
            bail!(UserError("no dataset configured: set paths.train_csv and task.target_column".into()));
        }
        for d in &entries {
            must_exist(&d.train_csv)?;
            match (&d.test_csv, d.split_seed) {
                (Some(t), None) => must_exist(t)?,
                (None, Some(_)) => {}
                _ => bail!(UserError(format!("dataset {}: set exactly one of test_csv and split_seed", d.id))),
            }
        }
        Ok(entries)
    }
}

fn must_exist(p: &Path) -> Result<()> {
    if !p.exists() {
        bail!(UserError(format!("file not found: {}", p.display())));
    }
    Ok(())
}
