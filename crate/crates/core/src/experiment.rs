//! Experiment configuration and the cross-validation protocol.
//!
//! A run writes
//!
//! ```text
//! <out>/<name>/config.echo          effective configuration (TOML)
//! <out>/<name>/logs.jsonl           one line per fold and epoch
//! <out>/<name>/fold<i>/checkpoint.bin
//! <out>/<name>/metrics.json         per-fold and aggregated metrics
//! <out>/<name>/metrics.txt          the same as an aligned table
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{compute_class_weights, patient_kfold, AugmentationConfig, Dataset, FoldPlan, WeightScheme};
use crate::error::{Error, Result};
use crate::eval::{aggregate_cells, aggregate_folds, format_table, metrics, report_cells, Aggregate, Averaging, ConfusionMatrix, MetricsReport};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::train::{Checkpoint, EpochLog, TrainConfig, Trainer};

fn default_folds() -> usize {
    5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest CSV; relative paths resolve against the config file.
    pub manifest: PathBuf,
    #[serde(default)]
    pub class_weights: WeightScheme,
    /// Augment training batches.
    #[serde(default = "default_true")]
    pub augment: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub averaging: Averaging,
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    /// The micro model on a synthetic manifest.
    pub fn micro(name: &str, manifest: impl Into<PathBuf>, top_k: usize) -> Self {
        let model = ModelConfig::micro(top_k, 3);
        ExperimentConfig {
            name: name.to_string(),
            folds: 5,
            data: DataConfig {
                manifest: manifest.into(),
                class_weights: WeightScheme::default(),
                augment: true,
            },
            backbone: model.backbone,
            fusion: model.fusion,
            train: TrainConfig::default(),
            augmentation: AugmentationConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            fusion: self.fusion.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name `{}` must be a plain directory name", self.name)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        self.model().validate()?;
        self.train.validate()?;
        self.augmentation.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving the manifest path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.manifest = dir.join(&cfg.data.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Overrides one dotted key, e.g. `train.max_epochs=20` or
    /// `fusion.top_k=3`. The value is parsed as TOML, falling back to a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self)?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: ExperimentConfig = root.try_into()?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// Results of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub train_records: usize,
    pub validation_records: usize,
    pub test_records: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalSummary {
    pub name: String,
    pub class_weights: Vec<f64>,
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
}

/// A finished fold: metrics, log lines and the final training state.
pub struct FoldOutcome {
    pub result: FoldResult,
    pub logs: Vec<EpochLog>,
    pub checkpoint: Checkpoint<f32>,
    /// Test-record indices and their predicted probabilities.
    pub predictions: Vec<(usize, Vec<f64>)>,
}

pub fn class_weights_for(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..data.len()).collect();
    Ok(compute_class_weights(&data.class_counts(&all, cfg.fusion.n_classes), cfg.data.class_weights)?.weights)
}

/// Trains and tests fold `fold` of `plan`.
pub fn run_fold(cfg: &ExperimentConfig, data: &Dataset, plan: &FoldPlan, fold: usize) -> Result<FoldOutcome> {
    let split = plan.split(&data.records, fold)?;
    if split.test.is_empty() {
        return Err(Error::Data(format!("fold {fold} has no test records")));
    }
    let weights = class_weights_for(cfg, data)?;
    let aug = cfg.data.augment.then(|| cfg.augmentation.clone());
    let mut trainer = Trainer::new(cfg.model(), cfg.train.clone(), aug, weights, data)?;
    let start = trainer.start(fold)?;
    let mut logs = Vec::new();
    let ck = trainer.fit(&split, fold, start, |l| {
        log::info!(
            "fold {} epoch {}: train {:.4} val {:.4} lr {:.2e}{}",
            l.fold,
            l.epoch,
            l.train_loss,
            l.val_loss,
            l.lr,
            if l.stopped { " (early stop)" } else { "" }
        );
        logs.push(l.clone());
    })?;
    let (probs, loss) = trainer.evaluate(ck.weights(), &split.test)?;
    let cm = ConfusionMatrix::from_probs(&data.labels(&split.test), &probs)?;
    let report = metrics(&cm, Some(loss), cfg.evaluation.averaging)?;
    Ok(FoldOutcome {
        result: FoldResult {
            fold,
            epochs: ck.epoch,
            best_epoch: ck.best_epoch,
            train_records: split.train.len(),
            validation_records: split.validation.len(),
            test_records: split.test.len(),
            report,
        },
        logs,
        predictions: split.test.iter().copied().zip(probs).collect(),
        checkpoint: ck,
    })
}

/// Runs every fold on a pool of `jobs` threads. Results and outputs do not
/// depend on `jobs`.
pub fn run_folds(cfg: &ExperimentConfig, data: &Dataset, jobs: usize) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    let plan = patient_kfold(&data.records, cfg.folds, cfg.train.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        (0..cfg.folds).into_par_iter().map(|f| run_fold(cfg, data, &plan, f)).collect()
    })
}

fn write_jsonl(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for l in logs {
        serde_json::to_writer(&mut f, l)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes the run directory for finished folds and returns the summary.
pub fn write_run(cfg: &ExperimentConfig, data: &Dataset, run_dir: &Path, outcomes: &[FoldOutcome]) -> Result<CrossvalSummary> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.echo"), cfg.to_toml()?)?;
    let logs: Vec<EpochLog> = outcomes.iter().flat_map(|o| o.logs.iter().cloned()).collect();
    write_jsonl(&run_dir.join("logs.jsonl"), &logs)?;
    for o in outcomes {
        let dir = run_dir.join(format!("fold{}", o.result.fold));
        fs::create_dir_all(&dir)?;
        o.checkpoint.save(&dir.join("checkpoint.bin"))?;
    }
    let reports: Vec<MetricsReport> = outcomes.iter().map(|o| o.result.report.clone()).collect();
    let summary = CrossvalSummary {
        name: cfg.name.clone(),
        class_weights: class_weights_for(cfg, data)?,
        folds: outcomes.iter().map(|o| o.result.clone()).collect(),
        aggregate: aggregate_folds(&reports)?,
    };
    fs::write(run_dir.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(run_dir.join("metrics.txt"), summary_table(&summary))?;
    Ok(summary)
}

pub fn summary_table(s: &CrossvalSummary) -> String {
    let mut rows: Vec<(String, [String; 3])> =
        s.folds.iter().map(|f| (format!("fold {}", f.fold), report_cells(&f.report))).collect();
    rows.push((format!("{} (mean ± std)", s.name), aggregate_cells(&s.aggregate)));
    format_table(&rows)
}

/// Loads the manifest, runs every fold and writes `<out>/<name>/`.
pub fn crossval(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<CrossvalSummary> {
    let data = Dataset::load(&cfg.data.manifest, cfg.backbone.input[0], cfg.fusion.n_classes)?;
    let outcomes = run_folds(cfg, &data, jobs)?;
    write_run(cfg, &data, &out.join(&cfg.name), &outcomes)
}
