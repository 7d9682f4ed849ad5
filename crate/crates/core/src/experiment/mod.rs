//! End-to-end experiment runs: dataset, training under every regime,
//! assembly, inference, scoring and the regime comparison table.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml            resolved config, first line names its hash
//! run.json               overall status and the failing stage, if any
//! stages/<stage>.json    completion record: config hash plus sha256 of every file written
//! dataset/               videos, frames, texts, qa.jsonl, split/
//! checkpoints/<run>.ckpt init, ind-a..ind-f, homo-lc, homo-pc, hete, crashchat
//! logs/<run>.csv         per-epoch losses; logs/<run>.json holds the selection summary
//! predictions/<run>.jsonl
//! metrics/<run>.json     also <run>.txt
//! comparison.txt         also comparison.json
//! ```

mod comparison;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasetkit::{
    build_qa_pairs, generate_synthetic, ingest_manifest, load_qa, read_jsonl, stratified_split, write_jsonl, Dataset,
    DatasetError, Split, QA_FILE,
};
use crate::metrics::{evaluate_run, MetricsError, MetricsReport};
use crate::model::{Checkpoint, CrashChat, DecodingConfig, ModelError};
use crate::pipeline::{infer_all, infer_direct_all, GatingStats, Inference, InferenceResult};
use crate::schema::{PredictionRecord, TaskId};
use crate::tokenizer::Tokenizer;
use crate::training::{assemble_crashchat, train_regime, write_log_csv, Regime, TrainError};

pub use comparison::{Comparison, ComparisonRow, ASSEMBLED};
pub use config::{
    DatasetSection, EvalSection, ExperimentConfig, RegimeKind, TrainSection, DEFAULT_OUTPUT_ROOT, LC_EPOCHS,
    OUTPUT_ROOT_ENV, PC_EPOCHS,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const STATUS_FILE: &str = "run.json";
pub const STAGES_DIR: &str = "stages";
pub const DATASET_DIR: &str = "dataset";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOG_DIR: &str = "logs";
pub const PREDICTION_DIR: &str = "predictions";
pub const METRICS_DIR: &str = "metrics";
pub const INIT_CHECKPOINT: &str = "init";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run directory {dir} holds results of config {found}, not {expected}; pass --force to replace them")]
    ConfigMismatch { dir: PathBuf, found: String, expected: String },
    #[error("missing input {0}; run the earlier stages first")]
    MissingInput(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    StageFailed { stage: Stage, source: Box<ExperimentError> },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io(path.to_path_buf(), e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Stage {
    Dataset,
    Train,
    Assemble,
    Infer,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Dataset, Stage::Train, Stage::Assemble, Stage::Infer, Stage::Eval, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Train => "train",
            Stage::Assemble => "assemble",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Comma-separated stage names; `all` selects every stage.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>, String> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        let mut v = s.split(',').map(str::parse).collect::<Result<Vec<Stage>, _>>()?;
        v.sort();
        v.dedup();
        Ok(v)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s.trim()).ok_or_else(|| format!("unknown stage `{}`", s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Stages to consider; the rest are left untouched.
    pub stages: Vec<Stage>,
    /// Rerun stages even when a completion record exists.
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { stages: Stage::ALL.to_vec(), force: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RunState {
    Running,
    /// Finished the requested stages, but not all of them.
    Partial,
    Complete,
    Failed,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunStatus {
    pub config_hash: String,
    pub state: RunState,
    pub completed: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Contents of `stages/<stage>.json`, written only when the stage succeeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageRecord {
    pub stage: Stage,
    pub config_hash: String,
    /// Run-relative path to the sha256 of its contents.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Selection summary of one training run, written next to its CSV log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainSummary {
    pub config_hash: String,
    pub regime: Regime,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss of the untrained block.
    pub initial_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GatingReport {
    pub config_hash: String,
    #[serde(flatten)]
    pub stats: GatingStats,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join(DATASET_DIR)
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("{name}.ckpt"))
    }
    pub fn log(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join(LOG_DIR).join(format!("{name}.{ext}"))
    }
    pub fn predictions(&self, name: &str) -> PathBuf {
        self.root.join(PREDICTION_DIR).join(format!("{name}.jsonl"))
    }
    pub fn metrics(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join(METRICS_DIR).join(format!("{name}.{ext}"))
    }
    pub fn stage_record(&self, stage: Stage) -> PathBuf {
        self.root.join(STAGES_DIR).join(format!("{stage}.json"))
    }
    pub fn status(&self) -> PathBuf {
        self.root.join(STATUS_FILE)
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn comparison(&self, ext: &str) -> PathBuf {
        self.root.join(format!("comparison.{ext}"))
    }
}

fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("serializable value") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf, ExperimentError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(ExperimentError::MissingInput(path))
    }
}

/// Loads the config at `path` and runs it.
pub fn run_experiment_file(path: &Path, opts: &RunOptions) -> Result<RunSummary, ExperimentError> {
    run_experiment(&ExperimentConfig::load(path)?, opts)
}

/// Runs the selected stages of `cfg` in order, skipping stages already
/// completed for the same config unless `opts.force` is set. On failure the
/// outputs written so far stay in place and `run.json` names the stage.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, ExperimentError> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let hash = cfg.hash();
    let layout = RunLayout::new(cfg.run_dir());
    fs::create_dir_all(&layout.root).map_err(io_err(&layout.root))?;

    let mut status = match read_json::<RunStatus>(&layout.status()) {
        Ok(s) if s.config_hash == hash => s,
        Ok(s) if !opts.force => {
            return Err(ExperimentError::ConfigMismatch {
                dir: layout.root.clone(),
                found: s.config_hash,
                expected: hash,
            })
        }
        _ => {
            // Fresh directory, or records of another config being replaced.
            let stages = layout.root.join(STAGES_DIR);
            if stages.exists() {
                fs::remove_dir_all(&stages).map_err(io_err(&stages))?;
            }
            RunStatus {
                config_hash: hash.clone(),
                state: RunState::Running,
                completed: vec![],
                failed_stage: None,
                error: None,
            }
        }
    };
    write_file(&layout.config(), &format!("# config hash {hash}\n{}", cfg.to_toml()))?;

    let runner = Runner { cfg: &cfg, hash: &hash, layout: &layout, force: opts.force };
    let mut summary =
        RunSummary { run_dir: layout.root.clone(), config_hash: hash.clone(), executed: vec![], skipped: vec![] };
    for stage in Stage::ALL.into_iter().filter(|s| opts.stages.contains(s)) {
        if !opts.force && runner.is_complete(stage) {
            log::info!("stage {stage}: already complete, skipping");
            summary.skipped.push(stage);
            continue;
        }
        status.state = RunState::Running;
        status.failed_stage = None;
        status.error = None;
        status.completed.retain(|s| *s != stage);
        write_json(&layout.status(), &status)?;
        let start = Instant::now();
        log::info!("stage {stage}: starting");
        match runner.run_stage(stage) {
            Ok(files) => {
                runner.record(stage, &files)?;
                status.completed.push(stage);
                status.completed.sort();
                summary.executed.push(stage);
                log::info!("stage {stage}: done in {:.1}s", start.elapsed().as_secs_f64());
            }
            Err(e) => {
                log::error!("stage {stage} failed: {e}");
                status.state = RunState::Failed;
                status.failed_stage = Some(stage);
                status.error = Some(e.to_string());
                write_json(&layout.status(), &status)?;
                return Err(ExperimentError::StageFailed { stage, source: Box::new(e) });
            }
        }
    }
    status.state =
        if Stage::ALL.iter().all(|s| status.completed.contains(s)) { RunState::Complete } else { RunState::Partial };
    write_json(&layout.status(), &status)?;
    Ok(summary)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    hash: &'a str,
    layout: &'a RunLayout,
    force: bool,
}

impl Runner<'_> {
    fn is_complete(&self, stage: Stage) -> bool {
        matches!(read_json::<StageRecord>(&self.layout.stage_record(stage)), Ok(r) if r.config_hash == self.hash)
    }

    fn record(&self, stage: Stage, files: &[PathBuf]) -> Result<(), ExperimentError> {
        let mut map = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(&self.layout.root).unwrap_or(f).to_string_lossy().replace('\\', "/");
            map.insert(rel, sha256_file(f)?);
        }
        let rec = StageRecord { stage, config_hash: self.hash.to_string(), files: map };
        write_json(&self.layout.stage_record(stage), &rec)
    }

    fn run_stage(&self, stage: Stage) -> Result<Vec<PathBuf>, ExperimentError> {
        match stage {
            Stage::Dataset => self.dataset(),
            Stage::Train => self.train(),
            Stage::Assemble => self.assemble(),
            Stage::Infer => self.infer(),
            Stage::Eval => self.eval(),
            Stage::Report => self.report(),
        }
    }

    fn dataset(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let d = &self.cfg.dataset;
        let dir = self.layout.dataset();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let ds = match &d.manifest {
            Some(path) => {
                let ing = ingest_manifest(path, &d.ingest)?;
                if !ing.rejected.is_empty() {
                    log::warn!(
                        "{} manifest entries rejected; see {}/rejected.jsonl",
                        ing.rejected.len(),
                        dir.display()
                    );
                    write_jsonl(&dir.join("rejected.jsonl"), &ing.rejected)?;
                }
                ing.dataset
            }
            None => generate_synthetic(&d.synthetic)?,
        };
        ds.save(&dir)?;
        write_jsonl(&dir.join(QA_FILE), &build_qa_pairs(&ds.samples, &ds.texts)?)?;
        stratified_split(&ds.samples, &d.split)?.save(&dir, &ds.samples)?;
        let mut files = Vec::new();
        files_under(&dir, &mut files)?;
        Ok(files)
    }

    fn load_data(&self) -> Result<(Dataset, Split), ExperimentError> {
        let dir = require(self.layout.dataset())?;
        Ok((Dataset::load(&dir)?, Split::load(&dir)?))
    }

    fn init_checkpoint(&self) -> Result<Checkpoint, ExperimentError> {
        let mut ckpt = Checkpoint::new(CrashChat::new(self.cfg.model.clone())?);
        ckpt.meta.config_hash = Some(self.hash.to_string());
        Ok(ckpt)
    }

    fn train(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let (ds, split) = self.load_data()?;
        let train = ds.subset(split.get(crate::datasetkit::Subset::Train));
        let val = ds.subset(split.get(crate::datasetkit::Subset::Val));
        let tok = Tokenizer::from_templates();
        let init = self.init_checkpoint()?;
        let init_path = self.layout.checkpoint(INIT_CHECKPOINT);
        init.save(&init_path)?;
        let mut files = vec![init_path];
        for regime in self.cfg.planned_runs() {
            let slug = regime.slug();
            let (ckpt_path, csv, summary_path) =
                (self.layout.checkpoint(&slug), self.layout.log(&slug, "csv"), self.layout.log(&slug, "json"));
            let done = !self.force
                && csv.exists()
                && matches!(read_json::<TrainSummary>(&summary_path), Ok(s) if s.config_hash == self.hash)
                && matches!(Checkpoint::read_meta(&ckpt_path), Ok(m) if m.config_hash.as_deref() == Some(self.hash));
            if done {
                log::info!("{slug}: checkpoint present, skipping");
            } else {
                let tc = self.cfg.train.for_regime(regime);
                let start = Instant::now();
                let out = train_regime(&init, regime, tc, &tok, &train, &val)?;
                log::info!(
                    "{slug}: best epoch {} of {}, val loss {:.4}, {:.1}s",
                    out.best_epoch,
                    tc.epochs,
                    out.best_val_loss,
                    start.elapsed().as_secs_f64()
                );
                let initial_val_loss = initial_selection_loss(&out.log, tc);
                out.checkpoint.save(&ckpt_path)?;
                write_log_csv(&csv, &out.log)?;
                let summary = TrainSummary {
                    config_hash: self.hash.to_string(),
                    regime,
                    epochs: tc.epochs,
                    best_epoch: out.best_epoch,
                    best_val_loss: out.best_val_loss,
                    initial_val_loss,
                };
                write_json(&summary_path, &summary)?;
            }
            files.extend([ckpt_path, csv, summary_path]);
        }
        Ok(files)
    }

    fn assemble(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let hete = self.layout.checkpoint(&Regime::Heterogeneous.slug());
        let homo = self.layout.checkpoint(&Regime::Homogeneous { group: crate::schema::TaskGroup::Pc }.slug());
        let planned = self.cfg.planned_runs();
        if !planned.contains(&Regime::Heterogeneous) || !planned.iter().any(|r| matches!(r, Regime::Homogeneous { .. }))
        {
            log::warn!("assembly needs the heterogeneous and homogeneous regimes; skipping");
            return Ok(vec![]);
        }
        let mut out = assemble_crashchat(&Checkpoint::load(&require(hete)?)?, &Checkpoint::load(&require(homo)?)?)?;
        out.meta.config_hash = Some(self.hash.to_string());
        let path = self.layout.checkpoint(ASSEMBLED);
        out.save(&path)?;
        Ok(vec![path])
    }

    fn eval_videos(&self) -> Result<Dataset, ExperimentError> {
        let (ds, split) = self.load_data()?;
        Ok(ds.subset(split.get(self.cfg.eval.split)))
    }

    fn infer(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let videos = self.eval_videos()?;
        let tok = Tokenizer::from_templates();
        let decoding = DecodingConfig { max_new_tokens: self.cfg.eval.max_new_tokens };
        let mut files = Vec::new();
        for regime in self.cfg.planned_runs() {
            let tasks: Vec<TaskId> = regime.tasks().into_iter().filter(|t| self.cfg.eval.tasks.contains(t)).collect();
            if tasks.is_empty() {
                continue;
            }
            let slug = regime.slug();
            let ckpt = Checkpoint::load(&require(self.layout.checkpoint(&slug))?)?;
            let mut inf = Inference::new(&ckpt.model, &tok);
            inf.decoding = decoding;
            let (preds, _) = infer_direct_all(&inf, &videos.samples, &tasks, regime.target_group())?;
            let path = self.layout.predictions(&slug);
            write_jsonl(&path, &preds)?;
            files.push(path);
        }
        let assembled = self.layout.checkpoint(ASSEMBLED);
        if assembled.exists() {
            let ckpt = Checkpoint::load(&assembled)?;
            let mut inf = Inference::new(&ckpt.model, &tok);
            inf.decoding = decoding;
            let (results, stats) = infer_all(&inf, &videos.samples, &self.cfg.eval.tasks)?;
            log::info!(
                "{ASSEMBLED}: {} localization queries, {} passed the gate, {} Pc invocations",
                stats.localization_queries,
                stats.localization_passed_gate,
                stats.invocations.pc
            );
            let preds: Vec<PredictionRecord> = results.iter().map(|r| r.final_record.clone()).collect();
            let (p, r, g) = (
                self.layout.predictions(ASSEMBLED),
                self.layout.root.join(PREDICTION_DIR).join(format!("{ASSEMBLED}.results.jsonl")),
                self.layout.root.join(PREDICTION_DIR).join(format!("{ASSEMBLED}.gating.json")),
            );
            write_jsonl(&p, &preds)?;
            write_jsonl::<InferenceResult>(&r, &results)?;
            write_json(&g, &GatingReport { config_hash: self.hash.to_string(), stats })?;
            files.extend([p, r, g]);
        }
        Ok(files)
    }

    fn eval(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let videos = self.eval_videos()?;
        let qa = load_qa(&self.layout.dataset())?;
        let ecfg = self.cfg.eval.metrics_config();
        let mut files = Vec::new();
        for name in self.prediction_names() {
            let path = self.layout.predictions(&name);
            if !path.exists() {
                continue;
            }
            let preds: Vec<PredictionRecord> = read_jsonl(&path)?;
            let mut report = evaluate_run(&preds, &videos.samples, &qa, &ecfg, None)?;
            report.config_hash = Some(self.hash.to_string());
            let (json, txt) = (self.layout.metrics(&name, "json"), self.layout.metrics(&name, "txt"));
            write_file(&json, &report.to_json())?;
            write_file(&txt, &format!("config {}\n{}", self.hash, report.to_table()))?;
            files.extend([json, txt]);
        }
        if files.is_empty() {
            return Err(ExperimentError::MissingInput(self.layout.root.join(PREDICTION_DIR)));
        }
        Ok(files)
    }

    fn prediction_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.cfg.planned_runs().into_iter().map(Regime::slug).collect();
        v.push(ASSEMBLED.into());
        v
    }

    fn report(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let (files, _) = write_comparison(self.layout, self.hash, &self.cfg.eval.ap_thresholds)?;
        Ok(files)
    }
}

/// Weighted validation loss before any update, matching the selection criterion.
fn initial_selection_loss(log: &[crate::training::LogRow], cfg: &crate::training::TrainConfig) -> f64 {
    let rows: Vec<_> = log.iter().filter(|r| r.epoch == 0 && r.split == "val").collect();
    let w: f64 = rows.iter().map(|r| cfg.weight(r.task)).sum();
    rows.iter().map(|r| cfg.weight(r.task) * r.loss).sum::<f64>() / w
}

/// Every metrics report in the run directory, keyed by file stem.
pub fn load_metrics(layout: &RunLayout) -> Result<BTreeMap<String, MetricsReport>, ExperimentError> {
    let dir = require(layout.root.join(METRICS_DIR))?;
    let mut files = Vec::new();
    files_under(&dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files.into_iter().filter(|f| f.extension().is_some_and(|e| e == "json")) {
        let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        out.insert(stem, read_json(&f)?);
    }
    Ok(out)
}

/// Builds the comparison from a run's metrics and writes `comparison.{txt,json}`.
pub fn write_comparison(
    layout: &RunLayout,
    config_hash: &str,
    ap_thresholds: &[f64],
) -> Result<(Vec<PathBuf>, String), ExperimentError> {
    let reports = load_metrics(layout)?;
    let cmp = Comparison::build(config_hash, &reports, ap_thresholds);
    let table = cmp.to_table();
    let (txt, json) = (layout.comparison("txt"), layout.comparison("json"));
    write_file(&txt, &table)?;
    write_file(&json, &cmp.to_json())?;
    Ok((vec![txt, json], table))
}

/// Rebuilds the comparison of an existing run directory from its saved config and metrics.
pub fn report_run(run_dir: &Path) -> Result<String, ExperimentError> {
    let layout = RunLayout::new(run_dir);
    let cfg = ExperimentConfig::load(&require(layout.config())?)?;
    Ok(write_comparison(&layout, &cfg.hash(), &cfg.eval.ap_thresholds)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists() {
        assert_eq!(Stage::parse_list("all").unwrap(), Stage::ALL.to_vec());
        assert_eq!(Stage::parse_list("eval,dataset,eval").unwrap(), vec![Stage::Dataset, Stage::Eval]);
        assert!(Stage::parse_list("dataset,bogus").is_err());
    }

    #[test]
    fn layout_paths() {
        let l = RunLayout::new("/r");
        assert_eq!(l.checkpoint("hete"), PathBuf::from("/r/checkpoints/hete.ckpt"));
        assert_eq!(l.metrics("ind-a", "json"), PathBuf::from("/r/metrics/ind-a.json"));
        assert_eq!(l.stage_record(Stage::Eval), PathBuf::from("/r/stages/eval.json"));
    }
}
