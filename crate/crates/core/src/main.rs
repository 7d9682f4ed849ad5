use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crashchat::datasetkit::{
    build_qa_pairs, generate_synthetic, ingest_manifest, load_qa, read_jsonl, stratified_split, write_jsonl, Dataset,
    IngestOptions, Split, SplitSpec, Subset, SyntheticConfig, QA_FILE,
};
use crashchat::experiment::{report_run, run_experiment, ExperimentConfig, RunLayout, RunOptions, Stage};
use crashchat::metrics::{evaluate_run, EvalConfig};
use crashchat::model::{Checkpoint, CrashChat, DecodingConfig};
use crashchat::pipeline::{infer_all, infer_direct_all, Inference};
use crashchat::schema::{PredictionRecord, TaskGroup, TaskId};
use crashchat::tokenizer::Tokenizer;
use crashchat::training::{assemble_crashchat, train_regime, write_log_csv, Regime};

#[derive(Parser)]
#[command(name = "crashchat", version, about = "Dual-adapter crash video analysis: data, training, inference, scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, template and split datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train one regime's adapter block.
    Train(TrainArgs),
    /// Combine a heterogeneous Lc block with a homogeneous Pc block.
    Assemble(AssembleArgs),
    /// Answer questions about a data split and print prediction records as JSON lines.
    Infer(InferArgs),
    /// Score prediction records.
    Eval(EvalArgs),
    /// Run a full experiment from a config file.
    Run(RunArgs),
    /// Rebuild the regime comparison table of a finished run.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Read a JSON-lines manifest into a dataset directory, with its QA pairs.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for placeholder features of entries without a feature file.
        #[arg(long, default_value_t = IngestOptions::default().seed)]
        seed: u64,
    },
    /// Generate synthetic videos into a dataset directory, with their QA pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticConfig::default().num_positive)]
        positives: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().num_negative)]
        negatives: usize,
    },
    /// Rebuild `qa.jsonl` of a dataset directory.
    Qa {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a stratified train/val/test split of a dataset directory.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = SplitSpec::default().seed)]
        seed: u64,
        /// Train, val and test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        /// Write the split here instead of into the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["independent", "homogeneous", "heterogeneous"])]
    regime: String,
    /// Task group, for the homogeneous regime.
    #[arg(long)]
    group: Option<TaskGroup>,
    /// Task letter, for the independent regime.
    #[arg(long)]
    task: Option<TaskId>,
    /// Experiment config supplying the model and training sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with a split.
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint; a fresh model from the config when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct AssembleArgs {
    #[arg(long)]
    hetero: PathBuf,
    #[arg(long)]
    homo_pc: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Subset,
    #[arg(long, default_value = "a,b,c,d,e,f")]
    tasks: String,
    /// Answer every task with this block directly instead of the gated pipeline.
    #[arg(long)]
    direct: Option<TaskGroup>,
    #[arg(long, default_value_t = DecodingConfig::default().max_new_tokens)]
    max_new_tokens: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Subset,
    /// Pre-crash tolerance in seconds, replacing each annotation's own.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value = "0.3,0.5,0.7")]
    ap_thresholds: String,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `$CRASHCHAT_OUT/<name>`, then `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of dataset,train,assemble,infer,eval,report.
    #[arg(long, default_value = "all")]
    stages: String,
    /// Rerun stages that already completed.
    #[arg(long)]
    force: bool,
    /// Seed for every section.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override such as `train.homogeneousPc.epochs=50`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = dispatch(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Dataset(c) => dataset(c),
        Command::Train(a) => train(a),
        Command::Assemble(a) => assemble(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
        Command::Report(a) => {
            print!("{}", report_run(&a.run)?);
            Ok(())
        }
    }
}

fn save_with_qa(ds: &Dataset, out: &Path) -> Result<()> {
    ds.save(out)?;
    write_jsonl(&out.join(QA_FILE), &build_qa_pairs(&ds.samples, &ds.texts)?)?;
    log::info!("{} videos ({} positive) written to {}", ds.samples.len(), ds.num_positive(), out.display());
    Ok(())
}

fn dataset(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Ingest { manifest, out, seed } => {
            let ing = ingest_manifest(&manifest, &IngestOptions { seed, ..Default::default() })?;
            for r in &ing.rejected {
                log::warn!("line {}: {}", r.line, r.reason);
            }
            if !ing.rejected.is_empty() {
                write_jsonl(&out.join("rejected.jsonl"), &ing.rejected)?;
            }
            save_with_qa(&ing.dataset, &out)
        }
        DatasetCmd::Synth { out, seed, positives, negatives } => {
            let cfg = SyntheticConfig { seed, num_positive: positives, num_negative: negatives, ..Default::default() };
            save_with_qa(&generate_synthetic(&cfg)?, &out)
        }
        DatasetCmd::Qa { data } => {
            let ds = Dataset::load(&data)?;
            let qa = build_qa_pairs(&ds.samples, &ds.texts)?;
            write_jsonl(&data.join(QA_FILE), &qa)?;
            log::info!("{} QA pairs", qa.len());
            Ok(())
        }
        DatasetCmd::Split { data, seed, ratios, out } => {
            let ds = Dataset::load(&data)?;
            let spec = SplitSpec { ratios: SplitSpec::parse_ratios(&ratios)?, seed };
            let split = stratified_split(&ds.samples, &spec)?;
            split.save(out.as_deref().unwrap_or(&data), &ds.samples)?;
            for s in Subset::ALL {
                log::info!("{s}: {} videos", split.get(s).len());
            }
            Ok(())
        }
    }
}

fn load_split(data: &Path, subset: Subset) -> Result<Dataset> {
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let split = Split::load(data).context("no split found; run `crashchat dataset split` first")?;
    Ok(ds.subset(split.get(subset)))
}

fn train(a: TrainArgs) -> Result<()> {
    let regime = match (a.regime.as_str(), a.group, a.task) {
        ("independent", _, Some(task)) => Regime::Independent { task },
        ("independent", _, None) => bail!("--task is required for the independent regime"),
        ("homogeneous", Some(group), _) => Regime::Homogeneous { group },
        ("homogeneous", None, _) => bail!("--group is required for the homogeneous regime"),
        _ => Regime::Heterogeneous,
    };
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .resolved();
    let mut tc = cfg.train.for_regime(regime).clone();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let init = match &a.init {
        Some(p) => Checkpoint::load(p)?,
        None => Checkpoint::new(CrashChat::new(cfg.model.clone())?),
    };
    let tok = Tokenizer::from_templates();
    let train = load_split(&a.data, Subset::Train)?;
    let val = load_split(&a.data, Subset::Val)?;
    let out = train_regime(&init, regime, &tc, &tok, &train, &val)?;
    out.checkpoint.save(&a.out)?;
    write_log_csv(&a.log.unwrap_or_else(|| a.out.with_extension("csv")), &out.log)?;
    log::info!("{regime}: best epoch {} with validation loss {:.4}", out.best_epoch, out.best_val_loss);
    Ok(())
}

fn assemble(a: AssembleArgs) -> Result<()> {
    let ck = assemble_crashchat(&Checkpoint::load(&a.hetero)?, &Checkpoint::load(&a.homo_pc)?)?;
    ck.save(&a.out)?;
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let tasks = TaskId::parse_list(&a.tasks)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let tok = Tokenizer::from_templates();
    let videos = load_split(&a.data, a.split)?;
    let mut inf = Inference::new(&ckpt.model, &tok);
    inf.decoding = DecodingConfig { max_new_tokens: a.max_new_tokens };
    let preds: Vec<PredictionRecord> = match a.direct {
        Some(group) => infer_direct_all(&inf, &videos.samples, &tasks, group)?.0,
        None => {
            let (results, stats) = infer_all(&inf, &videos.samples, &tasks)?;
            log::info!(
                "{} queries; {} of {} localization queries passed the gate; adapter invocations Lc {} Pc {}",
                stats.queries,
                stats.localization_passed_gate,
                stats.localization_queries,
                stats.invocations.lc,
                stats.invocations.pc
            );
            results.into_iter().map(|r| r.final_record).collect()
        }
    };
    match &a.out {
        Some(p) => write_jsonl(p, &preds)?,
        None => {
            let mut out = std::io::stdout().lock();
            for p in &preds {
                writeln!(out, "{}", serde_json::to_string(p)?)?;
            }
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ap_thresholds = a
        .ap_thresholds
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad AP threshold `{t}`")))
        .collect::<Result<Vec<_>>>()?;
    let cfg = EvalConfig { delta: a.delta, ap_thresholds };
    let preds: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    let videos = load_split(&a.data, a.split)?;
    let report = evaluate_run(&preds, &videos.samples, &load_qa(&a.data)?, &cfg, None)?;
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &a.overrides {
        cfg = cfg.with_override(o)?;
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    let stages = Stage::parse_list(&a.stages).map_err(anyhow::Error::msg)?;
    let report = stages.contains(&Stage::Report);
    let summary = run_experiment(&cfg, &RunOptions { stages, force: a.force })?;
    if report {
        let path = RunLayout::new(&summary.run_dir).comparison("txt");
        print!("{}", std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?);
    }
    log::info!(
        "run {} (config {}): ran {:?}, skipped {:?}",
        summary.run_dir.display(),
        summary.config_hash,
        summary.executed,
        summary.skipped
    );
    Ok(())
}
