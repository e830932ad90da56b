mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use segkit_core::data::recipes::{self, raw_pairs, read_class_table, Recipe};
use segkit_core::data::store::DiskSink;
use segkit_core::data::{generate_synthetic, DatasetManifest, Split, SynthConfig};
use segkit_core::experiments::{self, build_report, ExperimentPlan, RoleDatasets};
use segkit_core::trainer::{self, evaluate, Checkpoint, CHECKPOINT_DIR};
use segkit_core::transfer::{self, transfer_weights};

use crate::config::{ConfigError, RunConfigFile};

const CACHE_ENV: &str = "PATCHGAN_SEGKIT_CACHE";

#[derive(Parser)]
#[command(
    name = "patchgan-segkit",
    version,
    about = "PatchGAN segmentation training, transfer, and experiments"
)]
struct Cli {
    /// More log output (repeatable); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural blob dataset.
    SynthData(SynthArgs),
    /// Preprocess raw image/mask pairs with one of the dataset recipes.
    PrepareData(PrepareArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Build a target checkpoint from a source checkpoint, skipping input layers.
    Transfer(TransferArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run (or resume) the scratch/transfer experiment matrix.
    Experiment(ExperimentArgs),
    /// Build comparison tables, plots, and mask grids for an experiment.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML run config; its [data] section is the starting point.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train samples [default: 64]
    #[arg(long)]
    n: Option<usize>,
    /// Test samples [default: 16]
    #[arg(long)]
    n_test: Option<usize>,
    /// 3 (RGB) or 4 (BGR + NIR) [default: 3]
    #[arg(long)]
    channels: Option<usize>,
    /// Image side in pixels [default: 256]
    #[arg(long)]
    side: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset name [default: synthetic]
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecipeArg {
    Ff,
    Fc,
    Coco,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    recipe: RecipeArg,
    /// Manifest directory listing the raw pairs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output dataset name [default: the recipe name]
    #[arg(long)]
    name: Option<String>,
    /// COCO: class kept as foreground.
    #[arg(long)]
    class_name: Option<String>,
    /// COCO: class table [default: <input>/classes.json]
    #[arg(long)]
    classes: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint directory (e.g. a transfer output).
    #[arg(long)]
    init: Option<PathBuf>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TransferArgs {
    /// Source checkpoint directory.
    #[arg(long)]
    source: PathBuf,
    /// Run config whose [model] section describes the target.
    #[arg(long)]
    target_config: Option<PathBuf>,
    /// Override the target's image channel count.
    #[arg(long)]
    channels: Option<usize>,
    /// Seed for the freshly initialized layers [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = trainer::THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Directory for evaluation.json and per_sample.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent runs [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
    /// Role manifests; override [experiment.datasets].
    #[arg(long, requires_all = ["data_b", "data_c"])]
    data_a: Option<PathBuf>,
    #[arg(long, requires_all = ["data_a", "data_c"])]
    data_b: Option<PathBuf>,
    #[arg(long, requires_all = ["data_a", "data_b"])]
    data_c: Option<PathBuf>,
    /// Comma-separated [default: 0.1,0.25,0.5,0.75,1]
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Comma-separated [default: 1]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// Also build the report into <out>/report.
    #[arg(long)]
    report: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment output directory.
    #[arg(long)]
    experiment: PathBuf,
    /// [default: <experiment>/report]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mask grids to draw [default: from the experiment settings]
    #[arg(long)]
    samples: Option<usize>,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        "warn"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(&cli);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage/config, 2 data, 3 runtime.
fn exit_code(e: &anyhow::Error) -> u8 {
    use segkit_core::Error as E;
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core.root() {
                E::Config(_) | E::Value(_) => 1,
                E::Data(_) | E::Format { .. } | E::Io { .. } | E::Shape { .. } => 2,
                _ => 3,
            };
        }
    }
    3
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::PrepareData(a) => prepare_data(a),
        Command::Train(a) => train(a),
        Command::Transfer(a) => transfer(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(a.config.as_deref())?;
    let d = &mut cfg.data;
    if let Some(v) = a.n {
        d.n_samples = v;
    }
    if let Some(v) = a.n_test {
        d.n_test = v;
    }
    if let Some(v) = a.channels {
        d.channels = v;
    }
    if let Some(v) = a.side {
        if d.blob_radius_range == SynthConfig::default_radius_range(d.side) {
            d.blob_radius_range = SynthConfig::default_radius_range(v);
        }
        d.side = v;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if let Some(v) = a.name {
        d.name = v;
    }
    let m = generate_synthetic(&cfg.data, &a.out)?;
    info!(
        "wrote {} ({} train, {} test) to {}",
        m.name,
        m.count(Split::Train),
        m.count(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let input = DatasetManifest::load(&a.input).context("loading raw pair manifest")?;
    let mut sink = DiskSink::new(&a.out);
    let (recipe, count, semantics) = match a.recipe {
        RecipeArg::Ff => (
            Recipe::Ff,
            recipes::preprocess_ff(raw_pairs(&input, false), &mut sink)?,
            recipes::ff_channel_semantics(),
        ),
        RecipeArg::Fc => (
            Recipe::Fc,
            recipes::preprocess_fc(raw_pairs(&input, false), &mut sink)?,
            recipes::rgb_channel_semantics(),
        ),
        RecipeArg::Coco => {
            let Some(class) = a.class_name.as_deref() else {
                return Err(
                    ConfigError("--class-name is required for the coco recipe".into()).into(),
                );
            };
            let table_path = a
                .classes
                .clone()
                .unwrap_or_else(|| a.input.join("classes.json"));
            let table = read_class_table(&table_path)?;
            let n = recipes::preprocess_coco(raw_pairs(&input, true), class, &table, &mut sink)?;
            (Recipe::Coco, n, recipes::rgb_channel_semantics())
        }
    };
    let name = a.name.unwrap_or_else(|| {
        serde_json::to_value(recipe)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    });
    let m = sink.finish(&name, semantics)?;
    info!(
        "{name}: {} raw pairs -> {count} records in {}",
        input.records.len(),
        a.out.display()
    );
    debug_assert_eq!(m.records.len(), count);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    let manifest = DatasetManifest::load(&a.data)?;
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let mut specs = match &init {
        Some(c) => c.specs.clone(),
        None => cfg.model.clone(),
    };
    if init.is_none() && a.config.is_none() {
        specs.set_channels(manifest.channels());
    }
    cfg.model = specs.clone();
    cfg.echo(&a.out).context("writing resolved config")?;
    let outcome = trainer::train(&manifest, &specs, &cfg.train_config(), init, Some(&a.out))?;
    let last = outcome.metrics.last().expect("at least one epoch");
    info!(
        "done: {} epochs, final val_ftl {:.4}, checkpoint in {}",
        last.epoch,
        last.val_ftl,
        a.out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn transfer(a: TransferArgs) -> Result<()> {
    let cfg = RunConfigFile::load(a.target_config.as_deref())?;
    let source = Checkpoint::load(&a.source)?;
    let mut specs = cfg.model.clone();
    if let Some(c) = a.channels {
        specs.set_channels(c);
    }
    let (ckpt, report) = transfer_weights(&source, &specs, a.seed.unwrap_or(0))?;
    ckpt.save(&a.out.join(CHECKPOINT_DIR))?;
    report.save(&a.out.join(transfer::REPORT_FILE))?;
    info!(
        "copied {}, excluded {}, reinitialized {}; wrote {}",
        report.copied.len(),
        report.excluded.len(),
        report.reinitialized.len(),
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.data)?;
    if manifest.channels() != ckpt.specs.generator.in_channels {
        return Err(segkit_core::Error::Data(format!(
            "{} has {}-channel images, checkpoint expects {}",
            manifest.name,
            manifest.channels(),
            ckpt.specs.generator.in_channels
        ))
        .into());
    }
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let params = ckpt
        .train_config
        .as_ref()
        .map(|c| c.loss_params.clone())
        .unwrap_or_default();
    let g = ckpt.build_generator()?;
    let r = evaluate(&g, &manifest, split, &params, a.threshold, a.batch_size)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let summary = serde_json::json!({
        "split": r.split, "threshold": r.threshold, "samples": r.per_sample.len(),
        "val_ftl": r.ftl, "val_ti": r.ti, "val_iou": r.iou, "dice": r.dice,
    });
    std::fs::write(
        a.out.join("evaluation.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let mut csv = String::from("id,ftl,ti,iou,dice\n");
    for s in &r.per_sample {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.id, s.ftl, s.ti, s.iou, s.dice
        ));
    }
    std::fs::write(a.out.join("per_sample.csv"), csv)?;
    info!(
        "ftl {:.4}  ti {:.4}  iou {:.4}  dice {:.4}",
        r.ftl, r.ti, r.iou, r.dice
    );
    Ok(())
}

fn cache_dir(out: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join("cache"))
}

/// Generates (or reuses) the synthetic role datasets.
fn synthetic_roles(cfg: &RunConfigFile, out: &Path) -> Result<RoleDatasets> {
    let Some(s) = &cfg.experiment.synthetic else {
        return Err(ConfigError(
            "experiment needs [experiment.datasets], [experiment.synthetic], or --data-a/--data-b/--data-c".into(),
        )
        .into());
    };
    let root = cache_dir(out);
    let mut dirs = Vec::new();
    for (role, c) in [("a", &s.a), ("b", &s.b), ("c", &s.c)] {
        let dir = root.join(format!("synthetic_{role}"));
        let fresh = DatasetManifest::load(&dir)
            .ok()
            .filter(|m| m.name == c.name && m.count(Split::Train) == c.n_samples);
        if fresh.is_none() {
            info!(
                "generating role {} dataset in {}",
                role.to_uppercase(),
                dir.display()
            );
            generate_synthetic(c, &dir)?;
        }
        dirs.push(dir);
    }
    let c = dirs.pop().expect("three roles");
    let b = dirs.pop().expect("three roles");
    let a = dirs.pop().expect("three roles");
    Ok(RoleDatasets { a, b, c })
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(a.config.as_deref())?;
    if let Some(v) = a.jobs {
        cfg.experiment.jobs = v;
    }
    if let Some(v) = a.fractions {
        cfg.experiment.fractions = v;
    }
    if let Some(v) = a.seeds {
        cfg.experiment.seeds = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let (Some(x), Some(y), Some(z)) = (a.data_a, a.data_b, a.data_c) {
        cfg.experiment.datasets = Some(RoleDatasets { a: x, b: y, c: z });
    }
    let datasets = match cfg.experiment.datasets.clone() {
        Some(d) => d,
        None => synthetic_roles(&cfg, &a.out)?,
    };
    cfg.echo(&a.out).context("writing resolved config")?;
    let plan = ExperimentPlan {
        settings: cfg.experiment.settings(datasets),
        train_config: cfg.train_config(),
        specs: cfg.model.clone(),
        resolved_config: Some(cfg.to_toml()),
    };
    let results = experiments::run_experiment(&plan, &a.out)?;
    info!(
        "{} runs complete; index at {}",
        results.len(),
        a.out.join(experiments::RESULTS_INDEX).display()
    );
    if a.report {
        report(ReportArgs {
            experiment: a.out.clone(),
            out: None,
            samples: None,
        })?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let results = experiments::load_results(&a.experiment)?;
    let settings = experiments::load_settings(&a.experiment)?;
    let role_a = DatasetManifest::load(&settings.datasets.a)?;
    let samples = a.samples.unwrap_or(settings.report_samples);
    let out = a.out.unwrap_or_else(|| a.experiment.join("report"));
    let r = build_report(&a.experiment, &results, Some(&role_a), samples, &out)?;
    for (family, f) in &r.matched_at_fraction {
        match f {
            Some(f) => info!("{family}: matches scratch@1.00 from fraction {f:.2}"),
            None => info!("{family}: does not match scratch@1.00"),
        }
    }
    if r.families.is_empty() {
        return Err(segkit_core::Error::Data(format!(
            "no role-A runs found in {}",
            a.experiment.display()
        ))
        .into());
    }
    Ok(())
}
