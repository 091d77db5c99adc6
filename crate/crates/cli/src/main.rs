use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use offshelf_core::backend::{
    read_embeddings, synth_gaussian, write_embeddings, SynthParams, SynthSplit,
};
use offshelf_core::harness::{
    evaluate_learner, run_benchmark, run_training, BankManifest, Learner, RunConfig, RunReport,
};
use offshelf_core::protocol::{make_nc_scenario, validate_stream};
use offshelf_core::{EvalMode, MemoryBank, Metric};

mod config;

use config::{FileConfig, UsageError};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  runtime error (I/O, malformed input file, protocol violation)
  2  usage error (bad flags, invalid or incomplete configuration)";

#[derive(Debug, Parser)]
#[command(name = "offshelf", version, about = "Nearest-prototype continual learning over precomputed embeddings", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build and validate a class-incremental scenario, print a task summary.
    Split(RunArgs),
    /// Run the training phase and write a bank snapshot.
    Train(RunArgs),
    /// Evaluate a saved bank on a test file and write a report.
    Eval(EvalArgs),
    /// Train task by task and evaluate after each, writing the full report.
    Bench(BenchArgs),
    /// Write a synthetic Gaussian embedding file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Optional TOML file with run settings; flags take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Training embedding file.
    #[arg(long, value_name = "PATH")]
    train: Option<PathBuf>,
    /// Test embedding file.
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
    /// Number of tasks to split the classes into.
    #[arg(long, value_name = "N")]
    tasks: Option<usize>,
    #[arg(long, value_name = "l2|cosine")]
    metric: Option<Metric>,
    #[arg(long, value_name = "agnostic|aware")]
    mode: Option<EvalMode>,
    /// Unit-normalize features, prototypes, and queries.
    #[arg(long, value_name = "BOOL", action = ArgAction::Set)]
    normalize: Option<bool>,
    /// Group each task by k-means clusters instead of labels.
    #[arg(long)]
    unsupervised: bool,
    /// Clusters per task (with --unsupervised).
    #[arg(long, value_name = "K")]
    k: Option<usize>,
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Output path (bank for `train`, report for `eval`/`bench`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Treat a class that reappears in a later task as an error.
    #[arg(long = "strict-nc", value_name = "BOOL", action = ArgAction::Set)]
    strict_nc: Option<bool>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Bank snapshot written by `train`.
    #[arg(long, value_name = "PATH")]
    bank: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Also write the accuracy matrix as CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Leave wall-clock timings out of the report.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: u32,
    #[arg(long, default_value_t = 100)]
    per_class: u32,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Distance between class centers in units of the noise sigma.
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut c = file.apply(RunConfig::default());
        if let Some(v) = &self.train {
            c.train = Some(v.clone());
        }
        if let Some(v) = &self.test {
            c.test = Some(v.clone());
        }
        if let Some(v) = self.tasks {
            c.tasks = v;
        }
        if let Some(v) = self.metric {
            c.metric = v;
        }
        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = self.normalize {
            c.normalize = v;
        }
        if self.unsupervised {
            c.unsupervised = true;
        }
        if let Some(v) = self.k {
            c.k = Some(v);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        if let Some(v) = self.strict_nc {
            c.strict_nc = v;
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| UsageError(format!("{flag} is required")))?;
    if !p.exists() {
        return Err(UsageError(format!("{flag} {} does not exist", p.display())).into());
    }
    Ok(p)
}

fn manifest_path(bank: &Path) -> PathBuf {
    let mut s = bank.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn emit_report(report: &RunReport, out: Option<&Path>, opts: &OutputArgs) -> Result<()> {
    let json = if opts.no_timing {
        report.to_deterministic_json()
    } else {
        report.to_json()
    };
    match out {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &opts.csv {
        fs::write(p, report.matrix_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn split(args: &RunArgs) -> Result<()> {
    let config = args.resolve()?;
    let train = read_embeddings(require(&config.train, "--train")?)?;
    println!(
        "{} records, dim {}, backbone '{}', split '{}'",
        train.len(),
        train.dim(),
        train.backbone_tag(),
        train.split_tag()
    );
    let stream = make_nc_scenario(train.into_records(), config.tasks, None)?;
    for task in stream.tasks() {
        println!(
            "task {}: {} classes {:?}, {} examples",
            task.task_id(),
            task.class_ids().len(),
            task.class_ids(),
            task.examples().len()
        );
    }
    let report = validate_stream(&stream, config.strict_nc);
    for issue in &report.issues {
        println!("{issue}");
    }
    report.into_result()?;
    println!("stream valid");
    Ok(())
}

fn train(args: &RunArgs) -> Result<()> {
    let config = args.resolve()?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| UsageError("--out is required for train".into()))?;
    let data = read_embeddings(require(&config.train, "--train")?)?;
    let stream = make_nc_scenario(data.into_records(), config.tasks, None)?;
    let learner = run_training(&stream, &config)?;
    let bytes = learner.bank().snapshot()?;
    fs::write(&out, bytes).with_context(|| format!("writing {}", out.display()))?;
    let manifest = manifest_path(&out);
    fs::write(
        &manifest,
        serde_json::to_string_pretty(learner.manifest())? + "\n",
    )
    .with_context(|| format!("writing {}", manifest.display()))?;
    let mem = learner.bank().memory();
    println!(
        "{} prototypes from {} examples over {} tasks; {} bytes ({} KiB)",
        learner.bank().len(),
        learner.examples_seen(),
        stream.len(),
        mem.total_bytes,
        mem.total_kib
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut config = args.run.resolve()?;
    let manifest_file = manifest_path(&args.bank);
    let manifest: BankManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_file)
            .with_context(|| format!("reading {}", manifest_file.display()))?,
    )
    .with_context(|| format!("parsing {}", manifest_file.display()))?;
    let bytes = fs::read(&args.bank).with_context(|| format!("reading {}", args.bank.display()))?;
    let bank = MemoryBank::restore(&bytes, manifest.bank_options)
        .with_context(|| format!("restoring {}", args.bank.display()))?;

    // settings fixed at training time come from the manifest
    if args.run.normalize.is_none() {
        config.normalize = manifest.bank_options.normalize_features;
    }
    config.strict_nc = manifest.bank_options.strict_nc;
    config.unsupervised = manifest.clusters_per_task.is_some();
    config.k = manifest.clusters_per_task;
    if args.run.tasks.is_none() {
        config.tasks = manifest.class_groups.len();
    }
    if config.tasks != manifest.class_groups.len() {
        return Err(UsageError(format!(
            "--tasks {} disagrees with the bank's {} training tasks",
            config.tasks,
            manifest.class_groups.len()
        ))
        .into());
    }

    let test = read_embeddings(require(&config.test, "--test")?)?;
    let learner = Learner::from_parts(bank, manifest)?;
    let report = evaluate_learner(&learner, test, &config)?;
    emit_report(&report, config.out.as_deref(), &args.output)?;
    eprintln!("final accuracy {:.4}", report.final_accuracy);
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let config = args.run.resolve()?;
    let train = read_embeddings(require(&config.train, "--train")?)?;
    let test = read_embeddings(require(&config.test, "--test")?)?;
    let report = run_benchmark(train, test, &config)?;
    emit_report(&report, config.out.as_deref(), &args.output)?;
    eprintln!(
        "final accuracy {:.4} (average over tasks {:.4}), memory {} KiB",
        report.final_accuracy, report.final_average_accuracy, report.memory.total_kib
    );
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let params = SynthParams {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        separation: args.separation,
        seed: args.seed,
        split: match args.split {
            SplitArg::Train => SynthSplit::Train,
            SplitArg::Test => SynthSplit::Test,
        },
    };
    let ds = synth_gaussian(&params).map_err(|e| UsageError(e.to_string()))?;
    write_embeddings(&ds, &args.out)?;
    println!(
        "wrote {} records (dim {}) to {}",
        ds.len(),
        ds.dim(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
