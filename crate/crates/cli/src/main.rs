use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use graded_core::diagnostics::{ablate, all_edges, diagnose};
use graded_core::experiment::{run_experiment, Experiment, ExperimentConfig, TaskKind};
use graded_core::model::GradedModel;
use graded_core::verify::{self, Fault, Options, Suite};
use serde::Serialize;
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

/// Log filter, e.g. `GT_LOG=debug`.
const LOG_ENV: &str = "GT_LOG";

#[derive(Parser, Debug)]
#[command(name = "gt", version, about = "Graded-transformer experiments, diagnostics and verification")]
struct Cli {
    /// TOML experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides both the model and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory [default: runs/<task>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write the checkpoint, metrics stream and summary.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the fixed evaluation batch.
    Eval(CheckpointArgs),
    /// Write utility histograms, entropy, ablations and calibration as JSON and CSV.
    Diagnose {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Mask edges and report the loss degradation.
    Ablate {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// `g:h` by grade alias or index, or `all`. Repeatable.
        #[arg(long, required = true)]
        edge: Vec<String>,
        /// Restrict to one layer; by default the edge is masked wherever it exists.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Run the numerical verification suites.
    Verify {
        /// A suite name or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Inject a known defect to exercise the failure path.
        #[arg(long)]
        fault: Option<String>,
        /// Print the JSON report instead of one line per check.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Overrides the config's task.
    #[arg(long, value_enum)]
    task: Option<Task>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Modp,
    Retrieval,
    Dyck,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Modp => TaskKind::Modp,
            Task::Retrieval => TaskKind::Retrieval,
            Task::Dyck => TaskKind::Dyck,
        }
    }
}

/// Errors that map to exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Config errors from the library are usage errors too.
fn lift(e: graded_core::Error) -> anyhow::Error {
    match e {
        graded_core::Error::Config { .. } | graded_core::Error::UnknownGrade(_) => usage(e.to_string()),
        other => other.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether the command passed.
fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train { run, steps } => {
            let mut cfg = resolve_config(&cli, run)?;
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            cfg.validate().map_err(lift)?;
            print_config(&cfg)?;
            train(&cfg, &out_dir(&cli, &cfg))
        }
        Command::Eval(ckpt) => {
            let (exp, _) = load(&cli, ckpt)?;
            let batch = exp.eval_batch()?;
            let (mass, positive) = exp.designated_stats(&batch)?;
            emit(&EvalSummary {
                task: exp.config.task,
                tokens: batch.len(),
                lm_loss: exp.model.lm_loss(&batch)?,
                designated_edge: designated_label(&exp),
                designated_mass: mass,
                designated_positive: positive,
            })?;
            Ok(true)
        }
        Command::Diagnose { ckpt, bins } => {
            let (exp, out) = load(&cli, ckpt)?;
            let batch = exp.eval_batch()?;
            let bundle = diagnose(&exp.model, &batch, *bins).map_err(lift)?;
            let dir = out.join("diagnostics");
            bundle.write_dir(&dir)?;
            info!(dir = %dir.display(), "wrote diagnostics");
            emit(&DiagnoseSummary {
                dir: dir.display().to_string(),
                tokens: bundle.tokens,
                entropy: bundle.entropy.iter().map(|e| e.entropy).collect(),
                max_entropy: bundle.entropy.iter().map(|e| e.max_entropy).collect(),
                positive_fraction: bundle
                    .utilities
                    .iter()
                    .map(|u| (format!("layer{}.{}", u.layer, u.edge), u.positive_fraction))
                    .collect(),
            })?;
            Ok(true)
        }
        Command::Ablate { ckpt, edge, layer } => {
            let (exp, out) = load(&cli, ckpt)?;
            let targets = resolve_edges(&exp.model, edge, *layer)?;
            let batch = exp.eval_batch()?;
            let a = ablate(&exp.model, &batch, &targets).map_err(lift)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&a)?)?;
            emit(&a)?;
            Ok(true)
        }
        Command::Verify { suite, fault, json } => {
            let selection = match suite.as_str() {
                "all" => None,
                s => Some(s.parse::<Suite>().map_err(lift)?),
            };
            let opts = Options {
                fault: fault.as_deref().map(str::parse::<Fault>).transpose().map_err(lift)?,
            };
            if let Some(f) = opts.fault {
                warn!(?f, "running with an injected fault");
            }
            let report = verify::run(selection, &opts);
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for c in &report.checks {
                    println!("{c}");
                }
                println!("{} passed, {} failed", report.passed, report.failed);
            }
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
            }
            Ok(report.pass)
        }
    }
}

fn resolve_config(cli: &Cli, run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<ExperimentConfig>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(t) = run.task {
        cfg.task = t.into();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn print_config(cfg: &ExperimentConfig) -> Result<()> {
    eprintln!("# resolved config\n{}", toml::to_string(cfg)?);
    Ok(())
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        let name = serde_json::to_value(cfg.task).ok().and_then(|v| v.as_str().map(String::from));
        Path::new("runs").join(name.unwrap_or_else(|| "run".into()))
    })
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), toml::to_string(cfg)?)?;
    let mut exp = Experiment::build(cfg).map_err(lift)?;
    info!(task = ?cfg.task, steps = cfg.train.steps, "training");
    let mut metrics = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let report = run_experiment(&mut exp, Some(&mut metrics))?;
    metrics.flush()?;
    exp.model.save(out.join("checkpoint.json"))?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    info!(out = %out.display(), "wrote checkpoint, metrics and report");
    emit(&TrainSummary {
        task: report.task,
        steps: report.steps,
        initial_lm: report.initial_lm,
        final_lm: report.final_lm,
        designated_edge: designated_label(&exp),
        final_mass: report.final_mass,
        final_positive: report.final_positive,
        out: out.display().to_string(),
    })?;
    Ok(true)
}

/// Builds the experiment from the config and swaps in the checkpointed model.
fn load(cli: &Cli, args: &CheckpointArgs) -> Result<(Experiment, PathBuf)> {
    let cfg = resolve_config(cli, &args.run)?;
    cfg.validate().map_err(lift)?;
    print_config(&cfg)?;
    let out = out_dir(cli, &cfg);
    let path = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    if !path.exists() {
        bail!("checkpoint {} not found; run `gt train` first", path.display());
    }
    let mut exp = Experiment::build(&cfg).map_err(lift)?;
    let model = GradedModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if model.grading != exp.model.grading {
        return Err(usage(format!("checkpoint {} does not match the configured task", path.display())));
    }
    exp.model = model;
    Ok((exp, out))
}

fn resolve_edges(model: &GradedModel, specs: &[String], layer: Option<usize>) -> Result<Vec<(usize, usize)>> {
    if let Some(l) = layer {
        if l >= model.layers.len() {
            return Err(usage(format!("layer {l} out of range ({} layers)", model.layers.len())));
        }
    }
    let in_scope = |l: usize| layer.is_none_or(|x| x == l);
    let mut out = Vec::new();
    for spec in specs {
        if spec == "all" {
            out.extend(all_edges(model).into_iter().filter(|&(l, _)| in_scope(l)));
            continue;
        }
        let edge = model.grading.resolve_edge(spec).map_err(lift)?;
        let found: Vec<(usize, usize)> = model
            .layers
            .iter()
            .enumerate()
            .filter(|&(l, _)| in_scope(l))
            .filter_map(|(l, layer)| layer.edges.index_of(edge).ok().map(|e| (l, e)))
            .collect();
        if found.is_empty() {
            return Err(usage(format!("edge {spec} is not admissible in the selected layers")));
        }
        out.extend(found);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn designated_label(exp: &Experiment) -> String {
    let (l, e) = exp.designated;
    format!("layer{l}.{}", exp.model.layers[l].edges.get(e))
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    task: TaskKind,
    steps: usize,
    initial_lm: f64,
    final_lm: f64,
    designated_edge: String,
    final_mass: f64,
    final_positive: f64,
    out: String,
}

#[derive(Serialize)]
struct EvalSummary {
    task: TaskKind,
    tokens: usize,
    lm_loss: f64,
    designated_edge: String,
    designated_mass: f64,
    designated_positive: f64,
}

#[derive(Serialize)]
struct DiagnoseSummary {
    dir: String,
    tokens: usize,
    entropy: Vec<f64>,
    max_entropy: Vec<f64>,
    positive_fraction: Vec<(String, f64)>,
}
