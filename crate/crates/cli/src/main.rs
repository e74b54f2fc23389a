mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::Failure;
use config::RunConfig;

/// Region-head training with online hard example mining on a synthetic
/// detection benchmark.
#[derive(Parser, Debug)]
#[command(name = "ohem", version)]
struct Cli {
    /// Seed for dataset generation and training (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` override; repeatable. Applied after the config file
    /// and before the dedicated flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate `<name>.train` and `<name>.test` dataset files.
    Gen,
    /// Train a region head on a dataset file.
    Train(TrainArgs),
    /// Detect on a dataset split with a snapshot and score mAP.
    Eval(EvalArgs),
    /// Run the six-variant hyper-parameter table over the ablation seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset file (config key `dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// heuristic, ohem or all.
    #[arg(long)]
    strategy: Option<String>,
    /// Images per mini-batch.
    #[arg(long)]
    n: Option<usize>,
    /// Regions per mini-batch.
    #[arg(long)]
    b: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Lower IoU bound for background regions.
    #[arg(long)]
    bg_lo: Option<f64>,
    /// Total iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Continue from a snapshot written by an earlier run with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Snapshot file to evaluate.
    #[arg(long)]
    snapshot: PathBuf,
    /// Dataset split file to evaluate on (config key `test_dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Iterative localisation with box voting.
    #[arg(long)]
    iterative_bbox: bool,
    #[arg(long)]
    score_thresh: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training split file; generated from the config when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Held-out split file; generated from the config when omitted.
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    /// Iterations per run.
    #[arg(long)]
    iters: Option<usize>,
    /// Comma-separated training seeds.
    #[arg(long)]
    seeds: Option<String>,
}

fn files_help() -> String {
    use ohem_core::detecteval::{DETECTIONS_CSV_HEADER, REPORT_CSV_HEADER};
    use ohem_core::trainer::{ABLATION_CSV_HEADER, RECORDS_CSV_HEADER, TIMING_CSV_HEADER};
    let keys = |ks: &[&str]| ks.join(", ");
    format!(
        "\
Config keys (one namespace for all commands; flags override the file):
  general:   {}
  dataset:   {}
  training:  {}
  detection: {}

Output files (CSV columns in order):
  gen     <name>.train, <name>.test
  train   snap_<iter>
          {}: {RECORDS_CSV_HEADER}
          {}: {TIMING_CSV_HEADER}
          {}: {}
  eval    {}: {DETECTIONS_CSV_HEADER}
          {}: {REPORT_CSV_HEADER}
  ablate  {}: {ABLATION_CSV_HEADER}
Every output directory also holds manifest.json.

Exit codes: 0 success, 1 other failure, 2 config error, 3 training abort, 4 eval error.",
        keys(config::OTHER_KEYS),
        keys(ohem_core::synthdata::DatasetConfig::KEYS),
        keys(config::TRAIN_KEYS),
        keys(config::DETECT_KEYS),
        commands::ITERATIONS_CSV,
        commands::TIMING_CSV,
        commands::LOSS_CURVE_CSV,
        commands::LOSS_CURVE_CSV_HEADER,
        commands::DETECTIONS_CSV,
        commands::REPORT_CSV,
        commands::ABLATION_CSV,
    )
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, Failure> {
    let mut kv: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.push((k.to_string(), v));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match &cli.command {
        Command::Gen => {}
        Command::Train(a) => {
            push("dataset", path(&a.dataset));
            push("strategy", a.strategy.clone());
            push("images_per_batch", a.n.map(|v| v.to_string()));
            push("batch_size", a.b.map(|v| v.to_string()));
            push("lr", a.lr.map(|v| format!("{v:?}")));
            push("bg_lo", a.bg_lo.map(|v| format!("{v:?}")));
            push("total_iters", a.iters.map(|v| v.to_string()));
        }
        Command::Eval(a) => {
            push("test_dataset", path(&a.dataset));
            push("iterative_bbox", a.iterative_bbox.then(|| "true".to_string()));
            push("score_thresh", a.score_thresh.map(|v| format!("{v:?}")));
        }
        Command::Ablate(a) => {
            push("dataset", path(&a.dataset));
            push("test_dataset", path(&a.test_dataset));
            push("total_iters", a.iters.map(|v| v.to_string()));
            push("ablation_seeds", a.seeds.clone());
        }
    }
    let mut set = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        set.push((k.trim().to_string(), v.trim().to_string()));
    }
    set.extend(kv);
    Ok(set)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let text = match &cli.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let cfg = RunConfig::load(text.as_deref(), &overrides(cli)?).map_err(|e| Failure::Config(e.to_string()))?;
    match &cli.command {
        Command::Gen => commands::gen(&cfg, &cli.out),
        Command::Train(a) => commands::train(&cfg, a.resume.as_deref(), &cli.out),
        Command::Eval(a) => commands::eval(&cfg, &a.snapshot, &cli.out),
        Command::Ablate(_) => commands::ablate(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(files_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
