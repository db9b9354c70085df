use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use arlc::config::RunConfig;
use arlc::error::Error;
use arlc::runner;

/// Training stack for adaptive recurrent lateral blocks.
#[derive(Parser)]
#[command(name = "arlc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one phase of one model family.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split, per iteration.
    Eval(EvalArgs),
    /// Run the full experiment grid and write a summary table.
    Reproduce(ReproduceArgs),
    /// Check every backward rule against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline | baseline-big | recurrent
    #[arg(long)]
    family: Option<String>,
    /// 1 or 2
    #[arg(long)]
    phase: Option<u8>,
    /// Recurrent iteration count K.
    #[arg(long)]
    iterations: Option<usize>,
    /// Weight-update step size.
    #[arg(long)]
    alpha: Option<f64>,
    /// Improvement-hinge weight (0 disables it).
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated per-iteration loss coefficients (K-1 values).
    #[arg(long)]
    gammas: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// Learning-rate multiplier for the adaptation head in phase two.
    #[arg(long)]
    head_lr_scale: Option<f64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Output directory name; derived from the config when omitted.
    #[arg(long)]
    run_id: Option<String>,
    /// Phase-1 checkpoint to initialize phase 2 from.
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
    /// Record real wall-clock seconds in metrics.csv (off keeps identically
    /// seeded runs byte-identical).
    #[arg(long)]
    timing: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Evaluate with a different iteration count than the checkpoint's.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    #[arg(long, default_value = "out/reproduce")]
    out_dir: PathBuf,
    /// Comma-separated seeds; rows report the mean across them.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Max configurations trained concurrently.
    #[arg(long, default_value_t = 2)]
    jobs: usize,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately corrupt the named op's analytic gradient; the run must
    /// then fail. A self-test of the harness.
    #[arg(long)]
    self_test_corrupt: Option<String>,
}

fn build_train_config(args: &TrainArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    let mut file_keys = std::collections::BTreeSet::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        file_keys = cfg.apply_text(&text)?;
    }
    let mut overrides: Vec<(&str, String)> = Vec::new();
    macro_rules! flag {
        ($field:ident, $key:literal) => {
            if let Some(v) = &args.$field {
                overrides.push(($key, v.to_string()));
            }
        };
    }
    flag!(family, "family");
    flag!(phase, "phase");
    flag!(iterations, "iterations");
    flag!(alpha, "alpha");
    flag!(lambda, "lambda");
    flag!(gammas, "gammas");
    flag!(epochs, "epochs");
    flag!(seed, "seed");
    flag!(batch_size, "batch_size");
    flag!(learning_rate, "learning_rate");
    flag!(momentum, "momentum");
    flag!(lr_decay_factor, "lr_decay_factor");
    flag!(head_lr_scale, "head_lr_scale");
    flag!(run_id, "run_id");
    if let Some(v) = &args.data_dir {
        overrides.push(("data_dir", v.display().to_string()));
    }
    if let Some(v) = &args.out_dir {
        overrides.push(("out_dir", v.display().to_string()));
    }
    if let Some(v) = &args.from_checkpoint {
        overrides.push(("from_checkpoint", v.display().to_string()));
    }
    if args.timing {
        overrides.push(("timing", "true".to_string()));
    }
    for (key, value) in overrides {
        if file_keys.contains(key) {
            eprintln!("note: command line overrides config file key {key:?}");
        }
        cfg.apply_kv(key, &value)?;
    }
    Ok(cfg)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad seed {p:?} in --seeds")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = build_train_config(&args)?;
            runner::run_train(&cfg, args.quiet)?;
            Ok(0)
        }
        Command::Eval(args) => {
            runner::run_eval(
                &args.checkpoint,
                &args.data_dir,
                args.iterations,
                false,
            )?;
            Ok(0)
        }
        Command::Reproduce(args) => {
            let seeds = parse_seeds(&args.seeds)?;
            runner::run_reproduce(&runner::ReproduceArgs {
                data_dir: args.data_dir,
                out_dir: args.out_dir,
                seeds,
                epochs: args.epochs,
                jobs: args.jobs,
                quiet: args.quiet,
            })?;
            Ok(0)
        }
        Command::Gradcheck(args) => {
            let ok = runner::run_gradcheck(args.seed, args.self_test_corrupt.as_deref())?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
