//! Command-line harness: train, eval, bench, gradcheck, synth and
//! export-embeddings.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hmamba::autodiff::Fault;
use hmamba::metrics::Split;
use hmamba::model::Variant;
use hmamba::train::OptimizerKind;

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "hmamba", version, about = "Hyperbolic selective state-space sequential recommender")]
pub struct Cli {
    /// Configuration file with flat dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.d=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (relative paths resolve under $HMAMBA_OUTPUT_ROOT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and per-epoch log.
    Train(TrainArgs),
    /// Full-catalog leave-one-out evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Time encoder forwards across sequence lengths.
    Bench(BenchArgs),
    /// Compare backward against finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic hierarchical interaction log.
    Synth(SynthArgs),
    /// Write item coordinates of a checkpoint as CSV.
    ExportEmbeddings(ExportArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: hmamba::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse().map_err(|e: hmamba::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split '{other}' (expected valid or test)")),
    }
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    let (name, value) = s.split_once('=').unwrap_or((s, "2.0"));
    match name {
        "silu-grad-scale" => value
            .parse()
            .map(Fault::SiluGradScale)
            .map_err(|_| format!("invalid scale '{value}'")),
        other => Err(format!("unknown fault '{other}'")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Interaction CSV or serialized dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Training-length bucket bounds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub buckets: Vec<usize>,
    /// Drop each user's input items from the candidates.
    #[arg(long)]
    pub exclude_history: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    /// Variants plus `attention`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variant: Vec<Variant>,
    /// Test hook corrupting a gradient rule, e.g. `silu-grad-scale=1.5`.
    #[arg(long, hide = true, value_parser = parse_fault)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub branching: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Destination file; defaults to `embeddings.csv` in the output directory.
    #[arg(long)]
    pub out_file: Option<PathBuf>,
}

/// Resolves the configuration of a parsed command line.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.output.dir = Some(out.clone());
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(v) = a.variant {
                cfg.model.variant = v;
                cfg.model_explicit = true;
            }
            if let Some(p) = &a.data {
                cfg.data.path = Some(p.clone());
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(o) = a.optimizer {
                cfg.train.optimizer = o;
            }
        }
        Command::Eval(a) => {
            if let Some(c) = &a.checkpoint {
                cfg.eval.checkpoint = Some(c.clone());
            }
            if let Some(p) = &a.data {
                cfg.data.path = Some(p.clone());
            }
            if !a.k.is_empty() {
                cfg.eval.ks = a.k.clone();
            }
            if let Some(s) = a.split {
                cfg.eval.split = s;
            }
            if !a.buckets.is_empty() {
                cfg.eval.buckets = a.buckets.clone();
            }
            if a.exclude_history {
                cfg.eval.exclude_history = true;
            }
        }
        Command::Bench(a) => {
            if !a.lengths.is_empty() {
                cfg.bench.lengths = a.lengths.clone();
            }
            if !a.variants.is_empty() {
                cfg.bench.variants = a.variants.clone();
            }
            if let Some(r) = a.reps {
                cfg.bench.reps = r;
            }
            if let Some(w) = a.warmup {
                cfg.bench.warmup = w;
            }
        }
        Command::Gradcheck(a) => {
            if !a.variant.is_empty() {
                cfg.gradcheck.variants = a.variant.iter().map(|v| v.name().to_string()).collect();
            }
        }
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            s.seed = a.seed.unwrap_or(s.seed);
            s.depth = a.depth.unwrap_or(s.depth);
            s.branching = a.branching.unwrap_or(s.branching);
            s.users = a.users.unwrap_or(s.users);
            s.len = a.len.unwrap_or(s.len);
        }
        Command::ExportEmbeddings(a) => {
            if let Some(c) = &a.checkpoint {
                cfg.eval.checkpoint = Some(c.clone());
            }
        }
    }
    if cfg.eval.ks.iter().any(|&k| k == 0) {
        return Err(CliError::Usage("cutoffs must be at least 1".into()));
    }
    Ok(cfg)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Train(_) => {
            let o = commands::train(&cfg)?;
            println!("final loss {:.6}", o.final_loss);
            println!("wrote {}", o.dir.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Eval(_) => {
            let o = commands::eval(&cfg)?;
            print!("{}", o.report.to_table());
            println!("wrote {}", o.dir.join(commands::METRICS_FILE).display());
        }
        Command::Bench(_) => {
            let o = commands::bench(&cfg)?;
            for (v, s) in o.slopes() {
                println!("{v:<10} log-log slope {s:.3}");
            }
            println!("wrote {}", o.dir.join(commands::BENCH_FILE).display());
        }
        Command::Gradcheck(a) => {
            let o = commands::gradcheck_cmd(&cfg, a.inject_fault)?;
            print!("{}", o.text);
            if !o.passed() {
                return Err(CliError::Check(format!(
                    "gradient mismatch in {}",
                    o.failing_groups().join(", ")
                )));
            }
            println!("gradcheck passed");
        }
        Command::Synth(_) => {
            let o = commands::synth(&cfg)?;
            println!("wrote {} interactions to {}", o.records, o.dir.display());
        }
        Command::ExportEmbeddings(a) => {
            let o = commands::export_embeddings(&cfg, a.out_file.as_deref())?;
            println!("wrote {} rows to {}", o.rows, o.path.display());
        }
    }
    Ok(error::EXIT_OK)
}
