//! `symreg` — train equation generators and search for symbolic models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use symreg_cli::commands::{
    self, BenchArgs, CanonArgs, GenCorpusArgs, ParetoArgs, PretrainArgs, RunArgs,
};
use symreg_cli::{configure_threads, CliError};

#[derive(Parser)]
#[command(name = "symreg", version, about = "Neural-guided symbolic regression")]
struct Cli {
    /// Cap the worker thread pool (also capped by SYMREG_THREADS).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic equation corpus for pre-training.
    GenCorpus(GenCorpus),
    /// Pre-train a generator on a corpus; writes a checkpoint.
    Pretrain(Pretrain),
    /// Search for equations on benchmark problems; writes one run
    /// directory per (problem, seed).
    Run(Run),
    /// Aggregate run directories into a benchmark report.
    Bench(Bench),
    /// Compare two prefix expressions up to algebraic identity.
    Canon(Canon),
    /// Reduce a complexity/error table to its Pareto front.
    Pareto(Pareto),
}

#[derive(Args)]
struct GenCorpus {
    /// Token library, e.g. koza-d1 or koza-const-d2.
    #[arg(long)]
    library: String,
    /// Number of equations to keep.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus file; a .manifest.json is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Promote some integer leaves to fitted constant slots.
    #[arg(long)]
    with_consts: bool,
    /// Benchmark problems whose ground truth must not appear in the corpus.
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<String>,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint; .log.jsonl and .config.toml are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sampled equations per dataset per mini-batch.
    #[arg(long)]
    k: Option<usize>,
    /// Datasets per mini-batch.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    max_minibatches: Option<usize>,
    /// Maximize corpus likelihood instead of expected reward.
    #[arg(long)]
    ce_pretrain: bool,
    /// Train without dataset conditioning.
    #[arg(long)]
    no_encoder: bool,
    /// Continue from an earlier checkpoint (restores optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Run {
    /// Benchmark problems, e.g. Nguyen-1,Feynman-3.
    #[arg(long, value_delimiter = ',', required = true)]
    problems: Vec<String>,
    /// `0..9` (inclusive) or a comma list.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cap on expression evaluations per run.
    #[arg(long)]
    budget: Option<u64>,
    /// Equations sampled per search iteration.
    #[arg(long)]
    k: Option<usize>,
    /// Skip the evolutionary refinement step.
    #[arg(long)]
    no_gp: bool,
    #[arg(long)]
    no_encoder: bool,
    /// Additive target noise as a fraction of the target RMS.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Keep only this many training rows.
    #[arg(long)]
    subsample: Option<usize>,
    /// Pointwise relative-error threshold for the accuracy metric.
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
}

#[derive(Args)]
struct Bench {
    /// Directory produced by `symreg run` (searched recursively).
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
}

#[derive(Args)]
struct Canon {
    /// Prefix expression, e.g. "add x1 x1".
    left: String,
    /// Prefix expression, e.g. "mul 2 x1".
    right: String,
    #[arg(long, default_value_t = -1.0)]
    lo: f64,
    #[arg(long, default_value_t = 1.0)]
    hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Pareto {
    /// CSV with complexity,nmse,equation columns.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.workers)?;
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(GenCorpusArgs {
            library: a.library,
            count: a.count,
            seed: a.seed,
            out: a.out,
            config: a.config,
            with_consts: a.with_consts,
            holdout: a.holdout,
        }),
        Command::Pretrain(a) => commands::cmd_pretrain(PretrainArgs {
            corpus: a.corpus,
            out: a.out,
            seed: a.seed,
            config: a.config,
            epochs: a.epochs,
            k: a.k,
            t: a.t,
            max_minibatches: a.max_minibatches,
            ce_pretrain: a.ce_pretrain,
            no_encoder: a.no_encoder,
            resume: a.resume,
        }),
        Command::Run(a) => commands::cmd_run(RunArgs {
            problems: a.problems,
            seeds: a.seeds,
            checkpoint: a.checkpoint,
            out: a.out,
            config: a.config,
            budget: a.budget,
            k: a.k,
            no_gp: a.no_gp,
            no_encoder: a.no_encoder,
            noise: a.noise,
            subsample: a.subsample,
            tau: a.tau,
        }),
        Command::Bench(a) => commands::cmd_bench(BenchArgs {
            runs: a.runs,
            out: a.out,
            tau: a.tau,
        }),
        Command::Canon(a) => commands::cmd_canon(CanonArgs {
            left: a.left,
            right: a.right,
            lo: a.lo,
            hi: a.hi,
            seed: a.seed,
        }),
        Command::Pareto(a) => commands::cmd_pareto(ParetoArgs {
            input: a.input,
            out: a.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
