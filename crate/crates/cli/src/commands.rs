//! Implementations of the six subcommands. Every artifact-producing command
//! writes a snapshot of its effective configuration next to its outputs, so
//! a result directory is self-describing.

use std::path::{Path, PathBuf};

use serde_json::json;

use symreg::bench::{acc_tau, pareto_front, r_squared, BenchReport, ParetoPoint, RunSummary};
use symreg::corpus::{
    build_pretrain_corpus, problem, sample_problem_dataset, Corpus, DomainSpec, Split,
};
use symreg::expr::{symbolically_equal, ExprTree, Token};
use symreg::grammar::LibrarySpec;
use symreg::model::{extend_to_library, load_checkpoint, save_checkpoint, Generator};
use symreg::optim::nmse;
use symreg::pipeline::{add_noise, infer, pretrain, subsample, InferOutcome, TrainConfig};
use symreg::rng_stream;

use crate::config::FileConfig;
use crate::{schema, CliError};

/// Distinct noise/subsample stream salts so the transforms are independent
/// of the search's own randomness.
const NOISE_SALT: u64 = 0x6e6f_6973;
const SUBSAMPLE_SALT: u64 = 0x7375_6273;

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

pub struct GenCorpusArgs {
    pub library: String,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub with_consts: bool,
    pub holdout: Vec<String>,
}

pub fn gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    let lib = LibrarySpec::by_name(&args.library)
        .ok_or_else(|| CliError::Usage(format!("unknown library `{}`", args.library)))?;
    let mut cfg = FileConfig::load_or_default(args.config.as_deref())?;
    if args.with_consts {
        cfg.corpus.with_consts = Some(true);
    }
    let sampler = cfg.sampler(lib.d);
    let domain = DomainSpec::pretrain_default(lib.d);

    let mut holdouts: Vec<Vec<Token>> = Vec::new();
    for name in &args.holdout {
        let spec = problem(name)
            .ok_or_else(|| CliError::Usage(format!("unknown holdout problem `{name}`")))?;
        let truth = spec
            .ground_truth
            .ok_or_else(|| CliError::Usage(format!("problem `{name}` has no ground truth")))?;
        holdouts.push(truth);
    }

    let (corpus, stats) =
        build_pretrain_corpus(args.count, &sampler, &lib, domain, &holdouts, args.seed)?;
    corpus.save(&args.out)?;

    let manifest = json!({
        "library": lib.name,
        "count": args.count,
        "seed": args.seed,
        "domain": domain,
        "holdout_problems": args.holdout,
        "rejected_non_finite": stats.rejected_non_finite,
        "rejected_degenerate": stats.rejected_degenerate,
        "rejected_holdout": stats.rejected_holdout,
        "config": cfg.snapshot(),
    });
    let manifest_path = args.out.with_extension("manifest.json");
    write_file(&manifest_path, &serde_json::to_string_pretty(&manifest).unwrap())?;
    println!(
        "wrote {} equations to {} (rejections: {} non-finite, {} degenerate, {} holdout)",
        args.count,
        args.out.display(),
        stats.rejected_non_finite,
        stats.rejected_degenerate,
        stats.rejected_holdout,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub struct PretrainArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
    pub t: Option<usize>,
    pub max_minibatches: Option<usize>,
    pub ce_pretrain: bool,
    pub no_encoder: bool,
    pub resume: Option<PathBuf>,
}

pub fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let corpus = Corpus::load(&args.corpus)
        .map_err(|e| CliError::Usage(format!("cannot load corpus {}: {e}", args.corpus.display())))?;
    let mut file_cfg = FileConfig::load_or_default(args.config.as_deref())?;
    // Fold flags into the file config so the snapshot shows effective values.
    if args.epochs.is_some() {
        file_cfg.train.epochs = args.epochs;
    }
    if args.k.is_some() {
        file_cfg.train.k = args.k;
    }
    if args.t.is_some() {
        file_cfg.train.t = args.t;
    }
    if args.max_minibatches.is_some() {
        file_cfg.train.max_minibatches = args.max_minibatches;
    }
    let mut cfg = file_cfg.train_config(&corpus.library);
    cfg.ce_pretrain = args.ce_pretrain;
    cfg.use_encoder = !args.no_encoder;

    let resume = match &args.resume {
        Some(p) => Some(load_checkpoint(p).map_err(|e| {
            CliError::Usage(format!("cannot load checkpoint {}: {e}", p.display()))
        })?),
        None => None,
    };

    let outcome = pretrain(&corpus, &cfg, args.seed, resume.as_ref())?;
    save_checkpoint(&outcome.checkpoint, &args.out)?;

    let mut log = String::new();
    for r in &outcome.log.records {
        log.push_str(&serde_json::to_string(r).unwrap());
        log.push('\n');
    }
    write_file(&log_path(&args.out), &log)?;
    write_file(&snapshot_path(&args.out), &file_cfg.snapshot())?;
    println!(
        "pre-trained on {} equations: {} mini-batches, validation {:.4} -> best {:.4}{}",
        corpus.records.len(),
        outcome.log.minibatches,
        outcome.log.initial_validation,
        outcome.log.best_validation,
        if outcome.log.stopped_early { " (early stop)" } else { "" },
    );
    Ok(())
}

fn log_path(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

fn snapshot_path(out: &Path) -> PathBuf {
    out.with_extension("config.toml")
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub struct RunArgs {
    pub problems: Vec<String>,
    pub seeds: String,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub budget: Option<u64>,
    pub k: Option<usize>,
    pub no_gp: bool,
    pub no_encoder: bool,
    pub noise: f64,
    pub subsample: Option<usize>,
    pub tau: f64,
}

/// Parses `0..9` (inclusive) or a comma list such as `0,3,17`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("cannot parse seed list `{text}`"));
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let seeds: Result<Vec<u64>, _> = text.split(',').map(|s| s.trim().parse()).collect();
    let seeds = seeds.map_err(|_| bad())?;
    let mut dedup = seeds.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != seeds.len() {
        return Err(CliError::Usage(format!("seed list `{text}` repeats a seed")));
    }
    Ok(seeds)
}

pub fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let seeds = parse_seeds(&args.seeds)?;
    if args.problems.is_empty() {
        return Err(CliError::Usage("no problems given".into()));
    }
    let mut file_cfg = FileConfig::load_or_default(args.config.as_deref())?;
    if args.budget.is_some() {
        file_cfg.train.budget = args.budget;
    }
    if args.k.is_some() {
        file_cfg.train.k = args.k;
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", args.out.display())))?;
    write_file(&args.out.join("config.toml"), &file_cfg.snapshot())?;

    for name in &args.problems {
        let spec = problem(name)
            .ok_or_else(|| CliError::Usage(format!("unknown problem `{name}`")))?;
        for &seed in &seeds {
            let mut cfg = file_cfg.train_config(&spec.library);
            cfg.use_gp = !args.no_gp;
            cfg.use_encoder = !args.no_encoder;
            let summary = run_one(&spec.name, seed, &cfg, &args)?;
            println!(
                "{} seed {}: {:?} after {} evaluations, reward {:.6}",
                spec.name, seed, summary.status, summary.evaluations, summary.best_reward
            );
        }
    }
    Ok(())
}

/// Builds the generator for a problem: checkpoint weights when given (grown
/// to the problem's library if the variable counts differ), fresh
/// initialization otherwise.
fn generator_for(
    target: &LibrarySpec,
    checkpoint: Option<&Path>,
    seed: u64,
) -> Result<Generator, CliError> {
    let Some(path) = checkpoint else {
        return Ok(Generator::init(target.clone(), seed));
    };
    let ck = load_checkpoint(path)
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
    if ck.library_name == target.name {
        return Ok(Generator::new(target.clone(), ck.params));
    }
    let source_lib = LibrarySpec::by_name(&ck.library_name).ok_or_else(|| {
        CliError::Usage(format!(
            "checkpoint {} uses unknown library `{}`",
            path.display(),
            ck.library_name
        ))
    })?;
    let source = Generator::new(source_lib, ck.params);
    Ok(extend_to_library(&source, target, seed)?)
}

fn run_one(
    problem_name: &str,
    seed: u64,
    cfg: &TrainConfig,
    args: &RunArgs,
) -> Result<RunSummary, CliError> {
    let spec = problem(problem_name).expect("caller validated the name");
    let mut dataset = sample_problem_dataset(&spec, Split::Train, seed)?;
    if args.noise > 0.0 {
        dataset = add_noise(&dataset, args.noise, &mut rng_stream(seed, NOISE_SALT))?;
    }
    if let Some(n) = args.subsample {
        dataset = subsample(&dataset, n, &mut rng_stream(seed, SUBSAMPLE_SALT))?;
    }

    let mut gen = generator_for(&spec.library, args.checkpoint.as_deref(), seed)?;
    let truth = spec.ground_truth_tree();
    let outcome = infer(&mut gen, &dataset, cfg, seed, truth.as_ref())?;
    let summary = summarize(problem_name, seed, &spec, &outcome, args.tau)?;

    let dir = args
        .out
        .join(problem_name)
        .join(format!("seed-{seed}"));
    write_file(&dir.join("trace.jsonl"), &outcome.trace.to_json_lines())?;
    write_file(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    let bound = outcome.best.bound_tree()?;
    write_file(
        &dir.join("best.txt"),
        &format!("{}\n{}\n", bound.render_prefix(), bound.render_infix()),
    )?;
    Ok(summary)
}

fn summarize(
    problem_name: &str,
    seed: u64,
    spec: &symreg::corpus::ProblemSpec,
    outcome: &InferOutcome,
    tau: f64,
) -> Result<RunSummary, CliError> {
    let bound = outcome.best.bound_tree()?;
    let test = sample_problem_dataset(spec, Split::Test, seed)?;
    let (test_nmse, r2, acc) = match bound.evaluate(&test.x, &[]) {
        Ok(y_hat) => {
            let nm = nmse(&test.y, &y_hat, test.sigma_y)
                .ok()
                .filter(|v| v.is_finite());
            let r2 = r_squared(&test.y.to_vec(), &y_hat.to_vec())
                .ok()
                .filter(|v| v.is_finite());
            let acc = acc_tau(&test.y.to_vec(), &y_hat.to_vec(), tau).ok();
            (nm, r2, acc)
        }
        Err(_) => (None, None, None),
    };
    Ok(RunSummary {
        problem: problem_name.to_string(),
        seed,
        status: outcome.trace.status,
        evaluations: outcome.trace.evaluations,
        recovered_at: outcome.trace.recovered_at,
        best_prefix: bound.render_prefix(),
        best_infix: bound.render_infix(),
        best_reward: outcome.best.reward,
        complexity: bound.complexity(),
        test_nmse,
        r_squared: r2,
        acc_tau: acc,
    })
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub struct BenchArgs {
    pub runs: PathBuf,
    pub out: PathBuf,
    pub tau: f64,
}

fn collect_summaries(dir: &Path, found: &mut Vec<RunSummary>) -> Result<(), CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Internal(e.to_string()))?
            .path();
        if path.is_dir() {
            collect_summaries(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
            let summary: RunSummary = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("malformed {}: {e}", path.display())))?;
            found.push(summary);
        }
    }
    Ok(())
}

pub fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let mut summaries = Vec::new();
    collect_summaries(&args.runs, &mut summaries)?;
    if summaries.is_empty() {
        return Err(CliError::Usage(format!(
            "no run summaries under {}",
            args.runs.display()
        )));
    }
    summaries.sort_by(|a, b| a.problem.cmp(&b.problem).then(a.seed.cmp(&b.seed)));
    let report = BenchReport::from_summaries(&summaries, args.tau)
        .map_err(|e| CliError::Internal(e.to_string()))?;

    let json = report.to_json();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    let schema_doc: serde_json::Value =
        serde_json::from_str(schema::BENCH_REPORT_SCHEMA).unwrap();
    schema::validate(&value, &schema_doc)
        .map_err(|e| CliError::Internal(format!("report failed its own schema: {e}")))?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", args.out.display())))?;
    write_file(&args.out.join("report.csv"), &report.to_csv())?;
    write_file(&args.out.join("report.json"), &json)?;
    for p in &report.problems {
        let csv = report.pareto_csv(&p.problem).expect("problem is in report");
        write_file(&args.out.join(format!("pareto-{}.csv", p.problem)), &csv)?;
    }
    println!(
        "{} problems, recovery {:.1}% ± {:.1}%",
        report.problems.len(),
        report.aggregate_recovery_percent,
        report.aggregate_ci_percent,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// canon
// ---------------------------------------------------------------------------

pub struct CanonArgs {
    pub left: String,
    pub right: String,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

fn max_variable(tree: &ExprTree) -> usize {
    tree.to_prefix_tokens()
        .iter()
        .filter_map(|t| match t {
            Token::Var(i) => Some(*i as usize),
            _ => None,
        })
        .max()
        .unwrap_or(1)
}

pub fn cmd_canon(args: CanonArgs) -> Result<(), CliError> {
    let parse = |text: &str| {
        ExprTree::parse_prefix_text(text)
            .map_err(|e| CliError::Usage(format!("cannot parse `{text}`: {e}")))
    };
    let left = parse(&args.left)?;
    let right = parse(&args.right)?;
    if args.hi <= args.lo {
        return Err(CliError::Usage("probe bounds must satisfy lo < hi".into()));
    }
    let d = max_variable(&left).max(max_variable(&right));
    let bounds = vec![(args.lo, args.hi); d];
    let verdict = symbolically_equal(&left, &right, &bounds, args.seed)
        .map_err(|e| CliError::Usage(format!("cannot compare: {e}")))?;
    println!("{verdict:?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// pareto
// ---------------------------------------------------------------------------

pub struct ParetoArgs {
    pub input: PathBuf,
    pub out: Option<PathBuf>,
}

pub fn cmd_pareto(args: ParetoArgs) -> Result<(), CliError> {
    let mut reader = csv::Reader::from_path(&args.input)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.input.display())))?;
    let mut points = Vec::new();
    for record in reader.deserialize() {
        let point: ParetoPoint = record
            .map_err(|e| CliError::Usage(format!("malformed row in {}: {e}", args.input.display())))?;
        points.push(point);
    }
    let front = pareto_front(&points);

    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &front {
        w.serialize(p).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let csv_out = String::from_utf8(w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?)
        .expect("csv output is UTF-8");
    match &args.out {
        Some(path) => write_file(path, &csv_out)?,
        None => print!("{csv_out}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::parse_seeds;

    #[test]
    fn seed_ranges_are_inclusive() {
        assert_eq!(parse_seeds("0..9").unwrap(), (0..=9).collect::<Vec<_>>());
        assert_eq!(parse_seeds("4..4").unwrap(), vec![4]);
    }

    #[test]
    fn seed_lists_keep_their_order() {
        assert_eq!(parse_seeds("17, 3,5").unwrap(), vec![17, 3, 5]);
        assert_eq!(parse_seeds("0").unwrap(), vec![0]);
    }

    #[test]
    fn malformed_seed_specs_are_rejected() {
        for bad in ["9..3", "1,1", "", "a..b", "1,,2"] {
            assert!(parse_seeds(bad).is_err(), "`{bad}` should fail");
        }
    }
}
