//! Pre-training corpus generation and the built-in benchmark registry.
//!
//! Equation skeletons are sampled as unary-binary trees: a binary skeleton
//! grown to a random leaf count, unary operator chains inserted at random
//! positions, operators drawn from an unnormalised weighted distribution, and
//! leaves filled as variables or small integers. Every stored skeleton is
//! screened on a probe dataset so it evaluates to finite, non-degenerate
//! values on its domain, and skeletons symbolically equal to a holdout
//! (validation or benchmark ground truth) are resampled.

mod registry;

pub use registry::{problem, registry};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{CanonicalForm, ExprError, ExprNode, ExprTree, Token};
use crate::grammar::LibrarySpec;
use crate::rng_stream;

/// Consecutive probe/holdout rejections tolerated per corpus slot before
/// generation is abandoned.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;

/// Relative standard deviations below this mark the probe targets as
/// numerically constant — a useless regression target whose error normaliser
/// would blow up — so such draws are rejected. The comparison is relative to
/// the mean magnitude because rounding makes even an exactly constant y
/// wobble by a few ulps at large magnitudes.
const MIN_PROBE_REL_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("gave up after {attempts} consecutive rejected samples for corpus slot {index}")]
    ExhaustedResampling { index: usize, attempts: usize },
    #[error("ground truth for `{name}` is non-finite on its domain after {attempts} attempts")]
    GroundTruthInvalidOnDomain { name: String, attempts: usize },
    #[error("problem `{name}` has no ground-truth equation")]
    MissingGroundTruth { name: String },
    #[error("dataset must be non-empty with finite entries")]
    InvalidDataset,
    #[error("malformed corpus file: {reason}")]
    MalformedFile { reason: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How input points are drawn over `[lower, upper]` for each variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainKind {
    /// `U(a,b,c)`: c points uniformly sampled per variable; train and test
    /// use different seeds.
    Uniform,
    /// `E(a,b,c)`: c points evenly spaced per variable; train and test share
    /// the same points.
    EvenlySpaced,
}

/// Sampling specification for one dataset draw, applied per variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub lower: f64,
    pub upper: f64,
    /// Points per dataset.
    pub count: usize,
}

impl DomainSpec {
    pub fn uniform(lower: f64, upper: f64, count: usize) -> Self {
        DomainSpec {
            kind: DomainKind::Uniform,
            lower,
            upper,
            count,
        }
    }

    pub fn evenly_spaced(lower: f64, upper: f64, count: usize) -> Self {
        DomainSpec {
            kind: DomainKind::EvenlySpaced,
            lower,
            upper,
            count,
        }
    }

    /// Default pre-training domain: 10·d uniform points on [-1, 1].
    pub fn pretrain_default(d: usize) -> Self {
        DomainSpec::uniform(-1.0, 1.0, 10 * d.max(1))
    }

    /// Per-variable bounds, repeated `d` times.
    pub fn var_bounds(&self, d: usize) -> Vec<(f64, f64)> {
        vec![(self.lower, self.upper); d]
    }

    /// Draws an n×d input matrix. Uniform kinds consume the RNG; evenly
    /// spaced kinds ignore it and give every variable the same grid.
    pub fn sample_x(&self, d: usize, rng: &mut impl Rng) -> Array2<f64> {
        let n = self.count;
        match self.kind {
            DomainKind::Uniform => {
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n * d {
                    data.push(rng.random_range(self.lower..self.upper));
                }
                Array2::from_shape_vec((n, d), data).expect("shape matches data")
            }
            DomainKind::EvenlySpaced => {
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    let t = if n == 1 {
                        self.lower
                    } else {
                        self.lower + (self.upper - self.lower) * i as f64 / (n - 1) as f64
                    };
                    data.extend(std::iter::repeat(t).take(d));
                }
                Array2::from_shape_vec((n, d), data).expect("shape matches data")
            }
        }
    }
}

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            DomainKind::Uniform => 'U',
            DomainKind::EvenlySpaced => 'E',
        };
        write!(f, "{kind}({},{},{})", self.lower, self.upper, self.count)
    }
}

impl FromStr for DomainSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("expected U(a,b,c) or E(a,b,c), got `{s}`");
        let kind = match s.chars().next() {
            Some('U') => DomainKind::Uniform,
            Some('E') => DomainKind::EvenlySpaced,
            _ => return Err(err()),
        };
        let body = s[1..]
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(err)?;
        let parts: Vec<&str> = body.split(',').collect();
        if parts.len() != 3 {
            return Err(err());
        }
        let lower: f64 = parts[0].trim().parse().map_err(|_| err())?;
        let upper: f64 = parts[1].trim().parse().map_err(|_| err())?;
        let count: usize = parts[2].trim().parse().map_err(|_| err())?;
        if !(lower < upper) || count == 0 {
            return Err(err());
        }
        Ok(DomainSpec { kind, lower, upper, count })
    }
}

/// A regression dataset: inputs `x` (n×d), targets `y`, and the population
/// standard deviation of `y` used by the normalised error.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub sigma_y: f64,
    /// Seed the points were drawn with.
    pub seed: u64,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, seed: u64) -> Result<Self, CorpusError> {
        if y.is_empty() || x.nrows() != y.len() {
            return Err(CorpusError::InvalidDataset);
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(CorpusError::InvalidDataset);
        }
        let sigma_y = population_std(&y);
        Ok(Dataset { x, y, sigma_y, seed })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// Population (divide-by-n) standard deviation.
pub fn population_std(y: &Array1<f64>) -> f64 {
    let mean = y.mean().unwrap_or(0.0);
    y.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt()
}

/// One benchmark problem: name, optional ground truth, token library, and
/// dataset sampling domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    /// Ground-truth prefix sequence; `None` for black-box tasks.
    pub ground_truth: Option<Vec<Token>>,
    pub library: LibrarySpec,
    pub domain: DomainSpec,
}

impl ProblemSpec {
    pub fn d(&self) -> usize {
        self.library.d
    }

    pub fn ground_truth_tree(&self) -> Option<ExprTree> {
        self.ground_truth
            .as_ref()
            .map(|toks| ExprTree::parse_prefix(toks).expect("stored ground truth parses"))
    }

    pub fn var_bounds(&self) -> Vec<(f64, f64)> {
        self.domain.var_bounds(self.d())
    }
}

/// Which side of the train/test split to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Draws a dataset for a benchmark problem by evaluating its ground truth on
/// freshly sampled points. Uniform domains use distinct streams per split;
/// evenly spaced domains give both splits the same points. Draws whose output
/// is non-finite are resampled up to [`MAX_RESAMPLE_ATTEMPTS`] times.
pub fn sample_problem_dataset(
    spec: &ProblemSpec,
    split: Split,
    seed: u64,
) -> Result<Dataset, CorpusError> {
    let tree = spec
        .ground_truth_tree()
        .ok_or_else(|| CorpusError::MissingGroundTruth {
            name: spec.name.clone(),
        })?;
    let split_salt = match (spec.domain.kind, split) {
        (DomainKind::EvenlySpaced, _) | (DomainKind::Uniform, Split::Train) => 0,
        (DomainKind::Uniform, Split::Test) => 1,
    };
    // Evenly spaced points never change, so one attempt decides.
    let max_attempts = match spec.domain.kind {
        DomainKind::Uniform => MAX_RESAMPLE_ATTEMPTS,
        DomainKind::EvenlySpaced => 1,
    };
    for attempt in 0..max_attempts {
        let mut rng = rng_stream(seed, (attempt as u64) << 1 | split_salt);
        let x = spec.domain.sample_x(spec.d(), &mut rng);
        match tree.evaluate(&x, &[]) {
            Ok(y) => return Dataset::new(x, y, seed),
            Err(ExprError::Invalid) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(CorpusError::GroundTruthInvalidOnDomain {
        name: spec.name.clone(),
        attempts: max_attempts,
    })
}

/// Weighted sampler for random equation skeletons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSampler {
    /// Inclusive leaf-count bounds.
    pub l_min: usize,
    pub l_max: usize,
    /// Unnormalised weights for binary operator labels.
    pub binary_weights: Vec<(Token, f64)>,
    /// Unnormalised weights for unary operator labels.
    pub unary_weights: Vec<(Token, f64)>,
    /// Probability that a leaf is a variable rather than an integer.
    pub p_variable: f64,
    /// Inclusive value range for integer leaves.
    pub int_range: (i64, i64),
    /// Number of input variables drawn from.
    pub d: usize,
    /// Probability of promoting an integer leaf to a constant placeholder.
    pub p_const_promotion: f64,
    /// Cap on placeholders per skeleton.
    pub max_const_slots: usize,
}

impl SkeletonSampler {
    /// Default operator mix: `+` and `×` twice as likely as `-` and `÷`;
    /// unary labels dominated by `log`/`exp`/`sin`/`cos` and low powers.
    pub fn new(d: usize) -> Self {
        SkeletonSampler {
            l_min: 3,
            l_max: 5,
            binary_weights: vec![
                (Token::Add, 10.0),
                (Token::Mul, 10.0),
                (Token::Sub, 5.0),
                (Token::Div, 5.0),
            ],
            unary_weights: vec![
                (Token::Pow2, 4.0),
                (Token::Pow3, 2.0),
                (Token::Pow4, 1.0),
                (Token::Pow5, 1.0),
                (Token::Log, 4.0),
                (Token::Exp, 4.0),
                (Token::Sin, 4.0),
                (Token::Cos, 4.0),
            ],
            p_variable: 0.8,
            int_range: (1, 5),
            d,
            p_const_promotion: 0.0,
            max_const_slots: 3,
        }
    }

    /// Variant that promotes integer leaves to fitted-constant placeholders
    /// half of the time, with initial values drawn from U(-1, 1).
    pub fn with_const_promotion(d: usize) -> Self {
        SkeletonSampler {
            p_const_promotion: 0.5,
            ..SkeletonSampler::new(d)
        }
    }

    pub fn sample_skeleton(&self, rng: &mut impl Rng) -> ExprTree {
        self.sample_with_consts(rng).0
    }

    /// Draws one skeleton plus values for any promoted constant placeholders
    /// (prefix order). The tree's variables are relabelled to the densest
    /// prefix, so if `x_k` appears then so do `x_1..x_{k-1}`.
    pub fn sample_with_consts(&self, rng: &mut impl Rng) -> (ExprTree, Vec<f64>) {
        debug_assert!(self.binary_weights.iter().all(|w| w.1 > 0.0));
        debug_assert!(self.unary_weights.iter().all(|w| w.1 > 0.0));
        debug_assert!(1 <= self.l_min && self.l_min <= self.l_max);

        let leaves = rng.random_range(self.l_min..=self.l_max);
        let binary_dist = WeightedIndex::new(self.binary_weights.iter().map(|w| w.1))
            .expect("positive binary weights");
        let unary_dist = WeightedIndex::new(self.unary_weights.iter().map(|w| w.1))
            .expect("positive unary weights");

        // Binary skeleton: split a uniformly chosen leaf `leaves - 1` times.
        let placeholder = || ExprNode::leaf(Token::Const);
        let mut root = placeholder();
        let mut leaf_paths: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 1..leaves {
            let pick = rng.random_range(0..leaf_paths.len());
            let path = leaf_paths.swap_remove(pick);
            let op = self.binary_weights[binary_dist.sample(rng)].0;
            *node_at_mut(&mut root, &path) = ExprNode::new(op, vec![placeholder(), placeholder()]);
            for child in 0..2 {
                let mut p = path.clone();
                p.push(child);
                leaf_paths.push(p);
            }
        }

        // Unary chains above each skeleton node, chain length geometric with
        // success odds chosen so expected unary:binary label counts match the
        // weight-table class totals.
        let positions = collect_paths(&root);
        let unary_total: f64 = self.unary_weights.iter().map(|w| w.1).sum();
        let binary_total: f64 = self.binary_weights.iter().map(|w| w.1).sum();
        let target = (leaves - 1) as f64 * unary_total / binary_total;
        let mu = target / positions.len() as f64;
        let rho = mu / (1.0 + mu);
        // Deepest-first so an insertion never shifts a yet-unprocessed path.
        let mut ordered = positions;
        ordered.sort_by_key(|p| std::cmp::Reverse(p.len()));
        for path in &ordered {
            let mut chain = 0;
            while chain < 8 && rng.random_bool(rho) {
                chain += 1;
            }
            if chain == 0 {
                continue;
            }
            let slot = node_at_mut(&mut root, path);
            let mut wrapped = std::mem::replace(slot, placeholder());
            for _ in 0..chain {
                let op = self.unary_weights[unary_dist.sample(rng)].0;
                wrapped = ExprNode::new(op, vec![wrapped]);
            }
            *slot = wrapped;
        }

        // Label leaves: variable with p_variable, else a small integer.
        fill_leaves(&mut root, self, rng);
        let tree = ExprTree { root }.relabel_vars_dense();

        // Optionally promote integer leaves to constant placeholders.
        let mut consts = Vec::new();
        if self.p_const_promotion > 0.0 {
            let mut tree = tree;
            promote_consts(&mut tree.root, self, &mut consts, rng);
            return (tree, consts);
        }
        (tree, consts)
    }
}

fn node_at_mut<'a>(root: &'a mut ExprNode, path: &[usize]) -> &'a mut ExprNode {
    let mut cur = root;
    for &i in path {
        cur = &mut cur.children[i];
    }
    cur
}

/// Preorder paths of every node in the tree.
fn collect_paths(root: &ExprNode) -> Vec<Vec<usize>> {
    fn walk(n: &ExprNode, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(path.clone());
        for (i, c) in n.children.iter().enumerate() {
            path.push(i);
            walk(c, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(root, &mut Vec::new(), &mut out);
    out
}

fn fill_leaves(n: &mut ExprNode, sampler: &SkeletonSampler, rng: &mut impl Rng) {
    if n.children.is_empty() {
        n.token = if rng.random_bool(sampler.p_variable) {
            Token::Var(rng.random_range(1..=sampler.d as u8))
        } else {
            let v = rng.random_range(sampler.int_range.0..=sampler.int_range.1);
            Token::Literal(crate::expr::Literal::int(v))
        };
        return;
    }
    for c in &mut n.children {
        fill_leaves(c, sampler, rng);
    }
}

fn promote_consts(
    n: &mut ExprNode,
    sampler: &SkeletonSampler,
    consts: &mut Vec<f64>,
    rng: &mut impl Rng,
) {
    if n.children.is_empty() {
        if matches!(n.token, Token::Literal(crate::expr::Literal::Rational(_)))
            && consts.len() < sampler.max_const_slots
            && rng.random_bool(sampler.p_const_promotion)
        {
            n.token = Token::Const;
            consts.push(rng.random_range(-1.0..1.0));
        }
        return;
    }
    for c in &mut n.children {
        promote_consts(c, sampler, consts, rng);
    }
}

/// One stored corpus equation: prefix tokens plus values for any constant
/// placeholders, in prefix order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub tokens: Vec<Token>,
    pub consts: Vec<f64>,
}

impl CorpusRecord {
    pub fn tree(&self) -> ExprTree {
        ExprTree::parse_prefix(&self.tokens).expect("corpus records are complete expressions")
    }

    /// The tree with placeholder values substituted in.
    pub fn bound_tree(&self) -> Result<ExprTree, ExprError> {
        self.tree().bind_constants(&self.consts)
    }
}

/// A generated pre-training corpus with its library and sampling domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub library: LibrarySpec,
    pub domain: DomainSpec,
    pub records: Vec<CorpusRecord>,
}

const CORPUS_FORMAT: &str = "symreg-corpus/1";

impl Corpus {
    /// Text form: a tab-separated header (format version, library, domain)
    /// then one `prefix-text[TAB consts]` record per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{CORPUS_FORMAT}\t{}\t{}\n",
            self.library.name, self.domain
        ));
        for rec in &self.records {
            let prefix: Vec<String> = rec.tokens.iter().map(|t| t.name()).collect();
            out.push_str(&prefix.join(" "));
            if !rec.consts.is_empty() {
                let consts: Vec<String> = rec.consts.iter().map(|c| format!("{c}")).collect();
                out.push('\t');
                out.push_str(&consts.join(","));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let malformed = |reason: &str| CorpusError::MalformedFile {
            reason: reason.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| malformed("missing header"))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 3 || fields[0] != CORPUS_FORMAT {
            return Err(malformed("bad header"));
        }
        let library = LibrarySpec::by_name(fields[1])
            .ok_or_else(|| malformed(&format!("unknown library `{}`", fields[1])))?;
        let domain: DomainSpec = fields[2]
            .parse()
            .map_err(|e: String| malformed(&e))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (prefix, consts_text) = match line.split_once('\t') {
                Some((p, c)) => (p, Some(c)),
                None => (line, None),
            };
            let tokens = prefix
                .split_whitespace()
                .map(Token::from_name)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| malformed(&format!("record {}: {e}", i + 1)))?;
            let consts = match consts_text {
                None => Vec::new(),
                Some(c) => c
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| malformed(&format!("record {}: bad constant", i + 1)))?,
            };
            records.push(CorpusRecord { tokens, consts });
        }
        Ok(Corpus {
            library,
            domain,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Corpus::from_text(&fs::read_to_string(path)?)
    }
}

/// Rejection tallies from corpus generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenStats {
    /// Probe dataset contained NaN/Inf.
    pub rejected_non_finite: usize,
    /// Probe targets were (numerically) constant.
    pub rejected_degenerate: usize,
    /// Skeleton was symbolically equal to a holdout.
    pub rejected_holdout: usize,
}

impl GenStats {
    fn absorb(&mut self, other: GenStats) {
        self.rejected_non_finite += other.rejected_non_finite;
        self.rejected_degenerate += other.rejected_degenerate;
        self.rejected_holdout += other.rejected_holdout;
    }
}

enum Rejection {
    NonFinite,
    Degenerate,
}

/// Evaluates a candidate skeleton on one probe draw from the domain.
fn probe(
    tree: &ExprTree,
    consts: &[f64],
    domain: DomainSpec,
    d: usize,
    rng: &mut impl Rng,
) -> Result<(), Rejection> {
    let x = domain.sample_x(d, rng);
    match tree.evaluate(&x, consts) {
        Ok(y) => {
            let scale = 1.0 + y.mean().unwrap_or(0.0).abs();
            if population_std(&y) <= MIN_PROBE_REL_STD * scale {
                Err(Rejection::Degenerate)
            } else {
                Ok(())
            }
        }
        Err(_) => Err(Rejection::NonFinite),
    }
}

/// Generates `m` screened skeletons. Each corpus slot owns an independent RNG
/// stream derived from `seed` and its index, so output is order-deterministic
/// and generation parallelises over slots.
pub fn build_pretrain_corpus(
    m: usize,
    sampler: &SkeletonSampler,
    library: &LibrarySpec,
    domain: DomainSpec,
    holdouts: &[Vec<Token>],
    seed: u64,
) -> Result<(Corpus, GenStats), CorpusError> {
    assert_eq!(
        sampler.d, library.d,
        "sampler and library must agree on variable count"
    );
    let holdout_forms: Vec<CanonicalForm> = holdouts
        .iter()
        .filter_map(|toks| {
            let tree = ExprTree::parse_prefix(toks).ok()?;
            crate::expr::canonicalize(&tree).ok()
        })
        .collect();

    let slots: Result<Vec<(CorpusRecord, GenStats)>, CorpusError> = (0..m)
        .into_par_iter()
        .map(|index| {
            let mut rng = rng_stream(seed, index as u64);
            let mut stats = GenStats::default();
            let mut consecutive = 0;
            loop {
                if consecutive >= MAX_RESAMPLE_ATTEMPTS {
                    return Err(CorpusError::ExhaustedResampling {
                        index,
                        attempts: consecutive,
                    });
                }
                let (tree, consts) = sampler.sample_with_consts(&mut rng);
                if let Err(rej) = probe(&tree, &consts, domain, sampler.d, &mut rng) {
                    match rej {
                        Rejection::NonFinite => stats.rejected_non_finite += 1,
                        Rejection::Degenerate => stats.rejected_degenerate += 1,
                    }
                    consecutive += 1;
                    continue;
                }
                if !holdout_forms.is_empty() {
                    let bound = tree.bind_constants(&consts)?;
                    let cand = crate::expr::canonicalize(&bound).ok();
                    let hit = cand
                        .map(|c| holdout_forms.iter().any(|h| c.matches(h)))
                        .unwrap_or(false);
                    if hit {
                        stats.rejected_holdout += 1;
                        consecutive += 1;
                        continue;
                    }
                }
                return Ok((
                    CorpusRecord {
                        tokens: tree.to_prefix_tokens(),
                        consts,
                    },
                    stats,
                ));
            }
        })
        .collect();

    let mut records = Vec::with_capacity(m);
    let mut stats = GenStats::default();
    for (rec, s) in slots? {
        records.push(rec);
        stats.absorb(s);
    }
    Ok((
        Corpus {
            library: library.clone(),
            domain,
            records,
        },
        stats,
    ))
}
