//! Genetic-programming refinement of sampled equation batches.
//!
//! The generator proposes a batch of equations; this module evolves that
//! batch against the dataset for a fixed number of generations and returns
//! the best unique individuals it saw. Selection is by tournament on the
//! reward, variation is subtree crossover plus four mutation operators, and
//! every offspring must still parse under the grammar and respect the
//! library's length bounds — invalid offspring are retried a few times and
//! then fall back to their parent, so the population never leaves the
//! search space.
//!
//! Fitness evaluations are cached by canonical form: two syntactically
//! different trees that simplify to the same equation are scored (and
//! charged against the evaluation budget) once.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Dataset;
use crate::expr::{canonicalize, ExprError, ExprNode, ExprTree, Token};
use crate::grammar::{GrammarError, LibrarySpec, TokenId};
use crate::optim::{evaluate_candidate, BudgetCounter, RewardRecord};

#[derive(Debug, thiserror::Error)]
pub enum EvolveError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

/// Tuning knobs for one refinement call.
#[derive(Debug, Clone)]
pub struct GpConfig {
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub tournament_size: usize,
    /// Depth cap for randomly generated replacement subtrees.
    pub max_mutation_depth: usize,
    /// Number of best unique individuals to return (capped by population).
    pub elite_size: usize,
    /// Attempts at producing a valid offspring before keeping the parent.
    pub offspring_retries: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            generations: 25,
            crossover_prob: 0.5,
            mutation_prob: 0.5,
            tournament_size: 5,
            max_mutation_depth: 3,
            elite_size: 50,
            offspring_retries: 3,
        }
    }
}

/// A scored equation: token sequence, parsed tree, canonical key, and the
/// reward it earned on the dataset.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub sequence: Vec<TokenId>,
    pub tree: ExprTree,
    pub key: String,
    pub reward: f64,
    pub nmse: f64,
    pub consts: Vec<f64>,
}

/// Result of one refinement call.
#[derive(Debug)]
pub struct GpOutcome {
    /// Scores for the seed sequences, in input order.
    pub seeds: Vec<Candidate>,
    /// Best unique individuals across all generations, reward-descending.
    pub elites: Vec<Candidate>,
    /// Evaluations charged to the budget by this call.
    pub evaluations: u64,
    pub generations_run: usize,
}

/// Deduplication key for fitness caching and queue insertion.
///
/// Constant-free trees use their canonical (simplified) form, so
/// `mul x1 x1` and `pow2 x1` share one entry. Trees with unfitted constant
/// slots cannot be simplified; they fall back to their structural spelling.
pub fn candidate_key(tree: &ExprTree, consts: &[f64]) -> String {
    let keyed = if consts.is_empty() {
        canonicalize(tree).map(|c| c.key())
    } else {
        tree.bind_constants(consts).and_then(|b| canonicalize(&b).map(|c| c.key()))
    };
    keyed.unwrap_or_else(|_| format!("raw:{}", tree.render_prefix()))
}

/// Shared fitness cache: structural spelling → record, with a canonical
/// second level so equivalent spellings are charged once.
struct FitnessCache {
    by_structure: HashMap<String, (String, RewardRecord)>,
    by_canonical: HashMap<String, RewardRecord>,
    evaluations: u64,
}

impl FitnessCache {
    fn new() -> Self {
        FitnessCache {
            by_structure: HashMap::new(),
            by_canonical: HashMap::new(),
            evaluations: 0,
        }
    }

    /// Score every tree, consulting the cache first. New canonical forms are
    /// evaluated in parallel and charged to the budget exactly once.
    fn score_all(
        &mut self,
        trees: &[(Vec<TokenId>, ExprTree)],
        dataset: &Dataset,
        budget: &BudgetCounter,
    ) -> Vec<Candidate> {
        // Resolve keys sequentially (cheap) and collect unseen work.
        let mut pending: Vec<(String, ExprTree)> = Vec::new();
        let mut pending_keys: std::collections::HashSet<String> = std::collections::HashSet::new();
        for (_, tree) in trees {
            let structural = tree.render_prefix();
            if self.by_structure.contains_key(&structural) {
                continue;
            }
            // Constant-free trees can be canonicalised before evaluation;
            // const-bearing ones must be fitted first and are keyed
            // structurally for caching purposes.
            let canon = if tree.const_count() == 0 {
                canonicalize(tree).map(|c| c.key()).ok()
            } else {
                None
            };
            let cache_key = canon.clone().unwrap_or_else(|| format!("raw:{structural}"));
            if let Some(rec) = self.by_canonical.get(&cache_key) {
                self.by_structure.insert(structural, (cache_key, rec.clone()));
                continue;
            }
            if pending_keys.insert(cache_key.clone()) {
                pending.push((cache_key.clone(), tree.clone()));
            }
            self.by_structure.insert(
                structural,
                (cache_key, RewardRecord { reward: f64::NAN, nmse: f64::NAN, consts: vec![], evals: 0 }),
            );
        }

        let scored: Vec<(String, RewardRecord)> = pending
            .into_par_iter()
            .map(|(key, tree)| {
                let rec = evaluate_candidate(&tree, dataset, Some(budget));
                (key, rec)
            })
            .collect();
        for (key, rec) in scored {
            self.evaluations += rec.evals;
            self.by_canonical.insert(key, rec);
        }
        // Patch the placeholder records now that evaluations are in.
        for (_, (key, rec)) in self.by_structure.iter_mut() {
            if rec.reward.is_nan() {
                *rec = self.by_canonical[key].clone();
            }
        }

        trees
            .iter()
            .map(|(seq, tree)| {
                let (_, rec) = &self.by_structure[&tree.render_prefix()];
                let key = if rec.consts.is_empty() {
                    candidate_key(tree, &[])
                } else {
                    candidate_key(tree, &rec.consts)
                };
                Candidate {
                    sequence: seq.clone(),
                    tree: tree.clone(),
                    key,
                    reward: rec.reward,
                    nmse: rec.nmse,
                    consts: rec.consts.clone(),
                }
            })
            .collect()
    }
}

/// Running set of the best unique individuals, reward-descending.
struct ElitePool {
    cap: usize,
    members: Vec<Candidate>,
}

impl ElitePool {
    fn new(cap: usize) -> Self {
        ElitePool { cap, members: Vec::new() }
    }

    fn offer(&mut self, c: &Candidate) {
        if !c.reward.is_finite() {
            return;
        }
        if let Some(existing) = self.members.iter_mut().find(|m| m.key == c.key) {
            if c.reward > existing.reward {
                *existing = c.clone();
            }
        } else {
            self.members.push(c.clone());
        }
        self.members
            .sort_by(|a, b| b.reward.partial_cmp(&a.reward).unwrap());
        self.members.truncate(self.cap);
    }

    fn best(&self) -> Option<&Candidate> {
        self.members.first()
    }
}

fn terminals(lib: &LibrarySpec) -> Vec<Token> {
    lib.tokens.iter().copied().filter(|t| t.is_terminal()).collect()
}

fn operators(lib: &LibrarySpec, arity: usize) -> Vec<Token> {
    lib.tokens.iter().copied().filter(|t| t.arity() == arity).collect()
}

/// Random tree over library tokens, depth-capped; used by the uniform
/// mutation operator.
fn random_tree(lib: &LibrarySpec, depth: usize, rng: &mut ChaCha8Rng) -> ExprNode {
    let terms = terminals(lib);
    if depth == 0 || rng.random_bool(0.4) {
        let tok = terms[rng.random_range(0..terms.len())];
        return ExprNode { token: tok, children: Vec::new() };
    }
    let unary = operators(lib, 1);
    let binary = operators(lib, 2);
    let pick_binary = unary.is_empty() || (!binary.is_empty() && rng.random_bool(0.5));
    if pick_binary {
        let tok = binary[rng.random_range(0..binary.len())];
        let left = random_tree(lib, depth - 1, rng);
        let right = random_tree(lib, depth - 1, rng);
        ExprNode { token: tok, children: vec![left, right] }
    } else {
        let tok = unary[rng.random_range(0..unary.len())];
        ExprNode { token: tok, children: vec![random_tree(lib, depth - 1, rng)] }
    }
}

/// Check an edited tree against the grammar before admitting it.
fn admissible(lib: &LibrarySpec, tree: &ExprTree) -> Option<Vec<TokenId>> {
    let tokens = tree.to_prefix_tokens();
    let ids = lib.tokens_to_ids(&tokens)?;
    if lib.sequence_is_valid(&ids) {
        Some(ids)
    } else {
        None
    }
}

/// Subtree crossover: replace a random node of `a` with a random subtree of
/// `b`. Crossing a tree with itself returns it unchanged.
fn crossover(
    lib: &LibrarySpec,
    a: &Candidate,
    b: &Candidate,
    retries: usize,
    rng: &mut ChaCha8Rng,
) -> (ExprTree, Vec<TokenId>) {
    if a.sequence == b.sequence {
        return (a.tree.clone(), a.sequence.clone());
    }
    for _ in 0..=retries {
        let at = rng.random_range(0..a.tree.node_count());
        let bt = rng.random_range(0..b.tree.node_count());
        let donor = b.tree.subtree(bt).expect("index in range").clone();
        let child = a.tree.with_subtree(at, donor);
        if let Some(ids) = admissible(lib, &child) {
            return (child, ids);
        }
    }
    (a.tree.clone(), a.sequence.clone())
}

#[derive(Clone, Copy)]
enum MutationKind {
    Uniform,
    NodeReplacement,
    Insertion,
    Shrink,
}

const MUTATION_KINDS: [MutationKind; 4] = [
    MutationKind::Uniform,
    MutationKind::NodeReplacement,
    MutationKind::Insertion,
    MutationKind::Shrink,
];

fn mutate_once(
    lib: &LibrarySpec,
    tree: &ExprTree,
    kind: MutationKind,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> ExprTree {
    let n = tree.node_count();
    let target = rng.random_range(0..n);
    match kind {
        MutationKind::Uniform => {
            let sub = random_tree(lib, max_depth, rng);
            tree.with_subtree(target, sub)
        }
        MutationKind::NodeReplacement => {
            let mut node = tree.subtree(target).expect("index in range").clone();
            let same_arity: Vec<Token> = lib
                .tokens
                .iter()
                .copied()
                .filter(|t| t.arity() == node.token.arity() && *t != node.token)
                .collect();
            if same_arity.is_empty() {
                return tree.clone();
            }
            node.token = same_arity[rng.random_range(0..same_arity.len())];
            tree.with_subtree(target, node)
        }
        MutationKind::Insertion => {
            let inner = tree.subtree(target).expect("index in range").clone();
            let unary = operators(lib, 1);
            let binary = operators(lib, 2);
            let use_unary = !unary.is_empty() && (binary.is_empty() || rng.random_bool(0.5));
            let wrapped = if use_unary {
                let op = unary[rng.random_range(0..unary.len())];
                ExprNode { token: op, children: vec![inner] }
            } else {
                let op = binary[rng.random_range(0..binary.len())];
                let terms = terminals(lib);
                let leaf = ExprNode {
                    token: terms[rng.random_range(0..terms.len())],
                    children: Vec::new(),
                };
                if rng.random_bool(0.5) {
                    ExprNode { token: op, children: vec![inner, leaf] }
                } else {
                    ExprNode { token: op, children: vec![leaf, inner] }
                }
            };
            tree.with_subtree(target, wrapped)
        }
        MutationKind::Shrink => {
            let node = tree.subtree(target).expect("index in range");
            if node.children.is_empty() {
                return tree.clone();
            }
            let child = node.children[rng.random_range(0..node.children.len())].clone();
            tree.with_subtree(target, child)
        }
    }
}

fn mutate(
    lib: &LibrarySpec,
    parent_tree: &ExprTree,
    parent_seq: &[TokenId],
    cfg: &GpConfig,
    rng: &mut ChaCha8Rng,
) -> (ExprTree, Vec<TokenId>) {
    for _ in 0..=cfg.offspring_retries {
        let kind = MUTATION_KINDS[rng.random_range(0..MUTATION_KINDS.len())];
        let child = mutate_once(lib, parent_tree, kind, cfg.max_mutation_depth, rng);
        if let Some(ids) = admissible(lib, &child) {
            return (child, ids);
        }
    }
    (parent_tree.clone(), parent_seq.to_vec())
}

/// Tournament selection: best reward among `size` uniform draws.
fn select<'a>(pop: &'a [Candidate], size: usize, rng: &mut ChaCha8Rng) -> &'a Candidate {
    let mut best = &pop[rng.random_range(0..pop.len())];
    for _ in 1..size {
        let challenger = &pop[rng.random_range(0..pop.len())];
        if challenger.reward > best.reward {
            best = challenger;
        }
    }
    best
}

/// Evaluate a batch of sequences against the dataset with canonical-form
/// deduplication; used directly by the inference loop when refinement is
/// disabled.
pub fn evaluate_population(
    lib: &LibrarySpec,
    sequences: &[Vec<TokenId>],
    dataset: &Dataset,
    budget: &BudgetCounter,
) -> Result<Vec<Candidate>, EvolveError> {
    let mut cache = FitnessCache::new();
    let trees = parse_all(lib, sequences)?;
    Ok(cache.score_all(&trees, dataset, budget))
}

fn parse_all(
    lib: &LibrarySpec,
    sequences: &[Vec<TokenId>],
) -> Result<Vec<(Vec<TokenId>, ExprTree)>, EvolveError> {
    sequences
        .iter()
        .map(|seq| {
            let tokens = lib.ids_to_tokens(seq)?;
            let tree = ExprTree::parse_prefix(&tokens)?;
            Ok((seq.clone(), tree))
        })
        .collect()
}

/// Refine a seed batch by tournament-based genetic programming.
///
/// The population size equals the seed count and stays fixed; each
/// generation is bred by tournament selection, optional subtree crossover,
/// and optional mutation, with the incumbent best individual always
/// retained. Stops early once `budget` is exhausted. The best unique
/// individuals across the whole run (including the seeds) are returned
/// alongside the seed scores.
pub fn gp_refine(
    lib: &LibrarySpec,
    seeds: &[Vec<TokenId>],
    dataset: &Dataset,
    cfg: &GpConfig,
    budget: &BudgetCounter,
    rng: &mut ChaCha8Rng,
) -> Result<GpOutcome, EvolveError> {
    let mut cache = FitnessCache::new();
    let seed_trees = parse_all(lib, seeds)?;
    let seed_scores = cache.score_all(&seed_trees, dataset, budget);
    let elite_cap = cfg.elite_size.min(seeds.len().max(1));
    let mut elites = ElitePool::new(elite_cap);
    for c in &seed_scores {
        elites.offer(c);
    }
    if seeds.is_empty() {
        return Ok(GpOutcome {
            seeds: seed_scores,
            elites: Vec::new(),
            evaluations: cache.evaluations,
            generations_run: 0,
        });
    }

    let mut population = seed_scores.clone();
    let mut generations_run = 0;
    for _ in 0..cfg.generations {
        if budget.exhausted() {
            break;
        }
        generations_run += 1;

        let mut offspring: Vec<(Vec<TokenId>, ExprTree)> = Vec::with_capacity(population.len());
        for _ in 0..population.len() {
            let p1 = select(&population, cfg.tournament_size, rng);
            let (mut tree, mut seq) = if rng.random_bool(cfg.crossover_prob) {
                let p2 = select(&population, cfg.tournament_size, rng);
                crossover(lib, p1, p2, cfg.offspring_retries, rng)
            } else {
                (p1.tree.clone(), p1.sequence.clone())
            };
            if rng.random_bool(cfg.mutation_prob) {
                let (t, s) = mutate(lib, &tree, &seq, cfg, rng);
                tree = t;
                seq = s;
            }
            offspring.push((seq, tree));
        }

        let mut next = cache.score_all(&offspring, dataset, budget);
        for c in &next {
            elites.offer(c);
        }
        // Elitism: the best individual so far displaces the weakest child.
        if let Some(best) = elites.best() {
            if let Some((worst_idx, _)) = next
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.reward.partial_cmp(&b.reward).unwrap())
            {
                next[worst_idx] = best.clone();
            }
        }
        population = next;
    }

    Ok(GpOutcome {
        seeds: seed_scores,
        elites: elites.members,
        evaluations: cache.evaluations,
        generations_run,
    })
}
