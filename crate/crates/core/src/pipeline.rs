//! End-to-end drivers: corpus pre-training and per-dataset refinement search.
//!
//! [`pretrain`] loops over a skeleton corpus in mini-batches of `t` freshly
//! drawn datasets, samples `k` equations from the generator for each, and
//! follows the shaped policy gradient (or, in the supervised ablation, the
//! teacher-forced likelihood of the corpus equations themselves). A held-back
//! corpus slice provides the validation reward that drives early stopping.
//!
//! [`infer`] runs the search loop on one dataset: sample a batch, refine it
//! by evolution, track the best equation seen, then push the decoder towards
//! the retained top performers with a queue-training step. The encoder is
//! frozen throughout, so the dataset latent is computed once per run. The
//! loop ends when the evaluation budget runs out, the best reward stagnates,
//! or — when a ground truth is supplied — the search produces an equation
//! that canonicalizes equal to it.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{population_std, Corpus, CorpusError, Dataset};
use crate::evolve::{evaluate_population, gp_refine, Candidate, EvolveError, GpConfig};
use crate::expr::{symbolically_equal, Equivalence, ExprError, ExprTree};
use crate::grammar::{LibrarySpec, TokenId};
use crate::model::{normal, Checkpoint, Generator, ModelError};
use crate::optim::{
    adam_step, entropy_loss, evaluate_candidate, nll_loss, pqt_loss, risk_filter, vpg_loss,
    AdamConfig, AdamState, BudgetCounter, MaxRewardQueue, OptimError, PolicyConfig,
    PolicyGradients,
};
use crate::rng_stream;

/// Rewards this close to perfect trigger the (comparatively expensive)
/// symbolic-equivalence check against the ground truth.
const RECOVERY_REWARD_FLOOR: f64 = 0.999;

/// Reward improvements below this do not reset the stagnation counter.
const IMPROVEMENT_EPS: f64 = 1e-12;

/// Attempts to redraw a dataset whose target column came out non-finite.
const DATASET_REDRAW_ATTEMPTS: usize = 50;

/// Iteration stride for the ground-truth likelihood diagnostic.
const TRUTH_NLL_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// The training loss left the reals; carries a state dump for forensics.
    #[error("non-finite training loss at mini-batch {minibatch}: {diagnostic}")]
    NonFiniteLoss { minibatch: usize, diagnostic: String },
    #[error("cannot pre-train on an empty corpus")]
    EmptyCorpus,
    #[error("dataset has {found} variables but the generator expects {expected}")]
    IncompatibleDataset { found: usize, expected: usize },
    #[error("checkpoint was trained on library `{found}`, expected `{expected}`")]
    IncompatibleCheckpoint { found: String, expected: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Knobs shared by pre-training and inference.
///
/// The defaults are the full-scale settings; tests shrink `k`/`t` and cap
/// `max_minibatches` to keep runs short.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Equations sampled from the generator per dataset.
    pub k: usize,
    /// Datasets per pre-training mini-batch.
    pub t: usize,
    /// Passes over the training slice of the corpus.
    pub epochs: usize,
    /// Mini-batches without validation improvement before stopping.
    pub patience: usize,
    /// Hard cap on mini-batches; 0 lets `epochs` decide.
    pub max_minibatches: usize,
    /// Risk-seeking quantile for filtering before queue insertion.
    pub epsilon: f64,
    /// Capacity of the maximum-reward queue.
    pub queue_capacity: usize,
    /// Equation-evaluation budget for one inference run.
    pub budget: u64,
    /// Stagnant inference iterations before declaring convergence.
    pub inference_patience: usize,
    /// Corpus records held back for the validation metric.
    pub validation_size: usize,
    /// Equations sampled per validation dataset.
    pub validation_batch: usize,
    /// Mini-batches between validation passes.
    pub validation_every: usize,
    pub adam: AdamConfig,
    pub policy: PolicyConfig,
    pub gp: GpConfig,
    /// When false, a learned constant vector stands in for the encoder.
    pub use_encoder: bool,
    /// When false, inference skips the evolutionary refinement step.
    pub use_gp: bool,
    /// When true, pre-training maximizes corpus likelihood instead of reward.
    pub ce_pretrain: bool,
}

impl TrainConfig {
    /// Full-scale defaults with the length prior centred for `lib`.
    pub fn for_library(lib: &LibrarySpec) -> Self {
        TrainConfig {
            k: 500,
            t: 5,
            epochs: 20,
            patience: 100,
            max_minibatches: 0,
            epsilon: 0.02,
            queue_capacity: 10,
            budget: 2_000_000,
            inference_patience: 100,
            validation_size: 100,
            validation_batch: 32,
            validation_every: 10,
            adam: AdamConfig::default(),
            policy: PolicyConfig::for_library(lib),
            gp: GpConfig::default(),
            use_encoder: true,
            use_gp: true,
            ce_pretrain: false,
        }
    }

    fn validate(&self) {
        assert!(self.k >= 1 && self.t >= 1, "batch sizes must be positive");
        assert!(
            self.policy.alpha > 0.0 && self.policy.alpha <= 1.0,
            "baseline decay must lie in (0, 1]"
        );
        assert!(
            self.epsilon > 0.0 && self.epsilon < 1.0,
            "risk quantile must lie in (0, 1)"
        );
        assert!(self.queue_capacity >= 1, "queue capacity must be positive");
    }
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

/// One logged pre-training step.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub minibatch: usize,
    pub loss: f64,
    /// Mean raw reward over the mini-batch's sampled equations (NaN in the
    /// supervised mode, which never scores samples).
    pub mean_reward: f64,
    pub baseline: f64,
    /// Validation reward, on mini-batches where it was measured.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    /// Validation reward of the untrained (or resumed) model.
    pub initial_validation: f64,
    pub records: Vec<TrainRecord>,
    pub minibatches: usize,
    pub stopped_early: bool,
    pub best_validation: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Extra-tensor key holding the reward baseline across checkpoint resumes.
const BASELINE_KEY: &str = "baseline";

/// Draws `(X, y)` for one corpus record, redrawing `X` if the target column
/// contains non-finite values (possible even for screened skeletons, since
/// every draw sees fresh points).
fn record_dataset(
    corpus: &Corpus,
    record_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Dataset>, PipelineError> {
    let record = &corpus.records[record_idx];
    let tree = record.bound_tree()?;
    let d = corpus.library.d;
    for _ in 0..DATASET_REDRAW_ATTEMPTS {
        let x = corpus.domain.sample_x(d, rng);
        match tree.evaluate(&x, &[]) {
            // A numerically constant target has no reward scale; redraw.
            Ok(y) if population_std(&y) > 0.0 => {
                return Ok(Some(Dataset::new(x, y, 0)?));
            }
            _ => continue,
        }
    }
    Ok(None)
}

/// Scores one sampled batch against a dataset; no constant fitting budget
/// is tracked during pre-training.
fn batch_rewards(
    lib: &LibrarySpec,
    sequences: &[Vec<TokenId>],
    dataset: &Dataset,
    budget: Option<&BudgetCounter>,
) -> Result<Vec<f64>, PipelineError> {
    use rayon::prelude::*;
    sequences
        .par_iter()
        .map(|seq| {
            let tokens = lib.ids_to_tokens(seq).map_err(EvolveError::from)?;
            let tree = ExprTree::parse_prefix(&tokens)?;
            Ok(evaluate_candidate(&tree, dataset, budget).reward)
        })
        .collect()
}

/// Mean best-of-batch reward over the validation datasets. Every pass reuses
/// the same sampling stream, so successive measurements are paired and compare
/// model quality rather than sampling luck.
fn validation_reward(
    gen: &Generator,
    datasets: &[Dataset],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64, PipelineError> {
    let mut rng = rng_stream(seed, u64::MAX);
    let mut total = 0.0;
    for ds in datasets {
        let v = gen.latent(ds, cfg.use_encoder)?;
        let batch = gen.sample_batch(&v, cfg.validation_batch, &mut rng)?;
        let rewards = batch_rewards(&gen.library, &batch.sequences, ds, None)?;
        total += rewards.iter().cloned().fold(0.0f64, f64::max);
    }
    Ok(total / datasets.len() as f64)
}

/// Folds the policy gradient's latent derivative back through the encoder
/// (or into the learned constant latent) and merges everything into `total`.
fn accumulate_with_encoder(
    gen: &Generator,
    dataset: &Dataset,
    mut part: PolicyGradients,
    use_encoder: bool,
    total: &mut PolicyGradients,
) -> Result<(), PipelineError> {
    if use_encoder {
        let graph = gen.encoder_graph(dataset)?;
        let seed_grad = part
            .d_latent
            .clone()
            .insert_axis(ndarray::Axis(0));
        let grads = graph.tape.backward_seeded(graph.v_out, seed_grad);
        for (name, var) in &graph.param_vars {
            let shape = gen.params.get(name).dim();
            let g = grads.wrt(*var, shape);
            part.grads
                .entry(name.clone())
                .and_modify(|acc| *acc += &g)
                .or_insert(g);
        }
    } else {
        let g = part
            .d_latent
            .clone()
            .insert_axis(ndarray::Axis(0));
        part.grads
            .entry("enc.const_v".to_string())
            .and_modify(|acc| *acc += &g)
            .or_insert(g);
    }
    total.accumulate(part);
    Ok(())
}

/// Pre-trains a generator on `corpus`, returning the final weights and the
/// training log. Passing `resume` continues from a previous checkpoint,
/// including its optimizer state.
pub fn pretrain(
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate();
    if corpus.records.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let lib = corpus.library.clone();
    let (mut gen, mut adam, mut baseline) = match resume {
        Some(ck) => {
            if ck.library_name != lib.name {
                return Err(PipelineError::IncompatibleCheckpoint {
                    found: ck.library_name.clone(),
                    expected: lib.name.clone(),
                });
            }
            let gen = Generator::new(lib.clone(), ck.params.clone());
            let adam = AdamState::from_extra(&ck.extra);
            let baseline = ck
                .extra
                .get(BASELINE_KEY)
                .map(|b| b[[0, 0]])
                .unwrap_or(0.0);
            (gen, adam, baseline)
        }
        None => (Generator::init(lib.clone(), seed), AdamState::new(), 0.0),
    };

    // Hold back a slice for validation; corpora too small to split are both
    // trained and validated on in full (smoke-test scale only).
    let n = corpus.records.len();
    let val_n = cfg.validation_size.min(n / 5);
    let (train_ids, val_ids): (Vec<usize>, Vec<usize>) = if val_n == 0 {
        ((0..n).collect(), (0..n).collect())
    } else {
        ((0..n - val_n).collect(), (n - val_n..n).collect())
    };

    let mut rng = rng_stream(seed, 1);
    let val_datasets: Vec<Dataset> = {
        let mut out = Vec::with_capacity(val_ids.len());
        for &idx in &val_ids {
            if let Some(ds) = record_dataset(corpus, idx, &mut rng)? {
                out.push(ds);
            }
        }
        out
    };

    let initial_validation = validation_reward(&gen, &val_datasets, cfg, seed)?;
    let mut best_validation = initial_validation;
    let mut since_improve = 0usize;
    let mut stopped_early = false;
    let mut records: Vec<TrainRecord> = Vec::new();
    let mut minibatch = 0usize;

    'epochs: for _ in 0..cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.t) {
            let mut total = PolicyGradients::zero(crate::model::LATENT_DIM);
            let mut reward_sum = 0.0;
            let mut reward_count = 0usize;
            let mut datasets_used = 0usize;
            for &idx in chunk {
                let Some(ds) = record_dataset(corpus, idx, &mut rng)? else {
                    continue;
                };
                let v = gen.latent(&ds, cfg.use_encoder)?;
                let part = if cfg.ce_pretrain {
                    // Power sugar is spelled out so the skeleton fits the
                    // sampling library; records that still land outside the
                    // length bounds carry no likelihood signal and are skipped.
                    let plain = corpus.records[idx].tree().expand_pow_sugar();
                    let Some(seq) = lib.tokens_to_ids(&plain.to_prefix_tokens()) else {
                        continue;
                    };
                    if !lib.sequence_is_valid(&seq) {
                        continue;
                    }
                    nll_loss(&gen, &v, &[seq], &cfg.policy)?
                } else {
                    let batch = gen.sample_batch(&v, cfg.k, &mut rng)?;
                    let rewards = batch_rewards(&lib, &batch.sequences, &ds, None)?;
                    reward_sum += rewards.iter().sum::<f64>();
                    reward_count += rewards.len();
                    let out = vpg_loss(&gen, &v, &batch.sequences, &rewards, baseline, &cfg.policy)?;
                    baseline = out.baseline;
                    out.gradients
                };
                accumulate_with_encoder(&gen, &ds, part, cfg.use_encoder, &mut total)?;
                datasets_used += 1;
            }
            if datasets_used == 0 {
                continue;
            }
            total.scale(1.0 / datasets_used as f64);
            let mean_reward = if reward_count > 0 {
                reward_sum / reward_count as f64
            } else {
                f64::NAN
            };
            if !total.loss.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    minibatch,
                    diagnostic: format!(
                        "loss={}, mean_reward={mean_reward}, baseline={baseline}, \
                         datasets={datasets_used}",
                        total.loss
                    ),
                });
            }
            adam_step(&mut gen.params, &total.grads, &mut adam, &cfg.adam)?;

            let at_cap = cfg.max_minibatches > 0 && minibatch + 1 >= cfg.max_minibatches;
            let validation = if (minibatch + 1) % cfg.validation_every.max(1) == 0 || at_cap {
                Some(validation_reward(&gen, &val_datasets, cfg, seed)?)
            } else {
                None
            };
            if let Some(v) = validation {
                if v > best_validation + IMPROVEMENT_EPS {
                    best_validation = v;
                    since_improve = 0;
                }
            }
            records.push(TrainRecord {
                minibatch,
                loss: total.loss,
                mean_reward,
                baseline,
                validation,
            });
            minibatch += 1;
            since_improve += 1;
            if since_improve >= cfg.patience {
                stopped_early = true;
                break 'epochs;
            }
            if at_cap {
                break 'epochs;
            }
        }
    }

    let mut checkpoint = Checkpoint::new(&gen);
    checkpoint.extra = adam.to_extra();
    checkpoint.extra.insert(
        BASELINE_KEY.to_string(),
        Array2::from_elem((1, 1), baseline),
    );
    Ok(PretrainOutcome {
        checkpoint,
        log: TrainLog {
            initial_validation,
            records,
            minibatches: minibatch,
            stopped_early,
            best_validation,
        },
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum RunStatus {
    /// Ground truth recovered exactly (benchmark mode only).
    Recovered,
    BudgetExhausted,
    /// Best reward stagnated for `inference_patience` iterations.
    Converged,
}

/// One inference iteration as logged to the run trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Cumulative equation evaluations charged so far.
    pub evaluations: u64,
    pub best_reward: f64,
    pub best_prefix: String,
    /// Fraction of the sampled batch that evaluated to finite predictions.
    pub valid_fraction: f64,
    /// Negative log-likelihood of the ground truth under the current
    /// decoder; measured every few iterations in benchmark mode, and absent
    /// when the truth cannot be spelled within the library's length bounds.
    pub truth_nll: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub status: RunStatus,
    /// Total evaluations charged by the run.
    pub evaluations: u64,
    /// Evaluations used at the moment of recovery.
    pub recovered_at: Option<u64>,
}

impl RunTrace {
    /// Render as JSON lines: one record per line, then a summary line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "status": self.status,
            "evaluations": self.evaluations,
            "recovered_at": self.recovered_at,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// The best equation found by a run.
#[derive(Debug, Clone)]
pub struct BestEquation {
    /// Skeleton tree (placeholders unbound).
    pub tree: ExprTree,
    pub consts: Vec<f64>,
    pub reward: f64,
    pub nmse: f64,
    pub sequence: Vec<TokenId>,
}

impl BestEquation {
    /// The tree with fitted constants substituted in.
    pub fn bound_tree(&self) -> Result<ExprTree, ExprError> {
        self.tree.bind_constants(&self.consts)
    }
}

#[derive(Debug)]
pub struct InferOutcome {
    pub best: BestEquation,
    pub trace: RunTrace,
}

fn best_equation_from(c: &Candidate) -> BestEquation {
    BestEquation {
        tree: c.tree.clone(),
        consts: c.consts.clone(),
        reward: c.reward,
        nmse: c.nmse,
        sequence: c.sequence.clone(),
    }
}

/// Per-variable `[min, max]` ranges actually covered by the dataset, used to
/// place numeric probes for the equivalence check.
fn dataset_bounds(dataset: &Dataset) -> Vec<(f64, f64)> {
    (0..dataset.d())
        .map(|j| {
            let col = dataset.x.column(j);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect()
}

/// Searches `dataset` for a well-fitting equation, refining the generator's
/// decoder as it goes. With `ground_truth` present the run stops as soon as
/// some candidate canonicalizes equal to it; the recovered equation then
/// becomes the reported answer (it necessarily ties the best reward).
///
/// The budget is advisory: a sampling batch or evolution generation that is
/// already underway completes, so the counter can overshoot by one batch.
pub fn infer(
    gen: &mut Generator,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    ground_truth: Option<&ExprTree>,
) -> Result<InferOutcome, PipelineError> {
    cfg.validate();
    let lib = gen.library.clone();
    if dataset.d() != lib.d {
        return Err(PipelineError::IncompatibleDataset {
            found: dataset.d(),
            expected: lib.d,
        });
    }

    let budget = BudgetCounter::new(cfg.budget);
    let mut queue = MaxRewardQueue::new(cfg.queue_capacity);
    let mut adam = AdamState::new();
    let mut rng = rng_stream(seed, 0);
    let v = gen.latent(dataset, cfg.use_encoder)?;
    let bounds = dataset_bounds(dataset);
    // The likelihood diagnostic scores the truth's sugar-free spelling, the
    // only form the sampling library can express.
    let truth_ids: Option<Vec<TokenId>> = ground_truth
        .and_then(|t| lib.tokens_to_ids(&t.expand_pow_sugar().to_prefix_tokens()));

    let mut best: Option<BestEquation> = None;
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut recovered_at: Option<u64> = None;
    let mut stagnant = 0usize;
    let mut checked_keys: HashSet<String> = HashSet::new();
    let mut iteration = 0usize;

    let status = loop {
        let batch = gen.sample_batch(&v, cfg.k, &mut rng)?;
        let candidates: Vec<Candidate> = if cfg.use_gp {
            let out = gp_refine(&lib, &batch.sequences, dataset, &cfg.gp, &budget, &mut rng)?;
            let mut all = out.seeds;
            all.extend(out.elites);
            all
        } else {
            evaluate_population(&lib, &batch.sequences, dataset, &budget)?
        };

        let valid_fraction = candidates[..cfg.k]
            .iter()
            .filter(|c| c.nmse.is_finite())
            .count() as f64
            / cfg.k as f64;

        let mut improved = false;
        for c in &candidates {
            if best.as_ref().map_or(true, |b| c.reward > b.reward + IMPROVEMENT_EPS) {
                best = Some(best_equation_from(c));
                improved = true;
            }
            if let Some(truth) = ground_truth {
                if recovered_at.is_none()
                    && c.reward > RECOVERY_REWARD_FLOOR
                    && checked_keys.insert(c.key.clone())
                {
                    let bound = c.tree.bind_constants(&c.consts)?;
                    if symbolically_equal(&bound, truth, &bounds, seed)? == Equivalence::Equal {
                        recovered_at = Some(budget.used());
                        best = Some(best_equation_from(c));
                    }
                }
            }
        }

        let truth_nll = if iteration % TRUTH_NLL_EVERY == 0 {
            match &truth_ids {
                Some(ids) => match gen.log_prob(&v, ids) {
                    Ok((lp, _, _)) => Some(-lp),
                    Err(ModelError::MaskViolation { .. }) => None,
                    Err(e) => return Err(e.into()),
                },
                None => None,
            }
        } else {
            None
        };
        let current_best = best.as_ref().expect("at least one candidate scored");
        records.push(TraceRecord {
            iteration,
            evaluations: budget.used(),
            best_reward: current_best.reward,
            best_prefix: current_best.tree.render_prefix(),
            valid_fraction,
            truth_nll,
        });

        if recovered_at.is_some() {
            break RunStatus::Recovered;
        }
        if budget.exhausted() {
            break RunStatus::BudgetExhausted;
        }
        stagnant = if improved { 0 } else { stagnant + 1 };
        if stagnant >= cfg.inference_patience {
            break RunStatus::Converged;
        }

        // Retain the risk-filtered top performers, always including the best
        // of this batch, then pull the decoder towards the queue.
        let rewards: Vec<f64> = candidates.iter().map(|c| c.reward).collect();
        for idx in risk_filter(&rewards, cfg.epsilon) {
            let c = &candidates[idx];
            queue.insert(c.key.clone(), c.reward, c.sequence.clone());
        }
        if let Some(c) = candidates[..cfg.k]
            .iter()
            .max_by(|a, b| a.reward.total_cmp(&b.reward))
        {
            queue.insert(c.key.clone(), c.reward, c.sequence.clone());
        }
        let mut grads = pqt_loss(gen, &v, &queue.sequences(), &cfg.policy)?;
        grads.accumulate(entropy_loss(gen, &v, &batch.sequences, &cfg.policy)?);
        adam_step(&mut gen.params, &grads.grads, &mut adam, &cfg.adam)?;
        iteration += 1;
    };

    Ok(InferOutcome {
        best: best.expect("at least one candidate scored"),
        trace: RunTrace {
            records,
            status,
            evaluations: budget.used(),
            recovered_at,
        },
    })
}

// ---------------------------------------------------------------------------
// Dataset transforms
// ---------------------------------------------------------------------------

/// Adds Gaussian noise to the targets, with standard deviation
/// `alpha * sqrt(Σ yᵢ²)`, and recomputes the dataset's reward scale.
pub fn add_noise(
    dataset: &Dataset,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset, CorpusError> {
    assert!(alpha >= 0.0, "noise level must be nonnegative");
    if alpha == 0.0 {
        return Ok(dataset.clone());
    }
    let y_rms = dataset.y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let std = alpha * y_rms;
    let noisy: Array1<f64> = dataset.y.mapv(|v| v + normal(rng, std));
    Dataset::new(dataset.x.clone(), noisy, dataset.seed)
}

/// Keeps `n` uniformly chosen rows (all rows when `n` exceeds the dataset).
pub fn subsample(dataset: &Dataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset, CorpusError> {
    if n >= dataset.n() {
        return Ok(dataset.clone());
    }
    let mut rows = rand::seq::index::sample(rng, dataset.n(), n).into_vec();
    rows.sort_unstable();
    let x = Array2::from_shape_fn((n, dataset.d()), |(i, j)| dataset.x[[rows[i], j]]);
    let y = Array1::from_shape_fn(n, |i| dataset.y[rows[i]]);
    Dataset::new(x, y, dataset.seed)
}
