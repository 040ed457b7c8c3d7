//! File-backed configuration: a TOML document whose sections mirror the
//! engine's config structs, with every key optional. Command-line flags
//! override file values, and the merged result is snapshotted next to each
//! artifact so a run can be reproduced from its output directory alone.

use serde::{Deserialize, Serialize};
use std::path::Path;

use symreg::corpus::SkeletonSampler;
use symreg::evolve::GpConfig;
use symreg::grammar::LibrarySpec;
use symreg::pipeline::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainSection,
    pub gp: GpSection,
    pub corpus: CorpusSection,
}

/// Keys mirroring [`TrainConfig`]; unset keys keep the engine defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub k: Option<usize>,
    pub t: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub max_minibatches: Option<usize>,
    pub epsilon: Option<f64>,
    pub queue_capacity: Option<usize>,
    pub budget: Option<u64>,
    pub inference_patience: Option<usize>,
    pub validation_size: Option<usize>,
    pub validation_batch: Option<usize>,
    pub validation_every: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_h: Option<f64>,
    pub gamma_h: Option<f64>,
    pub lambda_len: Option<f64>,
    pub len_target: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    pub generations: Option<usize>,
    pub crossover_prob: Option<f64>,
    pub mutation_prob: Option<f64>,
    pub tournament_size: Option<usize>,
    pub max_mutation_depth: Option<usize>,
    pub elite_size: Option<usize>,
    pub offspring_retries: Option<usize>,
}

/// Skeleton-sampling knobs for corpus generation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub min_leaves: Option<usize>,
    pub max_leaves: Option<usize>,
    pub with_consts: Option<bool>,
    pub p_variable: Option<f64>,
}

macro_rules! override_from {
    ($target:expr, $section:expr, { $($field:ident),* $(,)? }) => {
        $(if let Some(v) = $section.$field {
            $target.$field = v;
        })*
    };
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(FileConfig::default()),
        }
    }

    /// Engine config for `lib` with this file's overrides applied.
    pub fn train_config(&self, lib: &LibrarySpec) -> TrainConfig {
        let mut cfg = TrainConfig::for_library(lib);
        override_from!(cfg, self.train, {
            k, t, epochs, patience, max_minibatches, epsilon, queue_capacity,
            budget, inference_patience, validation_size, validation_batch,
            validation_every,
        });
        if let Some(v) = self.train.lr {
            cfg.adam.lr = v;
        }
        if let Some(v) = self.train.lambda_h {
            cfg.policy.lambda_h = v;
        }
        if let Some(v) = self.train.gamma_h {
            cfg.policy.gamma_h = v;
        }
        if let Some(v) = self.train.lambda_len {
            cfg.policy.lambda_len = v;
        }
        if let Some(v) = self.train.len_target {
            cfg.policy.len_target = v;
        }
        if let Some(v) = self.train.alpha {
            cfg.policy.alpha = v;
        }
        cfg.gp = self.gp_config();
        cfg
    }

    pub fn gp_config(&self) -> GpConfig {
        let mut gp = GpConfig::default();
        override_from!(gp, self.gp, {
            generations, crossover_prob, mutation_prob, tournament_size,
            max_mutation_depth, elite_size, offspring_retries,
        });
        gp
    }

    pub fn sampler(&self, d: usize) -> SkeletonSampler {
        let mut s = if self.corpus.with_consts.unwrap_or(false) {
            SkeletonSampler::with_const_promotion(d)
        } else {
            SkeletonSampler::new(d)
        };
        if let Some(v) = self.corpus.min_leaves {
            s.l_min = v;
        }
        if let Some(v) = self.corpus.max_leaves {
            s.l_max = v;
        }
        if let Some(v) = self.corpus.p_variable {
            s.p_variable = v;
        }
        s
    }

    /// The merged configuration as a TOML snapshot.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
