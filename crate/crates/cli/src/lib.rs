//! Library backing the `symreg` binary: configuration loading, the command
//! implementations, and report-schema checking. The binary itself only
//! parses arguments and maps errors to exit codes (0 success, 1 internal
//! failure, 2 usage or config problem).

pub mod commands;
pub mod config;
pub mod schema;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The invocation or its inputs were wrong; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The engine failed mid-flight; exit code 1.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

macro_rules! internal_from {
    ($($ty:ty),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Internal(e.to_string())
            }
        })*
    };
}

internal_from!(
    symreg::pipeline::PipelineError,
    symreg::model::ModelError,
    symreg::corpus::CorpusError,
    symreg::optim::OptimError,
    symreg::evolve::EvolveError,
    symreg::expr::ExprError,
);

/// Caps the global worker pool at the smaller of the `--workers` flag and
/// the `SYMREG_THREADS` environment variable; unset means the default pool.
pub fn configure_threads(workers: Option<usize>) -> Result<(), CliError> {
    let env_cap = match std::env::var("SYMREG_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            CliError::Usage(format!("SYMREG_THREADS must be a positive integer, got `{v}`"))
        })?),
        Err(_) => None,
    };
    let cap = match (workers, env_cap) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    if let Some(n) = cap {
        if n == 0 {
            return Err(CliError::Usage("worker count must be positive".into()));
        }
        // A second configuration attempt in the same process is harmless; the
        // first pool stays in effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
