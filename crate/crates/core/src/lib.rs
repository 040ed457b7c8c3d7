//! Symbolic regression with a dataset-conditioned neural equation generator,
//! policy-gradient training, and genetic-programming refinement.
//!
//! The crate is organised bottom-up:
//!
//! * [`expr`] — prefix-token expression trees, evaluation, complexity, and a
//!   rational-normal-form canonicaliser used for symbolic equivalence checks.
//! * [`grammar`] — token libraries and the constraint masks that make every
//!   sampled token sequence a well-formed expression.
//! * [`corpus`] — random skeleton sampling, pre-training corpora, and the
//!   built-in benchmark problem registry.
//! * [`autodiff`] — a small reverse-mode tape over `f64` matrices.
//! * [`model`] — the set-transformer dataset encoder and the masked
//!   autoregressive decoder, with checkpointing.
//! * [`optim`] — rewards, policy-gradient losses, the max-reward queue, Adam,
//!   and BFGS constant fitting.
//! * [`evolve`] — genetic-programming refinement of sampled equation batches.
//! * [`pipeline`] — pre-training and inference loops, run traces, noise.
//! * [`bench`] — recovery/accuracy metrics and benchmark reports.

pub mod autodiff;
pub mod bench;
pub mod corpus;
pub mod evolve;
pub mod expr;
pub mod grammar;
pub mod model;
pub mod optim;
pub mod pipeline;

/// Derives a deterministic child RNG from a base seed and a salt.
///
/// Used wherever work is fanned out (corpus workers, batch samples) so that
/// results are independent of thread scheduling: each unit of work gets its
/// own counter-derived stream.
pub fn rng_stream(base_seed: u64, salt: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // SplitMix64 finaliser; decorrelates consecutive salts.
    let mut z = base_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(salt.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    rand_chacha::ChaCha8Rng::seed_from_u64(z)
}
