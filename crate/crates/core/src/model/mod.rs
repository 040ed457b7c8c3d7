//! Dataset-conditioned autoregressive equation generator.
//!
//! The generator has three parts, all operating on 32-dimensional vectors:
//!
//! * a permutation-invariant **dataset encoder** (induced set attention over
//!   `[y, x1..xd]` rows, pooled to a single latent `V`),
//! * a **tree-state encoder** that embeds the parent/sibling context of each
//!   generation step and runs it through a small causal transformer,
//! * an autoregressive **decoder** that attends over previously emitted
//!   tokens, injects the conditioning vector at every layer, and produces
//!   logits over the token library.
//!
//! Sampling is grammar-masked: logits for tokens that would violate arity,
//! length, or nesting constraints are removed before the categorical draw,
//! so every sampled sequence parses into a valid expression tree.
//!
//! Parameters live in a flat name → matrix map ([`GeneratorParams`]) so the
//! optimizer, checkpoint format, and gradient plumbing can treat the model
//! as an ordered list of tensors. Names beginning with `enc.` belong to the
//! dataset encoder; everything else is the decoding stack. The split matters
//! at inference time, where only the decoding stack is updated.

mod forward;
mod graph;

pub use forward::{SampleBatch, SamplerState};
pub use graph::{BatchGraph, EncoderGraph};

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Dataset;
use crate::grammar::{GrammarError, LibrarySpec, TokenId};
use crate::rng_stream;

/// Width of the dataset latent `V` and of every attention block.
pub const LATENT_DIM: usize = 32;
/// Per-field width of the parent/sibling embeddings (concatenated to 32).
const STATE_EMB_DIM: usize = 16;
/// Hidden width of the position-wise feed-forward sublayers.
const FF_DIM: usize = 128;
/// Number of inducing points in each set-attention block.
const INDUCING_POINTS: usize = 64;
/// Depth of the dataset encoder / tree-state encoder / decoder stacks.
const ISAB_LAYERS: usize = 3;
const STATE_LAYERS: usize = 3;
const DECODER_LAYERS: usize = 2;
/// Additive logit mask; exp(-1e9) underflows to exactly zero, so masked
/// tokens carry no probability and no gradient.
pub(crate) const MASK_LOGIT: f64 = -1e9;
/// Decoder input vocabulary offsets: 0 = padding (unused), 1 = start-of-
/// sequence, library tokens follow at `id + 2`.
pub(crate) const VOCAB_OFFSET: usize = 2;
const START_TOKEN: usize = 1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SYMREGCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Errors from model construction, evaluation, and checkpoint I/O.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    /// A dataset row or parameter tensor contained NaN or infinity.
    #[error("non-finite input to the model")]
    NonFiniteInput,
    /// A scored sequence assigned probability mass to a grammar-masked token.
    #[error("token at position {position} is forbidden by the grammar mask")]
    MaskViolation { position: usize },
    /// A checkpoint tensor does not match the expected shape.
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    /// The checkpoint was written by an incompatible format revision.
    #[error("checkpoint format version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    /// The checkpoint references a token library this build does not know.
    #[error("checkpoint references unknown library `{name}`")]
    UnknownLibrary { name: String },
    /// The checkpoint's library fingerprint does not match the named library.
    #[error("library `{name}` fingerprint mismatch; token set has changed")]
    FingerprintMismatch { name: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named parameter tensors in deterministic (sorted) order.
///
/// Every tensor is a 2-D `f64` matrix; vectors are stored as single-row
/// matrices. Deterministic iteration order is what makes optimizer updates
/// and checkpoints reproducible across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

/// Draw from N(0, std^2) via Box-Muller on the given stream.
pub(crate) fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
}

fn init_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| normal(rng, std))
}

fn init_embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng, 0.02))
}

fn init_points(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| normal(rng, std))
}

impl GeneratorParams {
    /// Freshly initialized parameters for the given library.
    ///
    /// Linear weights are scaled-normal (`1/sqrt(fan_in)`), biases zero,
    /// layer-norm gains one, embeddings N(0, 0.02^2). The same seed always
    /// produces bit-identical tensors.
    pub fn init(library: &LibrarySpec, seed: u64) -> Self {
        let mut rng = rng_stream(seed, 0);
        let d = library.d;
        let lib_len = library.tokens.len();
        let w = LATENT_DIM;
        let mut t: BTreeMap<String, Array2<f64>> = BTreeMap::new();

        let linear = |t: &mut BTreeMap<String, Array2<f64>>,
                          rng: &mut ChaCha8Rng,
                          name: &str,
                          rows: usize,
                          cols: usize| {
            t.insert(format!("{name}.w"), init_linear(rng, rows, cols));
            t.insert(format!("{name}.b"), Array2::zeros((1, cols)));
        };
        let layer_norm = |t: &mut BTreeMap<String, Array2<f64>>, name: &str| {
            t.insert(format!("{name}.g"), Array2::ones((1, w)));
            t.insert(format!("{name}.b"), Array2::zeros((1, w)));
        };
        let mab = |t: &mut BTreeMap<String, Array2<f64>>, rng: &mut ChaCha8Rng, name: &str| {
            for proj in ["q", "k", "v", "o"] {
                t.insert(format!("{name}.{proj}.w"), init_linear(rng, w, w));
                t.insert(format!("{name}.{proj}.b"), Array2::zeros((1, w)));
            }
            layer_norm(t, &format!("{name}.ln0"));
            layer_norm(t, &format!("{name}.ln1"));
        };

        // Dataset encoder: input projection, induced set attention, pooling.
        linear(&mut t, &mut rng, "enc.in", d + 1, w);
        for i in 0..ISAB_LAYERS {
            t.insert(
                format!("enc.isab{i}.ind"),
                init_points(&mut rng, INDUCING_POINTS, w),
            );
            mab(&mut t, &mut rng, &format!("enc.isab{i}.mab0"));
            mab(&mut t, &mut rng, &format!("enc.isab{i}.mab1"));
        }
        t.insert("enc.pma.seed".into(), init_points(&mut rng, 1, w));
        mab(&mut t, &mut rng, "enc.pma.mab");
        // Stand-in latent for runs that ablate the encoder entirely.
        t.insert("enc.const_v".into(), init_points(&mut rng, 1, w));

        // Tree-state encoder: parent/sibling embeddings (+1 sentinel row for
        // "no parent"/"no sibling") and a causal transformer stack.
        t.insert(
            "st.parent_emb".into(),
            init_embedding(&mut rng, lib_len + 1, STATE_EMB_DIM),
        );
        t.insert(
            "st.sib_emb".into(),
            init_embedding(&mut rng, lib_len + 1, STATE_EMB_DIM),
        );
        for i in 0..STATE_LAYERS {
            let base = format!("st.l{i}");
            for proj in ["q", "k", "v", "o"] {
                t.insert(format!("{base}.attn.{proj}.w"), init_linear(&mut rng, w, w));
                t.insert(format!("{base}.attn.{proj}.b"), Array2::zeros((1, w)));
            }
            layer_norm(&mut t, &format!("{base}.ln0"));
            layer_norm(&mut t, &format!("{base}.ln1"));
            t.insert(format!("{base}.ff.w1"), init_linear(&mut rng, w, FF_DIM));
            t.insert(format!("{base}.ff.b1"), Array2::zeros((1, FF_DIM)));
            t.insert(format!("{base}.ff.w2"), init_linear(&mut rng, FF_DIM, w));
            t.insert(format!("{base}.ff.b2"), Array2::zeros((1, w)));
        }

        // Decoder: token embedding, causal self-attention layers with
        // per-layer conditioning injection, output projection.
        t.insert(
            "dec.tok_emb".into(),
            init_embedding(&mut rng, lib_len + VOCAB_OFFSET, w),
        );
        for i in 0..DECODER_LAYERS {
            let base = format!("dec.l{i}");
            for proj in ["q", "k", "v", "o"] {
                t.insert(format!("{base}.attn.{proj}.w"), init_linear(&mut rng, w, w));
                t.insert(format!("{base}.attn.{proj}.b"), Array2::zeros((1, w)));
            }
            // Conditioning vector U = [V, s_i] is 2w wide.
            t.insert(format!("{base}.u.w"), init_linear(&mut rng, 2 * w, w));
            t.insert(format!("{base}.u.b"), Array2::zeros((1, w)));
            layer_norm(&mut t, &format!("{base}.ln0"));
            layer_norm(&mut t, &format!("{base}.ln1"));
            layer_norm(&mut t, &format!("{base}.ln2"));
            t.insert(format!("{base}.ff.w1"), init_linear(&mut rng, w, FF_DIM));
            t.insert(format!("{base}.ff.b1"), Array2::zeros((1, FF_DIM)));
            t.insert(format!("{base}.ff.w2"), init_linear(&mut rng, FF_DIM, w));
            t.insert(format!("{base}.ff.b2"), Array2::zeros((1, w)));
        }
        linear(&mut t, &mut rng, "dec.out", w, lib_len);

        GeneratorParams { tensors: t }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor `{name}`"))
    }

    /// True for tensors belonging to the dataset encoder (frozen during
    /// inference-time refinement).
    pub fn is_encoder_tensor(name: &str) -> bool {
        name.starts_with("enc.")
    }

    /// Verify every tensor is finite.
    pub fn check_finite(&self) -> Result<(), ModelError> {
        for m in self.tensors.values() {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteInput);
            }
        }
        Ok(())
    }
}

/// Sinusoidal position encodings for rows `0..n`, width `dim`.
pub(crate) fn positional_encoding(n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Standardized feature matrix `[y, x1..xd]`, one row per observation.
///
/// Each column is shifted/scaled to zero mean and unit variance so the
/// encoder sees comparable magnitudes regardless of the dataset's natural
/// scale; near-constant columns (std below 1e-9) are only centered.
pub(crate) fn dataset_features(dataset: &Dataset) -> Array2<f64> {
    let n = dataset.n();
    let d = dataset.d();
    let mut f = Array2::zeros((n, d + 1));
    for r in 0..n {
        f[[r, 0]] = dataset.y[r];
        for c in 0..d {
            f[[r, c + 1]] = dataset.x[[r, c]];
        }
    }
    for c in 0..=d {
        let col = f.column(c).to_owned();
        let mean = col.mean().unwrap_or(0.0);
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let denom = if std < 1e-9 { 1.0 } else { std };
        for r in 0..n {
            f[[r, c]] = (f[[r, c]] - mean) / denom;
        }
    }
    f
}

/// The equation generator: a token library plus its parameter tensors.
#[derive(Debug, Clone)]
pub struct Generator {
    pub library: LibrarySpec,
    pub params: GeneratorParams,
}

impl Generator {
    pub fn new(library: LibrarySpec, params: GeneratorParams) -> Self {
        Generator { library, params }
    }

    /// Fresh generator with seeded initialization.
    pub fn init(library: LibrarySpec, seed: u64) -> Self {
        let params = GeneratorParams::init(&library, seed);
        Generator { library, params }
    }

    /// Dataset latent: the encoder output, or the learned constant vector
    /// when the encoder is ablated.
    pub fn latent(&self, dataset: &Dataset, use_encoder: bool) -> Result<Array1<f64>, ModelError> {
        if use_encoder {
            self.encode(dataset)
        } else {
            Ok(self.params.get("enc.const_v").row(0).to_owned())
        }
    }
}

/// A set of named tensors persisted to disk: model parameters plus any
/// extra state (optimizer moments, counters) the caller wants alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub library_name: String,
    pub params: GeneratorParams,
    pub extra: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn new(generator: &Generator) -> Self {
        Checkpoint {
            library_name: generator.library.name.clone(),
            params: generator.params.clone(),
            extra: BTreeMap::new(),
        }
    }
}

fn write_u32(w: &mut impl std::io::Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl std::io::Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl std::io::Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl std::io::Read) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(ModelError::Malformed("string length out of range".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ModelError::Malformed("non-UTF-8 string".into()))
}

/// Serialize a checkpoint. The format is versioned and self-describing:
/// a header with the library name and fingerprint, a shape table, then
/// little-endian `f64` payloads in table order. Writing the same
/// checkpoint twice yields identical bytes.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let lib = LibrarySpec::by_name(&ckpt.library_name)
        .ok_or_else(|| ModelError::UnknownLibrary { name: ckpt.library_name.clone() })?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_str(&mut w, &ckpt.library_name)?;
    write_str(&mut w, &lib.fingerprint())?;
    write_u32(&mut w, lib.d as u32)?;

    let entries: Vec<(String, &Array2<f64>)> = ckpt
        .params
        .tensors
        .iter()
        .map(|(k, v)| (format!("p.{k}"), v))
        .chain(ckpt.extra.iter().map(|(k, v)| (format!("x.{k}"), v)))
        .collect();
    write_u32(&mut w, entries.len() as u32)?;
    for (name, m) in &entries {
        write_str(&mut w, name)?;
        write_u32(&mut w, m.nrows() as u32)?;
        write_u32(&mut w, m.ncols() as u32)?;
    }
    for (_, m) in &entries {
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`], verifying the format
/// version and that the named library still has the same token fingerprint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Malformed("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version });
    }
    let lib_name = read_str(&mut r)?;
    let fingerprint = read_str(&mut r)?;
    let _d = read_u32(&mut r)?;
    let lib = LibrarySpec::by_name(&lib_name)
        .ok_or_else(|| ModelError::UnknownLibrary { name: lib_name.clone() })?;
    if lib.fingerprint() != fingerprint {
        return Err(ModelError::FingerprintMismatch { name: lib_name });
    }

    let count = read_u32(&mut r)? as usize;
    if count > 1 << 16 {
        return Err(ModelError::Malformed("tensor count out of range".into()));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if rows.saturating_mul(cols) > 1 << 26 {
            return Err(ModelError::Malformed("tensor too large".into()));
        }
        shapes.push((name, rows, cols));
    }
    let mut params = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for (name, rows, cols) in shapes {
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let m = Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| ModelError::Malformed("shape table mismatch".into()))?;
        match name.split_once('.') {
            Some(("p", rest)) => {
                params.insert(rest.to_string(), m);
            }
            Some(("x", rest)) => {
                extra.insert(rest.to_string(), m);
            }
            _ => return Err(ModelError::Malformed(format!("bad tensor name `{name}`"))),
        }
    }

    let ckpt = Checkpoint {
        library_name: lib_name,
        params: GeneratorParams { tensors: params },
        extra,
    };
    // Shape-check against a reference initialization so a truncated or
    // edited file cannot produce a silently misshapen model.
    let reference = GeneratorParams::init(&lib, 0);
    for (name, want) in &reference.tensors {
        match ckpt.params.tensors.get(name) {
            None => {
                return Err(ModelError::Malformed(format!("missing tensor `{name}`")));
            }
            Some(got) if got.dim() != want.dim() => {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    found: got.dim(),
                    expected: want.dim(),
                });
            }
            Some(_) => {}
        }
    }
    Ok(ckpt)
}

/// Transfer parameters trained on `source`'s library to a library with more
/// variables (same operators, larger `d`).
///
/// Rows/columns tied to tokens present in both libraries are copied; rows
/// for the new variables are freshly initialized from `seed`. This lets a
/// generator pretrained on low-dimensional equations warm-start a run on a
/// problem with more inputs.
pub fn extend_to_library(
    source: &Generator,
    target_lib: &LibrarySpec,
    seed: u64,
) -> Result<Generator, ModelError> {
    let src_lib = &source.library;
    let mut fresh = GeneratorParams::init(target_lib, seed);
    // Map source token id -> target token id by name.
    let mut id_map: Vec<Option<usize>> = vec![None; src_lib.tokens.len()];
    for (i, tok) in src_lib.tokens.iter().enumerate() {
        id_map[i] = target_lib.token_id(*tok);
    }
    if id_map.iter().any(|m| m.is_none()) {
        return Err(ModelError::Malformed(
            "target library does not contain every source token".into(),
        ));
    }

    for (name, src) in &source.params.tensors {
        let dst = fresh
            .tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::Malformed(format!("missing tensor `{name}`")))?;
        match name.as_str() {
            // Feature rows are [y, x1..xd]; shared prefix copies over.
            "enc.in.w" => {
                for r in 0..src.nrows() {
                    for c in 0..src.ncols() {
                        dst[[r, c]] = src[[r, c]];
                    }
                }
            }
            "st.parent_emb" | "st.sib_emb" => {
                for (sid, tid) in id_map.iter().enumerate() {
                    let tid = tid.unwrap();
                    for c in 0..src.ncols() {
                        dst[[tid, c]] = src[[sid, c]];
                    }
                }
                // Sentinel ("none") row is last in both layouts.
                let s_last = src.nrows() - 1;
                let t_last = dst.nrows() - 1;
                for c in 0..src.ncols() {
                    dst[[t_last, c]] = src[[s_last, c]];
                }
            }
            "dec.tok_emb" => {
                for r in 0..VOCAB_OFFSET {
                    for c in 0..src.ncols() {
                        dst[[r, c]] = src[[r, c]];
                    }
                }
                for (sid, tid) in id_map.iter().enumerate() {
                    let tid = tid.unwrap();
                    for c in 0..src.ncols() {
                        dst[[tid + VOCAB_OFFSET, c]] = src[[sid + VOCAB_OFFSET, c]];
                    }
                }
            }
            "dec.out.w" => {
                for (sid, tid) in id_map.iter().enumerate() {
                    let tid = tid.unwrap();
                    for r in 0..src.nrows() {
                        dst[[r, tid]] = src[[r, sid]];
                    }
                }
            }
            "dec.out.b" => {
                for (sid, tid) in id_map.iter().enumerate() {
                    let tid = tid.unwrap();
                    dst[[0, tid]] = src[[0, sid]];
                }
            }
            _ => {
                if dst.dim() != src.dim() {
                    return Err(ModelError::ShapeMismatch {
                        name: name.clone(),
                        found: src.dim(),
                        expected: dst.dim(),
                    });
                }
                dst.assign(src);
            }
        }
    }
    Ok(Generator::new(target_lib.clone(), fresh))
}

/// Convert a token-id sequence to decoder input ids (start token, then the
/// sequence shifted right by one).
pub(crate) fn decoder_inputs(seq: &[TokenId]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(seq.len());
    ids.push(START_TOKEN);
    for &t in &seq[..seq.len().saturating_sub(1)] {
        ids.push(t + VOCAB_OFFSET);
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ExprTree;
    use ndarray::Array2;

    /// Reference scalar-parameter budget for the two-variable library.
    const REFERENCE_PARAM_COUNT: f64 = 122_446.0;

    fn lib2() -> LibrarySpec {
        LibrarySpec::koza(2)
    }

    fn random_dataset(d: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = rng_stream(seed, 0);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let y = Array1::from_shape_fn(n, |i| f64::sin(x[[i, 0]] * 1.7) + 0.3 * x[[i, 0]]);
        Dataset::new(x, y, seed).unwrap()
    }

    fn dataset_from(tree: &ExprTree, d: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = rng_stream(seed, 1);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(0.2..2.0));
        let y = tree.evaluate(&x, &[]).unwrap();
        Dataset::new(x, y, seed).unwrap()
    }

    #[test]
    fn param_count_close_to_reference_budget() {
        let params = GeneratorParams::init(&lib2(), 7);
        let count = params.param_count() as f64;
        let rel = (count - REFERENCE_PARAM_COUNT).abs() / REFERENCE_PARAM_COUNT;
        assert!(
            rel <= 0.2,
            "param count {count} deviates {rel:.3} from reference {REFERENCE_PARAM_COUNT}"
        );
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = GeneratorParams::init(&lib2(), 11);
        let b = GeneratorParams::init(&lib2(), 11);
        let c = GeneratorParams::init(&lib2(), 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check_finite().unwrap();
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let gen = Generator::init(lib2(), 3);
        let ds = random_dataset(2, 24, 5);
        let v1 = gen.encode(&ds).unwrap();

        // Reverse the rows; the latent must not notice.
        let n = ds.n();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ds.x[[n - 1 - i, j]]);
        let y = Array1::from_shape_fn(n, |i| ds.y[n - 1 - i]);
        let v2 = gen.encode(&Dataset::new(x, y, 0).unwrap()).unwrap();

        let max_diff = v1
            .iter()
            .zip(v2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-9, "latent moved by {max_diff} under permutation");
    }

    #[test]
    fn encode_tolerates_duplicated_rows() {
        let gen = Generator::init(lib2(), 3);
        let ds = random_dataset(2, 16, 9);
        let v1 = gen.encode(&ds).unwrap();

        let n = ds.n();
        let x = Array2::from_shape_fn((2 * n, 2), |(i, j)| ds.x[[i / 2, j]]);
        let y = Array1::from_shape_fn(2 * n, |i| ds.y[i / 2]);
        let v2 = gen.encode(&Dataset::new(x, y, 0).unwrap()).unwrap();

        let max_diff = v1
            .iter()
            .zip(v2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-6, "latent moved by {max_diff} under row duplication");
    }

    #[test]
    fn encode_single_row_dataset_is_finite() {
        let gen = Generator::init(lib2(), 3);
        let ds = Dataset::new(
            Array2::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap(),
            Array1::from_vec(vec![2.0]),
            0,
        )
        .unwrap();
        let v = gen.encode(&ds).unwrap();
        assert!(v.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn logits_are_finite_for_random_partials() {
        let gen = Generator::init(lib2(), 21);
        let mut rng = rng_stream(21, 7);
        for trial in 0..100 {
            let ds = random_dataset(2, 12, 1000 + trial);
            let v = gen.encode(&ds).unwrap();
            let full = gen.library.sample_sequence_uniform(&mut rng);
            let cut = rng.random_range(0..full.len());
            let logits = gen.decode_logits(&v, &full[..cut]).unwrap();
            assert_eq!(logits.len(), gen.library.tokens.len());
            assert!(logits.iter().all(|l| l.is_finite()), "trial {trial}");
        }
    }

    #[test]
    fn decode_logits_depend_on_the_dataset() {
        let gen = Generator::init(lib2(), 4);
        let sin_tree = ExprTree::parse_prefix_text("sin mul x1 x2").unwrap();
        let exp_tree = ExprTree::parse_prefix_text("exp sub x1 x2").unwrap();
        let va = gen.encode(&dataset_from(&sin_tree, 2, 20, 2)).unwrap();
        let vb = gen.encode(&dataset_from(&exp_tree, 2, 20, 2)).unwrap();
        let la = gen.decode_logits(&va, &[]).unwrap();
        let lb = gen.decode_logits(&vb, &[]).unwrap();
        let max_diff = la
            .iter()
            .zip(lb.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "logits identical across different datasets");
    }

    #[test]
    fn sampled_sequences_are_valid_and_length_bounded() {
        let gen = Generator::init(lib2(), 8);
        let ds = random_dataset(2, 15, 3);
        let v = gen.encode(&ds).unwrap();
        let mut rng = rng_stream(8, 0);
        let batch = gen.sample_batch(&v, 200, &mut rng).unwrap();
        assert_eq!(batch.sequences.len(), 200);
        for seq in &batch.sequences {
            assert!(gen.library.sequence_is_valid(seq), "invalid sample {seq:?}");
            assert!(seq.len() >= gen.library.min_len && seq.len() <= gen.library.max_len);
            let tokens = gen.library.ids_to_tokens(seq).unwrap();
            ExprTree::parse_prefix(&tokens).unwrap();
        }
    }

    #[test]
    fn total_log_prob_is_sum_of_steps() {
        let gen = Generator::init(lib2(), 8);
        let v = gen.latent(&random_dataset(2, 10, 4), true).unwrap();
        let mut rng = rng_stream(9, 0);
        let batch = gen.sample_batch(&v, 30, &mut rng).unwrap();
        for i in 0..30 {
            let total: f64 = batch.step_log_probs[i].iter().sum();
            assert!((total - batch.total_log_probs[i]).abs() <= 1e-10);
            assert!(batch.total_log_probs[i] <= 0.0);
            assert_eq!(batch.step_log_probs[i].len(), batch.sequences[i].len());
            assert_eq!(batch.step_entropies[i].len(), batch.sequences[i].len());
            assert!(batch.step_entropies[i].iter().all(|h| *h >= 0.0 && h.is_finite()));
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let gen = Generator::init(lib2(), 8);
        let v = gen.latent(&random_dataset(2, 10, 4), true).unwrap();
        let a = gen.sample_batch(&v, 25, &mut rng_stream(14, 2)).unwrap();
        let b = gen.sample_batch(&v, 25, &mut rng_stream(14, 2)).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.total_log_probs, b.total_log_probs);
    }

    #[test]
    fn rescoring_matches_sampled_log_probs() {
        let gen = Generator::init(lib2(), 8);
        let v = gen.latent(&random_dataset(2, 10, 4), true).unwrap();
        let batch = gen.sample_batch(&v, 20, &mut rng_stream(15, 0)).unwrap();
        for (i, seq) in batch.sequences.iter().enumerate() {
            let (total, steps, ents) = gen.log_prob(&v, seq).unwrap();
            assert!((total - batch.total_log_probs[i]).abs() <= 1e-8);
            for (a, b) in steps.iter().zip(batch.step_log_probs[i].iter()) {
                assert!((a - b).abs() <= 1e-8);
            }
            for (a, b) in ents.iter().zip(batch.step_entropies[i].iter()) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn log_prob_rejects_masked_tokens() {
        let gen = Generator::init(lib2(), 8);
        let v = gen.latent(&random_dataset(2, 10, 4), true).unwrap();
        // A single terminal is a complete tree but shorter than min_len, so
        // the grammar forbids it at position 0.
        let x1 = gen.library.token_id(crate::expr::Token::Var(1)).unwrap();
        match gen.log_prob(&v, &[x1]) {
            Err(ModelError::MaskViolation { position: 0 }) => {}
            other => panic!("expected mask violation, got {other:?}"),
        }
    }

    #[test]
    fn teacher_graph_matches_plain_scoring() {
        let gen = Generator::init(lib2(), 8);
        let v = gen.latent(&random_dataset(2, 10, 4), true).unwrap();
        let batch = gen.sample_batch(&v, 10, &mut rng_stream(16, 0)).unwrap();
        let gamma = 0.9;
        let graph = gen
            .teacher_forced_graph(&v, &batch.sequences, Some(gamma))
            .unwrap();
        for (i, seq) in batch.sequences.iter().enumerate() {
            let (total, _, ents) = gen.log_prob(&v, seq).unwrap();
            let graph_lp = graph.tape.value(graph.log_probs[i])[[0, 0]];
            assert!(
                (graph_lp - total).abs() <= 1e-9,
                "seq {i}: tape {graph_lp} vs plain {total}"
            );
            let decayed: f64 = ents
                .iter()
                .enumerate()
                .map(|(j, h)| gamma.powi(j as i32) * h)
                .sum();
            let graph_ent = graph.tape.value(graph.entropies[i])[[0, 0]];
            assert!(
                (graph_ent - decayed).abs() <= 1e-9,
                "seq {i}: tape entropy {graph_ent} vs plain {decayed}"
            );
        }
    }

    #[test]
    fn graph_rejects_masked_tokens() {
        let gen = Generator::init(lib2(), 8);
        let v = gen.latent(&random_dataset(2, 10, 4), true).unwrap();
        let x1 = gen.library.token_id(crate::expr::Token::Var(1)).unwrap();
        match gen.teacher_forced_graph(&v, &[vec![x1]], None) {
            Err(ModelError::MaskViolation { position: 0 }) => {}
            Err(other) => panic!("expected mask violation, got {other:?}"),
            Ok(_) => panic!("expected mask violation, got a graph"),
        }
    }

    /// Central finite difference of `f` with respect to one parameter entry.
    fn fd_param(
        gen: &Generator,
        name: &str,
        idx: (usize, usize),
        h: f64,
        f: &dyn Fn(&Generator) -> f64,
    ) -> f64 {
        let mut plus = gen.clone();
        plus.params.tensors.get_mut(name).unwrap()[idx] += h;
        let mut minus = gen.clone();
        minus.params.tensors.get_mut(name).unwrap()[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let gen = Generator::init(lib2(), 31);
        let v = gen.latent(&random_dataset(2, 10, 6), true).unwrap();
        let seqs = gen
            .sample_batch(&v, 3, &mut rng_stream(17, 0))
            .unwrap()
            .sequences;
        let gamma = 0.9;

        // Combined objective exercising both outputs: sum of sequence
        // log-probs plus half the decayed entropy sums.
        let graph = gen.teacher_forced_graph(&v, &seqs, Some(gamma)).unwrap();
        let mut graph_mut = graph;
        let terms: Vec<(crate::autodiff::Var, f64)> = graph_mut
            .log_probs
            .iter()
            .map(|&lp| (lp, 1.0))
            .chain(graph_mut.entropies.iter().map(|&e| (e, 0.5)))
            .collect();
        let root = graph_mut.tape.lin_comb(&terms);
        let grads = graph_mut.tape.backward(root);

        let objective = |g: &Generator| -> f64 {
            seqs.iter()
                .map(|seq| {
                    let (lp, _, ents) = g.log_prob(&v, seq).unwrap();
                    let dec: f64 = ents
                        .iter()
                        .enumerate()
                        .map(|(j, h)| gamma.powi(j as i32) * h)
                        .sum();
                    lp + 0.5 * dec
                })
                .sum()
        };

        let mut rng = rng_stream(18, 0);
        let names: Vec<String> = graph_mut.param_vars.keys().cloned().collect();
        let mut checked = 0;
        let mut worst = 0.0f64;
        while checked < 30 {
            let name = &names[rng.random_range(0..names.len())];
            let shape = gen.params.get(name).dim();
            let idx = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
            let var = graph_mut.param_vars[name];
            let analytic = grads.wrt(var, shape)[idx];
            let numeric = fd_param(&gen, name, idx, 1e-5, &objective);
            // Central differences of an O(10) objective carry ~1e-9 noise;
            // truly-zero gradients (e.g. attention key biases, which cancel
            // inside the softmax) can only be checked against that floor.
            if analytic.abs() < 1e-8 {
                assert!(numeric.abs() < 1e-6, "{name}[{idx:?}]: zero analytic but fd {numeric}");
                continue;
            }
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-4,
                "{name}[{idx:?}]: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
            );
            checked += 1;
        }

        // Gradient with respect to the latent input follows the same rule.
        let dv = grads.wrt(graph_mut.v_var, (1, LATENT_DIM));
        for c in [0usize, 7, 19, 31] {
            let mut vp = v.clone();
            vp[c] += 1e-5;
            let mut vm = v.clone();
            vm[c] -= 1e-5;
            let obj_v = |vv: &Array1<f64>| -> f64 {
                seqs.iter()
                    .map(|seq| {
                        let (lp, _, ents) = gen.log_prob(vv, seq).unwrap();
                        let dec: f64 = ents
                            .iter()
                            .enumerate()
                            .map(|(j, h)| gamma.powi(j as i32) * h)
                            .sum();
                        lp + 0.5 * dec
                    })
                    .sum()
            };
            let numeric = (obj_v(&vp) - obj_v(&vm)) / 2e-5;
            let analytic = dv[[0, c]];
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel <= 1e-4, "dV[{c}]: {analytic} vs {numeric} (worst param rel {worst:.2e})");
        }
    }

    #[test]
    fn encoder_graph_matches_plain_encode_and_backpropagates() {
        let gen = Generator::init(lib2(), 41);
        let ds = random_dataset(2, 14, 8);
        let v_plain = gen.encode(&ds).unwrap();
        let eg = gen.encoder_graph(&ds).unwrap();
        let v_graph = eg.tape.value(eg.v_out);
        for c in 0..LATENT_DIM {
            assert!((v_graph[[0, c]] - v_plain[c]).abs() <= 1e-12);
        }

        // Seed the backward pass with a fixed weighting w, equivalent to the
        // scalar objective sum(w ⊙ V).
        let mut rng = rng_stream(42, 0);
        let w = Array2::from_shape_fn((1, LATENT_DIM), |_| rng.random_range(-1.0..1.0));
        let grads = eg.tape.backward_seeded(eg.v_out, w.clone());

        let objective = |g: &Generator| -> f64 {
            let v = g.encode(&ds).unwrap();
            (0..LATENT_DIM).map(|c| w[[0, c]] * v[c]).sum()
        };
        let names: Vec<String> = eg.param_vars.keys().cloned().collect();
        let mut checked = 0;
        while checked < 20 {
            let name = &names[rng.random_range(0..names.len())];
            let shape = gen.params.get(name).dim();
            let idx = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
            let analytic = grads.wrt(eg.param_vars[name], shape)[idx];
            let numeric = fd_param(&gen, name, idx, 1e-5, &objective);
            if analytic.abs() < 1e-8 {
                assert!(numeric.abs() < 1e-6, "{name}[{idx:?}]: zero analytic but fd {numeric}");
                continue;
            }
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                rel <= 1e-4,
                "{name}[{idx:?}]: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
            );
            checked += 1;
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let gen = Generator::init(lib2(), 51);
        let mut ckpt = Checkpoint::new(&gen);
        ckpt.extra
            .insert("adam.t".into(), Array2::from_elem((1, 1), 42.0));
        save_checkpoint(&ckpt, &path).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let path2 = dir.path().join("gen2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let gen = Generator::init(lib2(), 51);
        save_checkpoint(&Checkpoint::new(&gen), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // format version field
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::VersionMismatch { found: 99 }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Malformed(_))));
    }

    #[test]
    fn extension_to_more_variables_preserves_shared_parameters() {
        let src = Generator::init(lib2(), 61);
        let target = LibrarySpec::koza(5);
        let ext = extend_to_library(&src, &target, 77).unwrap();

        // Shared operator tokens keep their embeddings and output weights.
        for tok in &src.library.tokens {
            if let crate::expr::Token::Var(_) = tok {
                continue;
            }
            let sid = src.library.token_id(*tok).unwrap();
            let tid = target.token_id(*tok).unwrap();
            for c in 0..LATENT_DIM {
                assert_eq!(
                    src.params.get("dec.tok_emb")[[sid + VOCAB_OFFSET, c]],
                    ext.params.get("dec.tok_emb")[[tid + VOCAB_OFFSET, c]],
                );
                assert_eq!(
                    src.params.get("dec.out.w")[[c, sid]],
                    ext.params.get("dec.out.w")[[c, tid]],
                );
            }
            for c in 0..STATE_EMB_DIM {
                assert_eq!(
                    src.params.get("st.parent_emb")[[sid, c]],
                    ext.params.get("st.parent_emb")[[tid, c]],
                );
            }
        }
        // Non-embedding tensors copy wholesale.
        assert_eq!(src.params.get("dec.l0.attn.q.w"), ext.params.get("dec.l0.attn.q.w"));
        assert_eq!(src.params.get("st.l2.ff.w1"), ext.params.get("st.l2.ff.w1"));

        // The extended generator samples valid five-variable sequences.
        let ds = random_dataset(5, 12, 9);
        let v = ext.encode(&ds).unwrap();
        let batch = ext.sample_batch(&v, 20, &mut rng_stream(62, 0)).unwrap();
        for seq in &batch.sequences {
            assert!(target.sequence_is_valid(seq));
        }
    }
}
