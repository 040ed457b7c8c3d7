//! Plain (gradient-free) forward passes: dataset encoding, incremental
//! sampling with per-layer key/value caches, and teacher-forced scoring.
//!
//! The sampler and the scorer share one step implementation, so the log
//! probabilities recorded while sampling are identical to the ones computed
//! when the same sequence is re-scored.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Dataset;
use crate::grammar::TokenId;

use super::{
    dataset_features, Generator, GeneratorParams, ModelError, LATENT_DIM, MASK_LOGIT, VOCAB_OFFSET,
};

const LN_EPS: f64 = 1e-5;

pub(crate) fn posenc_row(pos: usize, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

fn linear_rows(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    for mut row in out.rows_mut() {
        row += &b.row(0);
    }
    out
}

fn linear_row(x: &Array1<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    x.dot(w) + &b.row(0)
}

fn layer_norm_row(x: &Array1<f64>, g: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + LN_EPS).sqrt();
    Array1::from_shape_fn(x.len(), |i| (x[i] - mean) / denom * g[[0, i]] + b[[0, i]])
}

fn layer_norm_rows(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let r = layer_norm_row(&row.to_owned(), g, b);
        row.assign(&r);
    }
    out
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn relu_rows(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Multihead-free attention block: project queries from `q` and keys/values
/// from `k`, attend, then residual + layer-norm twice (once around the
/// attention output, once around a position-wise feed-forward).
fn mab(p: &GeneratorParams, prefix: &str, q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let qp = linear_rows(q, p.get(&format!("{prefix}.q.w")), p.get(&format!("{prefix}.q.b")));
    let kp = linear_rows(k, p.get(&format!("{prefix}.k.w")), p.get(&format!("{prefix}.k.b")));
    let vp = linear_rows(k, p.get(&format!("{prefix}.v.w")), p.get(&format!("{prefix}.v.b")));
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();
    let scores = qp.dot(&kp.t()) * scale;
    let attn = softmax_rows(&scores).dot(&vp);
    let o = layer_norm_rows(
        &(&qp + &attn),
        p.get(&format!("{prefix}.ln0.g")),
        p.get(&format!("{prefix}.ln0.b")),
    );
    let ff = relu_rows(&linear_rows(
        &o,
        p.get(&format!("{prefix}.o.w")),
        p.get(&format!("{prefix}.o.b")),
    ));
    layer_norm_rows(
        &(&o + &ff),
        p.get(&format!("{prefix}.ln1.g")),
        p.get(&format!("{prefix}.ln1.b")),
    )
}

impl Generator {
    /// Encode a dataset into the conditioning latent `V`.
    ///
    /// The encoder standardizes `[y, x1..xd]` per column, projects rows to
    /// the model width, applies induced set attention (attention through a
    /// fixed set of inducing points, so cost is linear in `n` and the result
    /// is invariant to row order), and pools with a learned seed query.
    pub fn encode(&self, dataset: &Dataset) -> Result<Array1<f64>, ModelError> {
        if dataset.d() != self.library.d {
            return Err(ModelError::Malformed(format!(
                "dataset has {} variables, library `{}` expects {}",
                dataset.d(),
                self.library.name,
                self.library.d
            )));
        }
        let feats = dataset_features(dataset);
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        let p = &self.params;
        let mut x = linear_rows(&feats, p.get("enc.in.w"), p.get("enc.in.b"));
        for i in 0..super::ISAB_LAYERS {
            let ind = p.get(&format!("enc.isab{i}.ind"));
            let h = mab(p, &format!("enc.isab{i}.mab0"), ind, &x);
            x = mab(p, &format!("enc.isab{i}.mab1"), &x, &h);
        }
        let pooled = mab(p, "enc.pma.mab", p.get("enc.pma.seed"), &x);
        let v = pooled.row(0).to_owned();
        if v.iter().any(|e| !e.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        Ok(v)
    }
}

/// Growing key/value cache for one causal attention layer.
#[derive(Debug, Clone, Default)]
struct LayerCache {
    keys: Vec<Array1<f64>>,
    vals: Vec<Array1<f64>>,
}

/// One causal attention step: append this position's key/value, attend the
/// query over everything seen so far.
fn attn_step(
    cache: &mut LayerCache,
    p: &GeneratorParams,
    prefix: &str,
    x: &Array1<f64>,
) -> Array1<f64> {
    let q = linear_row(x, p.get(&format!("{prefix}.q.w")), p.get(&format!("{prefix}.q.b")));
    let k = linear_row(x, p.get(&format!("{prefix}.k.w")), p.get(&format!("{prefix}.k.b")));
    let v = linear_row(x, p.get(&format!("{prefix}.v.w")), p.get(&format!("{prefix}.v.b")));
    cache.keys.push(k);
    cache.vals.push(v);
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();
    let scores: Vec<f64> = cache.keys.iter().map(|kj| q.dot(kj) * scale).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut ctx = Array1::zeros(x.len());
    for (w, vj) in weights.iter().zip(cache.vals.iter()) {
        ctx = ctx + vj * (*w / total);
    }
    linear_row(&ctx, p.get(&format!("{prefix}.o.w")), p.get(&format!("{prefix}.o.b")))
}

fn ffn_row(p: &GeneratorParams, prefix: &str, x: &Array1<f64>) -> Array1<f64> {
    let h = linear_row(x, p.get(&format!("{prefix}.w1")), p.get(&format!("{prefix}.b1")))
        .mapv(|v| v.max(0.0));
    linear_row(&h, p.get(&format!("{prefix}.w2")), p.get(&format!("{prefix}.b2")))
}

/// Incremental decoding state: per-layer attention caches for the tree-state
/// encoder and the decoder, plus the current position.
#[derive(Debug, Clone)]
pub struct SamplerState {
    state_caches: Vec<LayerCache>,
    dec_caches: Vec<LayerCache>,
    pos: usize,
}

impl SamplerState {
    pub fn new() -> Self {
        SamplerState {
            state_caches: vec![LayerCache::default(); super::STATE_LAYERS],
            dec_caches: vec![LayerCache::default(); super::DECODER_LAYERS],
            pos: 0,
        }
    }

    /// Advance one position: embed the tree state of `partial` and the
    /// previous token, run both stacks, and return raw next-token logits.
    fn step(
        &mut self,
        gen: &Generator,
        v: &Array1<f64>,
        partial: &[TokenId],
    ) -> Result<Array1<f64>, ModelError> {
        let p = &gen.params;
        let lib = &gen.library;
        let pos = self.pos;
        let none_row = lib.tokens.len();

        // Tree-state encoder input: parent/sibling embeddings + position.
        let ts = lib.tree_state(partial)?;
        let parent_row = ts.parent.map_or(none_row, |t| t);
        let sib_row = ts.sibling.map_or(none_row, |t| t);
        let pe = p.get("st.parent_emb");
        let se = p.get("st.sib_emb");
        let mut s: Array1<f64> = Array1::zeros(LATENT_DIM);
        for c in 0..super::STATE_EMB_DIM {
            s[c] = pe[[parent_row, c]];
            s[super::STATE_EMB_DIM + c] = se[[sib_row, c]];
        }
        s = s + posenc_row(pos, LATENT_DIM);
        for (i, cache) in self.state_caches.iter_mut().enumerate() {
            let base = format!("st.l{i}");
            let a = attn_step(cache, p, &format!("{base}.attn"), &s);
            s = layer_norm_row(&(&s + &a), p.get(&format!("{base}.ln0.g")), p.get(&format!("{base}.ln0.b")));
            let f = ffn_row(p, &format!("{base}.ff"), &s);
            s = layer_norm_row(&(&s + &f), p.get(&format!("{base}.ln1.g")), p.get(&format!("{base}.ln1.b")));
        }

        // Conditioning vector for this position: dataset latent + tree state.
        let mut u: Array1<f64> = Array1::zeros(2 * LATENT_DIM);
        for c in 0..LATENT_DIM {
            u[c] = v[c];
            u[LATENT_DIM + c] = s[c];
        }

        // Decoder input: previous decoded token (start token at position 0).
        let input_id = if pos == 0 {
            super::START_TOKEN
        } else {
            partial[pos - 1] + VOCAB_OFFSET
        };
        let emb = p.get("dec.tok_emb");
        let mut x: Array1<f64> =
            Array1::from_shape_fn(LATENT_DIM, |c| emb[[input_id, c]]) + posenc_row(pos, LATENT_DIM);
        for (i, cache) in self.dec_caches.iter_mut().enumerate() {
            let base = format!("dec.l{i}");
            let a = attn_step(cache, p, &format!("{base}.attn"), &x);
            x = layer_norm_row(&(&x + &a), p.get(&format!("{base}.ln0.g")), p.get(&format!("{base}.ln0.b")));
            let inj = linear_row(&u, p.get(&format!("{base}.u.w")), p.get(&format!("{base}.u.b")));
            x = layer_norm_row(&(&x + &inj), p.get(&format!("{base}.ln1.g")), p.get(&format!("{base}.ln1.b")));
            let f = ffn_row(p, &format!("{base}.ff"), &x);
            x = layer_norm_row(&(&x + &f), p.get(&format!("{base}.ln2.g")), p.get(&format!("{base}.ln2.b")));
        }
        self.pos += 1;
        Ok(linear_row(&x, p.get("dec.out.w"), p.get("dec.out.b")))
    }
}

impl Default for SamplerState {
    fn default() -> Self {
        Self::new()
    }
}

/// Log-probabilities of the grammar-masked categorical at one step, plus its
/// entropy. Masked entries come back around `-1e9` and carry zero mass.
fn masked_log_probs(logits: &Array1<f64>, mask: &[bool]) -> (Array1<f64>, f64) {
    let masked = Array1::from_shape_fn(logits.len(), |i| {
        logits[i] + if mask[i] { 0.0 } else { MASK_LOGIT }
    });
    let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + masked.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_probs = masked.mapv(|v| v - lse);
    let entropy = -log_probs
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 { p * lp } else { 0.0 }
        })
        .sum::<f64>();
    (log_probs, entropy)
}

/// A batch of sampled sequences with the per-step log-probabilities and
/// distribution entropies recorded during generation.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub sequences: Vec<Vec<TokenId>>,
    pub step_log_probs: Vec<Vec<f64>>,
    pub step_entropies: Vec<Vec<f64>>,
    pub total_log_probs: Vec<f64>,
}

impl Generator {
    /// Raw next-token logits after a (possibly empty) valid partial sequence.
    pub fn decode_logits(
        &self,
        v: &Array1<f64>,
        partial: &[TokenId],
    ) -> Result<Array1<f64>, ModelError> {
        let mut state = SamplerState::new();
        let mut logits = state.step(self, v, &[])?;
        for end in 1..=partial.len() {
            logits = state.step(self, v, &partial[..end])?;
        }
        Ok(logits)
    }

    /// Sample `k` complete sequences from the masked autoregressive
    /// distribution. Every returned sequence parses under the library's
    /// grammar and respects its length bounds; identical `(params, v, rng
    /// stream)` inputs reproduce the batch bit-for-bit.
    pub fn sample_batch(
        &self,
        v: &Array1<f64>,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleBatch, ModelError> {
        let mut batch = SampleBatch {
            sequences: Vec::with_capacity(k),
            step_log_probs: Vec::with_capacity(k),
            step_entropies: Vec::with_capacity(k),
            total_log_probs: Vec::with_capacity(k),
        };
        for _ in 0..k {
            let mut state = SamplerState::new();
            let mut seq: Vec<TokenId> = Vec::new();
            let mut lps = Vec::new();
            let mut ents = Vec::new();
            loop {
                let logits = state.step(self, v, &seq)?;
                let mask = self.library.valid_next_mask(&seq)?;
                let (log_probs, entropy) = masked_log_probs(&logits, &mask);
                // CDF walk over the unmasked tokens in id order.
                let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
                let total: f64 = probs.iter().sum();
                let draw: f64 = rng.random_range(0.0..1.0) * total;
                let mut acc = 0.0;
                let mut chosen = None;
                for (id, &pr) in probs.iter().enumerate() {
                    if !mask[id] {
                        continue;
                    }
                    acc += pr;
                    if draw < acc {
                        chosen = Some(id);
                        break;
                    }
                }
                let chosen = match chosen {
                    Some(id) => id,
                    // Floating-point slack at the high end: take the last
                    // unmasked token.
                    None => mask
                        .iter()
                        .rposition(|&m| m)
                        .ok_or(ModelError::MaskViolation { position: seq.len() })?,
                };
                lps.push(log_probs[chosen]);
                ents.push(entropy);
                seq.push(chosen);
                if self.library.is_complete(&seq) {
                    break;
                }
            }
            batch.total_log_probs.push(lps.iter().sum());
            batch.step_log_probs.push(lps);
            batch.step_entropies.push(ents);
            batch.sequences.push(seq);
        }
        Ok(batch)
    }

    /// Teacher-forced score of a complete sequence: total log-probability,
    /// per-step log-probabilities, and per-step distribution entropies.
    ///
    /// Fails with [`ModelError::MaskViolation`] if any token is forbidden by
    /// the grammar mask at its position.
    pub fn log_prob(
        &self,
        v: &Array1<f64>,
        seq: &[TokenId],
    ) -> Result<(f64, Vec<f64>, Vec<f64>), ModelError> {
        let mut state = SamplerState::new();
        let mut lps = Vec::with_capacity(seq.len());
        let mut ents = Vec::with_capacity(seq.len());
        for (i, &tok) in seq.iter().enumerate() {
            let logits = state.step(self, v, &seq[..i])?;
            let mask = self.library.valid_next_mask(&seq[..i])?;
            if tok >= mask.len() || !mask[tok] {
                return Err(ModelError::MaskViolation { position: i });
            }
            let (log_probs, entropy) = masked_log_probs(&logits, &mask);
            lps.push(log_probs[tok]);
            ents.push(entropy);
        }
        Ok((lps.iter().sum(), lps, ents))
    }
}
