//! Differentiable teacher-forced scoring on the reverse-mode tape.
//!
//! Training needs gradients of sequence log-probabilities (and of the
//! per-step distribution entropies) with respect to the parameters. The
//! sampler in `forward.rs` is gradient-free; this module re-runs the same
//! computation as whole-sequence matrix operations recorded on a [`Tape`].
//!
//! Two graphs cover the two halves of the model:
//!
//! * [`BatchGraph`]: decoding stack only, with the dataset latent `V` as an
//!   input node. Backpropagating a loss yields decoder/tree-state gradients
//!   plus `dL/dV`.
//! * [`EncoderGraph`]: dataset encoder only, producing `V`. Seeding its
//!   backward pass with `dL/dV` from a batch graph completes the chain rule
//!   end-to-end without ever materializing one giant tape.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::autodiff::{Tape, Var};
use crate::corpus::Dataset;
use crate::grammar::TokenId;

use super::{
    dataset_features, decoder_inputs, positional_encoding, Generator, GeneratorParams, ModelError,
    DECODER_LAYERS, ISAB_LAYERS, LATENT_DIM, MASK_LOGIT, STATE_EMB_DIM, STATE_LAYERS,
};

/// Teacher-forced scores for a chunk of sequences sharing one tape.
pub struct BatchGraph {
    pub tape: Tape,
    /// Per-sequence total log-probability (scalar vars).
    pub log_probs: Vec<Var>,
    /// Per-sequence positionally-decayed entropy sums (scalar vars); empty
    /// unless an entropy decay was requested.
    pub entropies: Vec<Var>,
    /// Decoding-stack parameter tensors by name.
    pub param_vars: BTreeMap<String, Var>,
    /// The dataset latent input node (1×32).
    pub v_var: Var,
}

/// The dataset encoder as a differentiable graph.
pub struct EncoderGraph {
    pub tape: Tape,
    /// Encoder output `V` (1×32).
    pub v_out: Var,
    /// Encoder parameter tensors by name.
    pub param_vars: BTreeMap<String, Var>,
}

/// Layer norm with learned gain/bias on top of the tape's plain row norm.
fn ln_affine(t: &mut Tape, x: Var, g: Var, b: Var) -> Var {
    let n = t.layer_norm_row(x);
    let scaled = t.mul_row(n, g);
    t.add_row(scaled, b)
}

fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xw = t.matmul(x, w);
    t.add_row(xw, b)
}

struct ParamVars<'a> {
    tape: &'a mut Tape,
    params: &'a GeneratorParams,
    vars: BTreeMap<String, Var>,
}

impl<'a> ParamVars<'a> {
    fn get(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let var = self.tape.input(self.params.get(name).clone());
        self.vars.insert(name.to_string(), var);
        var
    }
}

/// Causal self-attention + residual/norm, whole sequence at once. The
/// additive mask puts `-1e9` above the diagonal; those entries underflow to
/// exactly zero probability after the softmax, matching the incremental
/// sampler's arithmetic.
fn causal_attention(
    pv: &mut ParamVars,
    prefix: &str,
    x: Var,
    causal_mask: Var,
) -> Var {
    let (wq, bq) = (pv.get(&format!("{prefix}.q.w")), pv.get(&format!("{prefix}.q.b")));
    let (wk, bk) = (pv.get(&format!("{prefix}.k.w")), pv.get(&format!("{prefix}.k.b")));
    let (wv, bv) = (pv.get(&format!("{prefix}.v.w")), pv.get(&format!("{prefix}.v.b")));
    let (wo, bo) = (pv.get(&format!("{prefix}.o.w")), pv.get(&format!("{prefix}.o.b")));
    let t = &mut *pv.tape;
    let q = linear(t, x, wq, bq);
    let k = linear(t, x, wk, bk);
    let v = linear(t, x, wv, bv);
    let kt = t.transpose(k);
    let scores = t.matmul(q, kt);
    let scaled = t.scale(scores, 1.0 / (LATENT_DIM as f64).sqrt());
    let masked = t.add(scaled, causal_mask);
    let attn = t.softmax_row(masked);
    let ctx = t.matmul(attn, v);
    linear(t, ctx, wo, bo)
}

fn feed_forward(pv: &mut ParamVars, prefix: &str, x: Var) -> Var {
    let (w1, b1) = (pv.get(&format!("{prefix}.w1")), pv.get(&format!("{prefix}.b1")));
    let (w2, b2) = (pv.get(&format!("{prefix}.w2")), pv.get(&format!("{prefix}.b2")));
    let t = &mut *pv.tape;
    let h = linear(t, x, w1, b1);
    let r = t.relu(h);
    linear(t, r, w2, b2)
}

fn residual_norm(pv: &mut ParamVars, ln: &str, x: Var, delta: Var) -> Var {
    let g = pv.get(&format!("{ln}.g"));
    let b = pv.get(&format!("{ln}.b"));
    let t = &mut *pv.tape;
    let sum = t.add(x, delta);
    ln_affine(t, sum, g, b)
}

fn causal_mask_values(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j > i { MASK_LOGIT } else { 0.0 })
}

impl Generator {
    /// Record the decoding stack's teacher-forced pass for `seqs` on one
    /// tape. Every sequence must already satisfy the grammar mask; a masked
    /// token fails with [`ModelError::MaskViolation`].
    ///
    /// When `entropy_decay` is `Some(gamma)`, the graph also produces each
    /// sequence's decayed entropy sum `Σ_i gamma^i · H_i`, differentiable
    /// through the masked next-token distributions.
    pub fn teacher_forced_graph(
        &self,
        v: &Array1<f64>,
        seqs: &[Vec<TokenId>],
        entropy_decay: Option<f64>,
    ) -> Result<BatchGraph, ModelError> {
        let lib = &self.library;
        let lib_len = lib.tokens.len();
        let none_row = lib_len;
        let mut tape = Tape::new();
        let v_var = tape.input(
            Array2::from_shape_fn((1, LATENT_DIM), |(_, j)| v[j]),
        );
        let mut pv = ParamVars { tape: &mut tape, params: &self.params, vars: BTreeMap::new() };

        let mut log_probs = Vec::with_capacity(seqs.len());
        let mut entropies = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let n = seq.len();
            if n == 0 {
                return Err(ModelError::Malformed("empty sequence".into()));
            }

            // Grammar masks and tree states for every position, checked
            // against the actual tokens up front.
            let mut parent_idx = Vec::with_capacity(n);
            let mut sib_idx = Vec::with_capacity(n);
            let mut mask_logits = Array2::zeros((n, lib_len));
            for (i, &tok) in seq.iter().enumerate() {
                let ts = lib.tree_state(&seq[..i])?;
                parent_idx.push(ts.parent.map_or(none_row, |t| t));
                sib_idx.push(ts.sibling.map_or(none_row, |t| t));
                let mask = lib.valid_next_mask(&seq[..i])?;
                if tok >= mask.len() || !mask[tok] {
                    return Err(ModelError::MaskViolation { position: i });
                }
                for (j, &ok) in mask.iter().enumerate() {
                    if !ok {
                        mask_logits[[i, j]] = MASK_LOGIT;
                    }
                }
            }
            let posenc = positional_encoding(n, LATENT_DIM);
            let causal = causal_mask_values(n);
            let (pe_var, causal_var) = {
                let t = &mut *pv.tape;
                (t.input(posenc), t.input(causal))
            };

            // Tree-state encoder.
            let parent_emb = pv.get("st.parent_emb");
            let sib_emb = pv.get("st.sib_emb");
            let mut s = {
                let t = &mut *pv.tape;
                let pe_rows = t.gather_rows(parent_emb, &parent_idx);
                let se_rows = t.gather_rows(sib_emb, &sib_idx);
                let cat = t.concat_cols(pe_rows, se_rows);
                t.add(cat, pe_var)
            };
            for l in 0..STATE_LAYERS {
                let base = format!("st.l{l}");
                let a = causal_attention(&mut pv, &format!("{base}.attn"), s, causal_var);
                s = residual_norm(&mut pv, &format!("{base}.ln0"), s, a);
                let f = feed_forward(&mut pv, &format!("{base}.ff"), s);
                s = residual_norm(&mut pv, &format!("{base}.ln1"), s, f);
            }

            // Per-position conditioning U = [V, s_i].
            let u = {
                let t = &mut *pv.tape;
                let v_rows = t.broadcast_rows(v_var, n);
                t.concat_cols(v_rows, s)
            };

            // Decoder over shifted inputs.
            let tok_emb = pv.get("dec.tok_emb");
            let ids = decoder_inputs(seq);
            let mut x = {
                let t = &mut *pv.tape;
                let rows = t.gather_rows(tok_emb, &ids);
                t.add(rows, pe_var)
            };
            for l in 0..DECODER_LAYERS {
                let base = format!("dec.l{l}");
                let a = causal_attention(&mut pv, &format!("{base}.attn"), x, causal_var);
                x = residual_norm(&mut pv, &format!("{base}.ln0"), x, a);
                let (uw, ub) = (pv.get(&format!("{base}.u.w")), pv.get(&format!("{base}.u.b")));
                let inj = linear(&mut *pv.tape, u, uw, ub);
                x = residual_norm(&mut pv, &format!("{base}.ln1"), x, inj);
                let f = feed_forward(&mut pv, &format!("{base}.ff"), x);
                x = residual_norm(&mut pv, &format!("{base}.ln2"), x, f);
            }

            let (ow, ob) = (pv.get("dec.out.w"), pv.get("dec.out.b"));
            let t = &mut *pv.tape;
            let logits = linear(t, x, ow, ob);
            let mask_var = t.input(mask_logits);
            let masked = t.add(logits, mask_var);
            let lp = t.log_softmax_row(masked);

            let coords: Vec<(usize, usize)> = seq.iter().enumerate().map(|(i, &tk)| (i, tk)).collect();
            let chosen = t.gather_entries(lp, &coords);
            log_probs.push(t.sum_all(chosen));

            if let Some(gamma) = entropy_decay {
                // H_i = -Σ_j p_ij · lp_ij; masked entries contribute exactly
                // zero because exp(-1e9) underflows.
                let p = t.exp(lp);
                let plp = t.mul(p, lp);
                let ones = t.input(Array2::ones((lib_len, 1)));
                let neg_h = t.matmul(plp, ones);
                let decay = t.input(Array2::from_shape_fn((n, 1), |(i, _)| gamma.powi(i as i32)));
                let weighted = t.mul(neg_h, decay);
                let total = t.sum_all(weighted);
                entropies.push(t.scale(total, -1.0));
            }
        }

        let param_vars = pv.vars;
        Ok(BatchGraph { tape, log_probs, entropies, param_vars, v_var })
    }

    /// Record the dataset encoder on a tape, producing `V` as the output
    /// node. Combine with [`BatchGraph`] via `backward_seeded(v_out, dL/dV)`.
    pub fn encoder_graph(&self, dataset: &Dataset) -> Result<EncoderGraph, ModelError> {
        let feats = dataset_features(dataset);
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        let mut tape = Tape::new();
        let feat_var = tape.input(feats);
        let mut pv = ParamVars { tape: &mut tape, params: &self.params, vars: BTreeMap::new() };

        let (iw, ib) = (pv.get("enc.in.w"), pv.get("enc.in.b"));
        let mut x = linear(&mut *pv.tape, feat_var, iw, ib);
        for i in 0..ISAB_LAYERS {
            let ind = pv.get(&format!("enc.isab{i}.ind"));
            let h = mab_graph(&mut pv, &format!("enc.isab{i}.mab0"), ind, x);
            x = mab_graph(&mut pv, &format!("enc.isab{i}.mab1"), x, h);
        }
        let seed = pv.get("enc.pma.seed");
        let v_out = mab_graph(&mut pv, "enc.pma.mab", seed, x);

        let param_vars = pv.vars;
        Ok(EncoderGraph { tape, v_out, param_vars })
    }
}

/// Set-attention block on the tape; mirrors `forward::mab` op for op.
fn mab_graph(pv: &mut ParamVars, prefix: &str, q: Var, k: Var) -> Var {
    let (wq, bq) = (pv.get(&format!("{prefix}.q.w")), pv.get(&format!("{prefix}.q.b")));
    let (wk, bk) = (pv.get(&format!("{prefix}.k.w")), pv.get(&format!("{prefix}.k.b")));
    let (wv, bv) = (pv.get(&format!("{prefix}.v.w")), pv.get(&format!("{prefix}.v.b")));
    let (wo, bo) = (pv.get(&format!("{prefix}.o.w")), pv.get(&format!("{prefix}.o.b")));
    let ln0g = pv.get(&format!("{prefix}.ln0.g"));
    let ln0b = pv.get(&format!("{prefix}.ln0.b"));
    let ln1g = pv.get(&format!("{prefix}.ln1.g"));
    let ln1b = pv.get(&format!("{prefix}.ln1.b"));
    let t = &mut *pv.tape;
    let qp = linear(t, q, wq, bq);
    let kp = linear(t, k, wk, bk);
    let vp = linear(t, k, wv, bv);
    let kt = t.transpose(kp);
    let scores = t.matmul(qp, kt);
    let scaled = t.scale(scores, 1.0 / (LATENT_DIM as f64).sqrt());
    let attn = t.softmax_row(scaled);
    let ctx = t.matmul(attn, vp);
    let sum = t.add(qp, ctx);
    let o = ln_affine(t, sum, ln0g, ln0b);
    let ff_pre = linear(t, o, wo, bo);
    let ff = t.relu(ff_pre);
    let sum2 = t.add(o, ff);
    ln_affine(t, sum2, ln1g, ln1b)
}

const _: () = {
    // STATE_EMB_DIM is fixed by the parent/sibling concatenation reaching
    // exactly the model width.
    assert!(2 * STATE_EMB_DIM == LATENT_DIM);
};
