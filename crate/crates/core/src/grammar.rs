//! Token libraries and generation constraints.
//!
//! A [`LibrarySpec`] fixes the ordered token set an equation may be built
//! from. During autoregressive generation the partial prefix sequence is a
//! tree under construction; [`LibrarySpec::valid_next_mask`] hides every
//! token that would make the sequence unparseable, break the length bounds,
//! or introduce a degenerate construct:
//!
//! * terminals are hidden while the expression would finish below the
//!   minimum length, and any token whose *minimal* completion would overflow
//!   the maximum length is hidden (a conservative bound: each open slot needs
//!   at least one further token);
//! * a unary operator never takes its inverse as direct child
//!   (`log(exp(·))`, `exp(log(·))`);
//! * trigonometric tokens never appear anywhere under a trigonometric
//!   ancestor;
//! * a binary operator's last child cannot be a constant or literal when
//!   every other child is constant-valued (the node would fold away);
//! * constant placeholders stop once `max_const_slots` are in use.
//!
//! Masked sampling therefore always yields a complete, well-formed
//! expression; the mask is never all-false for any reachable state.

use crate::expr::{completion_state, Completion, Token};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GrammarError {
    #[error("sequence is already a complete expression")]
    AlreadyComplete,
    #[error("token id {id} out of range for library of {len} tokens")]
    TokenOutOfRange { id: usize, len: usize },
}

/// Index of a token within a [`LibrarySpec`].
pub type TokenId = usize;

/// An ordered token set plus generation bounds.
///
/// Variables always come last so that a model trained on `d` variables can be
/// extended to `d' > d` by appending embedding rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub name: String,
    pub tokens: Vec<Token>,
    /// Number of input variables `x1..xd`.
    pub d: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_const_slots: usize,
}

/// Parent and sibling of the next position in a partial sequence, as library
/// token ids. The sibling is the root token of the parent's most recently
/// completed child subtree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeState {
    pub parent: Option<TokenId>,
    pub sibling: Option<TokenId>,
}

/// One open operator on the construction stack.
struct Frame {
    token: TokenId,
    arity: usize,
    filled: usize,
    /// Root token of the first completed child, for sibling lookup.
    first_child_root: Option<TokenId>,
    /// True while every completed child subtree is constant-valued.
    filled_children_const: bool,
}

impl LibrarySpec {
    pub fn new(name: impl Into<String>, tokens: Vec<Token>, d: usize) -> Self {
        let spec = LibrarySpec {
            name: name.into(),
            tokens,
            d,
            min_len: 4,
            max_len: 30,
            max_const_slots: 3,
        };
        spec.validate();
        spec
    }

    fn validate(&self) {
        assert!(self.d >= 1, "library needs at least one variable");
        assert!(
            self.tokens.iter().any(|t| matches!(t, Token::Var(_))),
            "library needs at least one variable terminal"
        );
        assert!(
            self.tokens.iter().any(|t| !t.is_terminal()),
            "library needs at least one operator"
        );
        assert!(self.min_len <= self.max_len);
        for t in &self.tokens {
            if let Token::Var(i) = t {
                assert!((*i as usize) <= self.d, "variable token beyond d");
            }
        }
    }

    /// Standard library: `{+, -, *, /, exp, log, sin, cos, x1..xd}`.
    pub fn koza(d: usize) -> Self {
        let mut tokens = vec![
            Token::Add,
            Token::Sub,
            Token::Mul,
            Token::Div,
            Token::Exp,
            Token::Log,
            Token::Sin,
            Token::Cos,
        ];
        tokens.extend((1..=d).map(|i| Token::Var(i as u8)));
        LibrarySpec::new(format!("koza-d{d}"), tokens, d)
    }

    /// [`LibrarySpec::koza`] plus a fittable constant placeholder.
    pub fn koza_with_const(d: usize) -> Self {
        let mut tokens = vec![
            Token::Add,
            Token::Sub,
            Token::Mul,
            Token::Div,
            Token::Exp,
            Token::Log,
            Token::Sin,
            Token::Cos,
            Token::Const,
        ];
        tokens.extend((1..=d).map(|i| Token::Var(i as u8)));
        LibrarySpec::new(format!("koza-const-d{d}"), tokens, d)
    }

    /// Arithmetic-only library over twelve variables, for the high-dimensional
    /// synthetic problems. Longer sequences are allowed.
    pub fn synth() -> Self {
        let mut tokens = vec![Token::Add, Token::Sub, Token::Mul, Token::Div];
        tokens.extend((1..=12).map(|i| Token::Var(i as u8)));
        let mut spec = LibrarySpec::new("synth-d12".to_string(), tokens, 12);
        spec.max_len = 256;
        spec
    }

    /// Looks a library up by its name, e.g. `koza-d2` or `koza-const-d1`.
    pub fn by_name(name: &str) -> Option<Self> {
        if name == "synth-d12" {
            return Some(Self::synth());
        }
        if let Some(d) = name.strip_prefix("koza-const-d").and_then(|s| s.parse().ok()) {
            return Some(Self::koza_with_const(d));
        }
        if let Some(d) = name.strip_prefix("koza-d").and_then(|s| s.parse().ok()) {
            return Some(Self::koza(d));
        }
        None
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_id(&self, token: Token) -> Option<TokenId> {
        self.tokens.iter().position(|t| *t == token)
    }

    pub fn has_const(&self) -> bool {
        self.tokens.contains(&Token::Const)
    }

    /// Maps library token ids back to tokens.
    pub fn ids_to_tokens(&self, ids: &[TokenId]) -> Result<Vec<Token>, GrammarError> {
        ids.iter()
            .map(|&id| {
                self.tokens
                    .get(id)
                    .copied()
                    .ok_or(GrammarError::TokenOutOfRange {
                        id,
                        len: self.tokens.len(),
                    })
            })
            .collect()
    }

    /// Maps tokens to ids; `None` if any token is not in the library.
    pub fn tokens_to_ids(&self, tokens: &[Token]) -> Option<Vec<TokenId>> {
        tokens.iter().map(|t| self.token_id(*t)).collect()
    }

    /// Stable digest of the library definition, embedded in checkpoints.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0u8]);
        for t in &self.tokens {
            h.update(t.name().as_bytes());
            h.update([0u8]);
        }
        h.update(self.d.to_le_bytes());
        h.update(self.min_len.to_le_bytes());
        h.update(self.max_len.to_le_bytes());
        h.update(self.max_const_slots.to_le_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// True when the id sequence parses as exactly one complete expression.
    pub fn is_complete(&self, partial: &[TokenId]) -> bool {
        match self.ids_to_tokens(partial) {
            Ok(tokens) => completion_state(&tokens) == Completion::Complete,
            Err(_) => false,
        }
    }

    fn frames(&self, partial: &[TokenId]) -> Result<Vec<Frame>, GrammarError> {
        let mut stack: Vec<Frame> = Vec::new();
        for (pos, &id) in partial.iter().enumerate() {
            let token = *self
                .tokens
                .get(id)
                .ok_or(GrammarError::TokenOutOfRange {
                    id,
                    len: self.tokens.len(),
                })?;
            if pos > 0 && stack.is_empty() {
                return Err(GrammarError::AlreadyComplete);
            }
            let arity = token.arity();
            if arity > 0 {
                stack.push(Frame {
                    token: id,
                    arity,
                    filled: 0,
                    first_child_root: None,
                    filled_children_const: true,
                });
            } else {
                // A terminal completes a subtree; unwind any frames it fills.
                let mut root = id;
                let mut is_const = token.is_constant_like();
                loop {
                    match stack.last_mut() {
                        None => break,
                        Some(frame) => {
                            frame.filled += 1;
                            if frame.filled == 1 {
                                frame.first_child_root = Some(root);
                            }
                            frame.filled_children_const &= is_const;
                            if frame.filled == frame.arity {
                                let done = stack.pop().expect("frame exists");
                                root = done.token;
                                is_const = done.filled_children_const;
                            } else {
                                break;
                            }
                        }
                    }
                }
                if stack.is_empty() && pos + 1 < partial.len() {
                    return Err(GrammarError::AlreadyComplete);
                }
            }
        }
        if !partial.is_empty() && stack.is_empty() {
            return Err(GrammarError::AlreadyComplete);
        }
        Ok(stack)
    }

    /// Parent and sibling of the next position.
    pub fn tree_state(&self, partial: &[TokenId]) -> Result<TreeState, GrammarError> {
        let stack = self.frames(partial)?;
        Ok(match stack.last() {
            None => TreeState {
                parent: None,
                sibling: None,
            },
            Some(f) => TreeState {
                parent: Some(f.token),
                sibling: if f.filled > 0 { f.first_child_root } else { None },
            },
        })
    }

    /// Boolean mask over the library: `true` = the token may be placed next.
    pub fn valid_next_mask(&self, partial: &[TokenId]) -> Result<Vec<bool>, GrammarError> {
        let stack = self.frames(partial)?;
        let len = partial.len();
        // Open slots still to fill. Each frame below the root occupies one
        // slot of its parent, so those are subtracted out.
        let open: usize = if stack.is_empty() {
            1 // the root position
        } else {
            stack.iter().map(|f| f.arity - f.filled).sum::<usize>() - (stack.len() - 1)
        };
        let const_used = partial
            .iter()
            .filter(|&&id| matches!(self.tokens.get(id), Some(Token::Const)))
            .count();
        let parent = stack.last();
        let trig_ancestor = stack
            .iter()
            .any(|f| self.tokens[f.token].is_trig());

        let mask = self
            .tokens
            .iter()
            .map(|&cand| {
                let arity = cand.arity();
                // (b) minimal completion must fit within max_len: the token
                // itself plus one terminal for every remaining open slot.
                if len + 1 + (open - 1 + arity) > self.max_len {
                    return false;
                }
                // (a) a terminal in the last open slot may not finish the
                // expression below min_len.
                if arity == 0 && open == 1 && len + 1 < self.min_len {
                    return false;
                }
                // (c) no unary operator takes its inverse as direct child.
                if let Some(f) = parent {
                    if self.tokens[f.token].unary_inverse() == Some(cand) {
                        return false;
                    }
                }
                // (d) no trigonometric token under a trigonometric ancestor.
                if cand.is_trig() && trig_ancestor {
                    return false;
                }
                // (e) a binary operator's last child cannot make the node
                // constant-valued.
                if cand.is_constant_like() {
                    if let Some(f) = parent {
                        if f.arity >= 2
                            && f.filled == f.arity - 1
                            && f.filled_children_const
                        {
                            return false;
                        }
                    }
                }
                // (f) bounded number of constant placeholders.
                if cand == Token::Const && const_used >= self.max_const_slots {
                    return false;
                }
                true
            })
            .collect::<Vec<_>>();
        debug_assert!(
            mask.iter().any(|&m| m),
            "empty mask at partial {partial:?}"
        );
        Ok(mask)
    }

    /// Checks a complete sequence against every constraint: each token must
    /// be unmasked given its prefix, and the whole must parse.
    pub fn sequence_is_valid(&self, seq: &[TokenId]) -> bool {
        if !self.is_complete(seq) {
            return false;
        }
        for i in 0..seq.len() {
            match self.valid_next_mask(&seq[..i]) {
                Ok(mask) => {
                    if !mask.get(seq[i]).copied().unwrap_or(false) {
                        return false;
                    }
                }
                Err(_) => return false,
            }
        }
        true
    }

    /// Samples a complete sequence, drawing uniformly from the unmasked
    /// tokens at each step. Used for mask tests and random GP seeds.
    pub fn sample_sequence_uniform(&self, rng: &mut impl rand::Rng) -> Vec<TokenId> {
        let mut seq: Vec<TokenId> = Vec::new();
        while !self.is_complete(&seq) {
            let mask = self.valid_next_mask(&seq).expect("incomplete sequence");
            let allowed: Vec<TokenId> = mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect();
            seq.push(allowed[rng.random_range(0..allowed.len())]);
        }
        seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ExprTree;

    fn ids(lib: &LibrarySpec, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|name| {
                let tok = Token::from_name(name).expect("token");
                lib.token_id(tok).expect("token in library")
            })
            .collect()
    }

    #[test]
    fn masks_trig_under_trig_ancestor() {
        let lib = LibrarySpec::koza(2);
        let mask = lib.valid_next_mask(&ids(&lib, "sin")).unwrap();
        assert!(!mask[lib.token_id(Token::Sin).unwrap()]);
        assert!(!mask[lib.token_id(Token::Cos).unwrap()]);
        assert!(mask[lib.token_id(Token::Add).unwrap()]);
        // Deeper nesting still counts: sin(x1 + ...) forbids cos.
        let mask = lib.valid_next_mask(&ids(&lib, "sin add x1")).unwrap();
        assert!(!mask[lib.token_id(Token::Cos).unwrap()]);
    }

    #[test]
    fn masks_unary_inverse_as_direct_child() {
        let lib = LibrarySpec::koza(2);
        let mask = lib.valid_next_mask(&ids(&lib, "exp")).unwrap();
        assert!(!mask[lib.token_id(Token::Log).unwrap()]);
        assert!(mask[lib.token_id(Token::Exp).unwrap()]);
        let mask = lib.valid_next_mask(&ids(&lib, "log")).unwrap();
        assert!(!mask[lib.token_id(Token::Exp).unwrap()]);
        // Not direct child: exp(x1 + log(..)) is allowed.
        let mask = lib.valid_next_mask(&ids(&lib, "exp add x1")).unwrap();
        assert!(mask[lib.token_id(Token::Log).unwrap()]);
    }

    #[test]
    fn masks_constant_completing_a_constant_node() {
        let lib = LibrarySpec::koza_with_const(2);
        let mask = lib.valid_next_mask(&ids(&lib, "mul const")).unwrap();
        assert!(!mask[lib.token_id(Token::Const).unwrap()]);
        // (Here every terminal is also below min_len; operators remain.)
        assert!(mask[lib.token_id(Token::Sin).unwrap()]);
        // With min_len satisfied, only the constant stays masked.
        let mask = lib.valid_next_mask(&ids(&lib, "add x1 mul const")).unwrap();
        assert!(!mask[lib.token_id(Token::Const).unwrap()]);
        assert!(mask[lib.token_id(Token::Var(1)).unwrap()]);
        // A variable first child lifts the restriction.
        let mask = lib.valid_next_mask(&ids(&lib, "add x1 mul x2")).unwrap();
        assert!(mask[lib.token_id(Token::Const).unwrap()]);
        // A constant-valued first-child subtree also triggers the rule.
        let mask = lib
            .valid_next_mask(&ids(&lib, "add x1 mul sin const"))
            .unwrap();
        assert!(!mask[lib.token_id(Token::Const).unwrap()]);
        assert!(mask[lib.token_id(Token::Var(1)).unwrap()]);
    }

    #[test]
    fn masks_const_once_slots_exhausted() {
        let lib = LibrarySpec::koza_with_const(1);
        let partial = ids(&lib, "add const add const add const");
        let mask = lib.valid_next_mask(&partial).unwrap();
        assert!(!mask[lib.token_id(Token::Const).unwrap()]);
        assert!(mask[lib.token_id(Token::Var(1)).unwrap()]);
    }

    #[test]
    fn masks_terminals_below_min_len() {
        let lib = LibrarySpec::koza(2);
        // Root position: a bare variable would make a length-1 expression.
        let mask = lib.valid_next_mask(&[]).unwrap();
        assert!(!mask[lib.token_id(Token::Var(1)).unwrap()]);
        assert!(mask[lib.token_id(Token::Add).unwrap()]);
        // After `add x1` the last slot may not close at length 3.
        let mask = lib.valid_next_mask(&ids(&lib, "add x1")).unwrap();
        assert!(!mask[lib.token_id(Token::Var(2)).unwrap()]);
        assert!(mask[lib.token_id(Token::Sin).unwrap()]);
    }

    #[test]
    fn masks_operators_near_max_len() {
        let mut lib = LibrarySpec::koza(1);
        lib.max_len = 5;
        // `add add x1 x1` has one open slot at length 4: only terminals fit.
        let partial = ids(&lib, "add add x1 x1");
        let mask = lib.valid_next_mask(&partial).unwrap();
        assert!(mask[lib.token_id(Token::Var(1)).unwrap()]);
        assert!(!mask[lib.token_id(Token::Add).unwrap()]);
        assert!(!mask[lib.token_id(Token::Sin).unwrap()]);
    }

    #[test]
    fn tree_state_reports_parent_and_sibling() {
        let lib = LibrarySpec::koza(2);
        let st = lib.tree_state(&[]).unwrap();
        assert_eq!(st, TreeState { parent: None, sibling: None });

        let st = lib.tree_state(&ids(&lib, "add")).unwrap();
        assert_eq!(st.parent, lib.token_id(Token::Add));
        assert_eq!(st.sibling, None);

        // After `add sin x1`, the next position is add's second child; the
        // sibling is the completed subtree's root token `sin`.
        let st = lib.tree_state(&ids(&lib, "add sin x1")).unwrap();
        assert_eq!(st.parent, lib.token_id(Token::Add));
        assert_eq!(st.sibling, lib.token_id(Token::Sin));

        // Inside the sin subtree the parent is sin.
        let st = lib.tree_state(&ids(&lib, "add sin")).unwrap();
        assert_eq!(st.parent, lib.token_id(Token::Sin));
        assert_eq!(st.sibling, None);
    }

    #[test]
    fn complete_sequences_are_terminal_states() {
        let lib = LibrarySpec::koza(2);
        let seq = ids(&lib, "add x1 mul x2 x1");
        assert!(lib.is_complete(&seq));
        assert_eq!(lib.valid_next_mask(&seq), Err(GrammarError::AlreadyComplete));
        assert_eq!(lib.tree_state(&seq), Err(GrammarError::AlreadyComplete));
        assert!(!lib.is_complete(&seq[..3]));
    }

    #[test]
    fn masked_sampling_always_satisfies_all_constraints() {
        let libs = [
            LibrarySpec::koza(2),
            LibrarySpec::koza_with_const(2),
            LibrarySpec::koza(5),
        ];
        let mut rng = crate::rng_stream(23, 0);
        for lib in &libs {
            for _ in 0..2000 {
                let seq = lib.sample_sequence_uniform(&mut rng);
                assert!(seq.len() >= lib.min_len && seq.len() <= lib.max_len);
                assert!(lib.sequence_is_valid(&seq));
                let tokens = lib.ids_to_tokens(&seq).unwrap();
                ExprTree::parse_prefix(&tokens).expect("parseable");
            }
        }
    }

    /// Every unmasked token leads to a state from which the expression can
    /// still be completed within bounds: exhaustive search over all reachable
    /// prefixes of a small library.
    #[test]
    fn mask_soundness_exhaustive_small_library() {
        let mut lib = LibrarySpec::koza(1);
        lib.max_len = 8;
        fn completable(lib: &LibrarySpec, partial: &mut Vec<TokenId>) -> bool {
            if lib.is_complete(partial) {
                return partial.len() >= lib.min_len && partial.len() <= lib.max_len;
            }
            if partial.len() >= lib.max_len {
                return false;
            }
            let mask = lib.valid_next_mask(partial).unwrap();
            for (id, &ok) in mask.iter().enumerate() {
                if ok {
                    partial.push(id);
                    let good = completable(lib, partial);
                    partial.pop();
                    if good {
                        return true;
                    }
                }
            }
            false
        }
        // Walk all reachable prefixes up to depth 6 and demand completability
        // after every allowed token.
        fn walk(lib: &LibrarySpec, partial: &mut Vec<TokenId>, depth: usize) {
            if depth == 0 || lib.is_complete(partial) {
                return;
            }
            let mask = lib.valid_next_mask(partial).unwrap();
            assert!(mask.iter().any(|&m| m), "empty mask at {partial:?}");
            for (id, &ok) in mask.iter().enumerate() {
                if ok {
                    partial.push(id);
                    assert!(
                        lib.is_complete(partial) || completable(lib, partial),
                        "dead end after {partial:?}"
                    );
                    walk(lib, partial, depth - 1);
                    partial.pop();
                }
            }
        }
        walk(&lib, &mut Vec::new(), 6);
    }

    #[test]
    fn library_lookup_by_name() {
        assert_eq!(LibrarySpec::by_name("koza-d2").unwrap(), LibrarySpec::koza(2));
        assert_eq!(
            LibrarySpec::by_name("koza-const-d1").unwrap(),
            LibrarySpec::koza_with_const(1)
        );
        assert_eq!(LibrarySpec::by_name("synth-d12").unwrap(), LibrarySpec::synth());
        assert!(LibrarySpec::by_name("nope").is_none());
    }

    #[test]
    fn fingerprint_distinguishes_libraries() {
        let a = LibrarySpec::koza(2).fingerprint();
        let b = LibrarySpec::koza(3).fingerprint();
        let c = LibrarySpec::koza_with_const(2).fingerprint();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, LibrarySpec::koza(2).fingerprint());
    }
}
