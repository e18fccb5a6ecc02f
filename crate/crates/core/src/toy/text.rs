//! Hashed-vocabulary text encoder producing a fixed-length token embedding.
//!
//! A token sequence is embedded as `table[token] + table[position]`; the null
//! (unconditional) sequence has its own learned row per position. All three
//! lookups are rows of a single matrix applied to one-hot codes.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::nn::{normal_tensor, Bound, ParamId, ParamStore};
use crate::scalar::Real;
use crate::seed::stable_hash;
use crate::tensor::Tensor;
use crate::toy::ToyConfig;

/// Bucket reserved for padding positions.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextConfig {
    pub vocab_buckets: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { vocab_buckets: 256, tokens: 12, dim: 32 }
    }
}

/// Bucketed token ids of a prompt, padded to the configured length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    /// `None` for the null sequence.
    pub ids: Option<Vec<usize>>,
    pub truncated: bool,
}

/// `e_T`: a (tokens, dim) embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<F> {
    pub values: Tensor<F>,
    pub requires_gradient: bool,
    /// Set when the prompt had more words than the token budget.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<F> {
    pub params: ParamStore<F>,
    table: ParamId,
    cfg: TextConfig,
}

/// Words with reserved buckets: the scene caption and shipped prompt vocabulary.
/// Other words hash into the remaining buckets.
const KNOWN_WORDS: [&str; 40] = [
    "a", "picture", "of", "on", "background", "this", "is", "photo", "in", "the",
    "circle", "square", "triangle", "diamond", "cross", "ring", "star", "crescent",
    "plain", "vivid", "red", "green", "blue", "yellow", "purple", "orange", "gray",
    "striped", "checkered", "textured", "colorful", "textures", "intricately", "distorted",
    "object", "image", "shape", "white", "black", "noisy",
];

fn words(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl<F: Real> TextEncoder<F> {
    pub fn new(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let t = cfg.text;
        let mut params = ParamStore::new();
        let cols = t.vocab_buckets + 2 * t.tokens;
        let table = params.add("text.table", normal_tensor(rng, &[t.dim, cols], 0.5));
        Self { params, table, cfg: t }
    }

    pub fn config(&self) -> TextConfig {
        self.cfg
    }

    fn bucket(&self, word: &str) -> usize {
        let v = self.cfg.vocab_buckets;
        let known = KNOWN_WORDS.len().min(v.saturating_sub(2));
        if let Some(i) = KNOWN_WORDS[..known].iter().position(|k| *k == word) {
            return 1 + i;
        }
        1 + known + (stable_hash(&[word.as_bytes()]) % (v - 1 - known) as u64) as usize
    }

    pub fn tokenize(&self, prompt: &str) -> Tokens {
        let all: Vec<usize> = words(prompt).map(|w| self.bucket(&w)).collect();
        if all.is_empty() {
            return Tokens { ids: None, truncated: false };
        }
        let truncated = all.len() > self.cfg.tokens;
        let mut ids: Vec<usize> = all.into_iter().take(self.cfg.tokens).collect();
        ids.resize(self.cfg.tokens, PAD);
        Tokens { ids: Some(ids), truncated }
    }

    /// One-hot codes for a batch, shape (N, tokens, columns).
    pub fn codes(&self, batch: &[&Tokens]) -> Tensor<F> {
        let (v, l) = (self.cfg.vocab_buckets, self.cfg.tokens);
        let cols = v + 2 * l;
        let mut data = alloc::vec![F::zero(); batch.len() * l * cols];
        for (b, tok) in batch.iter().enumerate() {
            for pos in 0..l {
                let row = &mut data[(b * l + pos) * cols..(b * l + pos + 1) * cols];
                match &tok.ids {
                    Some(ids) => {
                        row[ids[pos]] = F::one();
                        row[v + pos] = F::one();
                    }
                    None => row[v + l + pos] = F::one(),
                }
            }
        }
        Tensor::from_vec(&[batch.len(), l, cols], data).expect("dims")
    }

    /// Embeds one-hot codes to (N, tokens, dim).
    pub fn embed_var(&self, tape: &mut Tape<F>, p: &Bound, codes: Var) -> Var {
        tape.linear(codes, p.var(self.table))
    }

    fn embed_tokens(&self, tokens: &Tokens) -> Tensor<F> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let codes = tape.constant(self.codes(&[tokens]));
        let e = self.embed_var(&mut tape, &p, codes);
        tape.value(e).clone().reshape(&[self.cfg.tokens, self.cfg.dim]).expect("dims")
    }

    /// The unconditional token sequence.
    pub fn null_embedding(&self) -> Tensor<F> {
        self.embed_tokens(&Tokens { ids: None, truncated: false })
    }

    /// Deterministic embedding; an empty prompt gives the null embedding.
    pub fn text_encode(&self, prompt: &str) -> TextEmbedding<F> {
        let tokens = self.tokenize(prompt);
        TextEmbedding {
            values: self.embed_tokens(&tokens),
            requires_gradient: false,
            truncated: tokens.truncated,
        }
    }
}
