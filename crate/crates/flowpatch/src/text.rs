//! Prompt vocabulary and tokenization.
//!
//! The vocabulary is a small closed grammar (colors, shapes, positions,
//! scene words). Unknown words map to a reserved UNK id; empty prompts map
//! to a single learned empty token so every prompt span is non-empty.

use std::collections::HashMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMPTY_ID: usize = 0;
pub const UNK_ID: usize = 1;

const WORDS: &[&str] = &[
    "<empty>", "<unk>", // specials first, ids 0 and 1
    "red", "green", "blue", "yellow", "cyan", "magenta", // colors
    "circle", "square", "triangle", // shapes
    "left", "right", "top", "bottom", "center", // positions
    "and", "on", "a", "the", // connectives
    "background", "empty", "plain", "dark", "light", "scene", "canvas", // scene
    "small", "large", "shape", "object", "one", "two", // misc
    "gray", "white", "black", // neutrals
];

/// Closed word list with dense ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// The built-in grammar vocabulary.
    pub fn grammar() -> Self {
        Self::from_words(WORDS.iter().map(|s| s.to_string()).collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Seeded Gaussian init for the trainable embedding table.
    pub fn init_embedding(&self, d_model: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7465_7874);
        Tensor::randn(&[self.len(), d_model], 0.5, &mut rng)
    }
}

/// Lowercase, split on whitespace, strip non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '<' || *c == '>')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Inverse of [`tokenize`] on grammar sentences.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Where a prompt span sits in the dual-prompt layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptRole {
    /// Local prompt bound to edit region `k` (0-based).
    Local(usize),
    /// Background prompt (source caption).
    Background,
    /// Global target prompt.
    Global,
    /// Negative prompt for removal guidance.
    Negative,
}

/// A prompt encoded to vocabulary ids. Guaranteed non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub role: PromptRole,
    pub text: String,
    pub ids: Vec<usize>,
}

impl PromptTokens {
    pub fn encode(vocab: &Vocabulary, text: &str, role: PromptRole) -> Self {
        let mut ids: Vec<usize> = tokenize(text).iter().map(|w| vocab.id(w)).collect();
        if ids.is_empty() {
            ids.push(EMPTY_ID);
        }
        Self { role, text: text.to_string(), ids }
    }

    /// Single empty-token prompt with the same role, used by the
    /// unconditional guidance branch.
    pub fn empty(role: PromptRole) -> Self {
        Self { role, text: String::new(), ids: vec![EMPTY_ID] }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Embedding rows for these ids, looked up from a table snapshot.
    pub fn embeddings(&self, table: &Tensor) -> Result<Tensor> {
        let d = table.cols();
        let mut data = Vec::with_capacity(self.ids.len() * d);
        for &id in &self.ids {
            if id >= table.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "token id {id} outside embedding table"
                )));
            }
            data.extend_from_slice(table.row(id));
        }
        Tensor::new(vec![self.ids.len(), d], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_covers_prompt_words_without_unk() {
        let v = Vocabulary::grammar();
        for w in ["red", "circle", "left", "and", "empty", "background"] {
            assert_ne!(v.id(w), UNK_ID, "{w} must be in vocabulary");
        }
        assert!(v.len() >= 30);
    }

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("Red Circle, left!"),
            vec!["red", "circle", "left"]
        );
    }

    #[test]
    fn detokenize_inverts_tokenize_on_grammar_sentences() {
        let s = "blue square right and red triangle left";
        assert_eq!(detokenize(&tokenize(s)), s);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::grammar();
        let p = PromptTokens::encode(&v, "chartreuse dodecahedron", PromptRole::Global);
        assert_eq!(p.ids, vec![UNK_ID, UNK_ID]);
    }

    #[test]
    fn empty_prompt_becomes_single_empty_token() {
        let v = Vocabulary::grammar();
        let p = PromptTokens::encode(&v, "  ", PromptRole::Local(0));
        assert_eq!(p.ids, vec![EMPTY_ID]);
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn embedding_init_is_deterministic_per_seed() {
        let v = Vocabulary::grammar();
        let a = v.init_embedding(16, 42);
        let b = v.init_embedding(16, 42);
        let c = v.init_embedding(16, 43);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn distinct_words_are_not_collinear() {
        let v = Vocabulary::grammar();
        let t = v.init_embedding(32, 7);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                assert!(cos(t.row(i), t.row(j)) < 0.999);
            }
        }
    }
}
