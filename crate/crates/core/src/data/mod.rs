//! Corpus loading, vocabulary and batching.

pub mod batch;
pub mod cmudog;
pub mod convai2;
pub mod embeddings;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{encode_batch, Batch, Caps, EncodedExample};
pub use cmudog::{cmudog_stats, load_cmudog, CmudogStats};
pub use convai2::{convai2_stats, load_convai2, Convai2Stats, PersonaMode};
pub use embeddings::load_pretrained_embeddings;
pub use vocab::{build_vocab, Vocabulary};

pub type Sentence = Vec<String>;

/// One training instance: both speakers' knowledge, the context turns (the
/// last one being the current query) and the gold response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub persona_a: Vec<Sentence>,
    pub persona_b: Vec<Sentence>,
    pub context: Vec<Sentence>,
    pub response: Sentence,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::contract("example has no context turns"));
        }
        if self.response.is_empty() {
            return Err(Error::contract("example has an empty response"));
        }
        let all = self
            .persona_a
            .iter()
            .chain(&self.persona_b)
            .chain(&self.context);
        if all.into_iter().any(|s| s.is_empty()) {
            return Err(Error::contract("example contains an empty sentence"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.persona_a
            .iter()
            .chain(&self.persona_b)
            .chain(&self.context)
            .chain(std::iter::once(&self.response))
            .flatten()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '_'
}

/// Lowercases and splits on whitespace; every other non-word character
/// becomes its own token.
pub fn tokenize(text: &str) -> Sentence {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_word_char(c) {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Rough sentence splitter used for grounding documents.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?' | '\n') {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}
