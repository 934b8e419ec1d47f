use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::vocab::{EOS_ID, PAD_ID, SOS_ID};
use super::{DialogueExample, Sentence, Vocabulary};

/// Truncation limits: tokens per sentence, context turns, knowledge sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub k_max: usize,
    pub l_c_max: usize,
    pub l_p_max: usize,
}

impl Caps {
    pub const CONVAI2: Caps = Caps {
        k_max: 30,
        l_c_max: 10,
        l_p_max: 5,
    };
    pub const CMUDOG: Caps = Caps {
        k_max: 30,
        l_c_max: 20,
        l_p_max: 20,
    };
}

impl Default for Caps {
    fn default() -> Self {
        Caps::CONVAI2
    }
}

/// Unpadded ids for one example after truncation. `response` is framed as
/// `[sos, y_1 .. y_n, eos]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub persona_a: Vec<Vec<usize>>,
    pub persona_b: Vec<Vec<usize>>,
    pub context: Vec<Vec<usize>>,
    pub response: Vec<usize>,
}

fn clip(vocab: &Vocabulary, s: &Sentence, k_max: usize) -> Vec<usize> {
    vocab.encode(&s[..s.len().min(k_max)])
}

impl EncodedExample {
    pub fn encode(ex: &DialogueExample, vocab: &Vocabulary, caps: Caps) -> Self {
        let k = caps.k_max.max(1);
        let sentences = |list: &[Sentence]| -> Vec<Vec<usize>> {
            list.iter()
                .filter(|s| !s.is_empty())
                .map(|s| clip(vocab, s, k))
                .collect()
        };
        let mut persona_a = sentences(&ex.persona_a);
        persona_a.truncate(caps.l_p_max.max(1));
        let mut persona_b = sentences(&ex.persona_b);
        persona_b.truncate(caps.l_p_max.max(1));
        let context = sentences(&ex.context);
        let skip = context.len().saturating_sub(caps.l_c_max.max(1));
        let context = context[skip..].to_vec();
        let mut response = Vec::with_capacity(k + 2);
        response.push(SOS_ID);
        response.extend(clip(vocab, &ex.response, k));
        response.push(EOS_ID);
        Self {
            persona_a,
            persona_b,
            context,
            response,
        }
    }

    /// Tokens fed to the decoder (start token included, end excluded).
    pub fn decoder_inputs(&self) -> &[usize] {
        &self.response[..self.response.len() - 1]
    }

    /// Prediction targets (end token included, start excluded).
    pub fn targets(&self) -> &[usize] {
        &self.response[1..]
    }

    /// Gold response without framing tokens.
    pub fn gold(&self) -> &[usize] {
        &self.response[1..self.response.len() - 1]
    }
}

/// Padded `[batch, sentences, tokens]` block.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceBlock {
    pub ids: Array3<usize>,
    pub mask: Array3<u8>,
    /// Tokens per sentence.
    pub lengths: Array2<usize>,
    /// Sentences per example.
    pub counts: Array1<usize>,
}

impl SentenceBlock {
    fn new(rows: &[&[Vec<usize>]], slots: usize, k: usize) -> Self {
        let b = rows.len();
        let mut ids = Array3::from_elem((b, slots, k), PAD_ID);
        let mut mask = Array3::zeros((b, slots, k));
        let mut lengths = Array2::zeros((b, slots));
        let mut counts = Array1::zeros(b);
        for (i, sents) in rows.iter().enumerate() {
            counts[i] = sents.len();
            for (j, sent) in sents.iter().enumerate() {
                lengths[[i, j]] = sent.len();
                for (t, &id) in sent.iter().enumerate() {
                    ids[[i, j, t]] = id;
                    mask[[i, j, t]] = 1;
                }
            }
        }
        Self {
            ids,
            mask,
            lengths,
            counts,
        }
    }

    fn row(&self, i: usize) -> Vec<Vec<usize>> {
        (0..self.counts[i])
            .map(|j| {
                let n = self.lengths[[i, j]];
                self.ids.slice(s![i, j, ..n]).to_vec()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub persona_a: SentenceBlock,
    pub persona_b: SentenceBlock,
    pub context: SentenceBlock,
    /// `[batch, k_max + 2]`, framed with start and end tokens.
    pub response_ids: Array2<usize>,
    pub response_mask: Array2<u8>,
    pub response_lengths: Array1<usize>,
    pub caps: Caps,
    pub vocab_fingerprint: u64,
}

pub fn encode_batch(examples: &[DialogueExample], vocab: &Vocabulary, caps: Caps) -> Batch {
    let encoded: Vec<EncodedExample> = examples
        .iter()
        .map(|e| EncodedExample::encode(e, vocab, caps))
        .collect();
    Batch::from_encoded(&encoded, caps, vocab.fingerprint())
}

impl Batch {
    pub fn from_encoded(encoded: &[EncodedExample], caps: Caps, vocab_fingerprint: u64) -> Self {
        let k = caps.k_max.max(1);
        let pa: Vec<&[Vec<usize>]> = encoded.iter().map(|e| e.persona_a.as_slice()).collect();
        let pb: Vec<&[Vec<usize>]> = encoded.iter().map(|e| e.persona_b.as_slice()).collect();
        let cx: Vec<&[Vec<usize>]> = encoded.iter().map(|e| e.context.as_slice()).collect();
        let width = k + 2;
        let mut response_ids = Array2::from_elem((encoded.len(), width), PAD_ID);
        let mut response_mask = Array2::zeros((encoded.len(), width));
        let mut response_lengths = Array1::zeros(encoded.len());
        for (i, e) in encoded.iter().enumerate() {
            response_lengths[i] = e.response.len();
            for (t, &id) in e.response.iter().enumerate() {
                response_ids[[i, t]] = id;
                response_mask[[i, t]] = 1;
            }
        }
        Self {
            persona_a: SentenceBlock::new(&pa, caps.l_p_max.max(1), k),
            persona_b: SentenceBlock::new(&pb, caps.l_p_max.max(1), k),
            context: SentenceBlock::new(&cx, caps.l_c_max.max(1), k),
            response_ids,
            response_mask,
            response_lengths,
            caps,
            vocab_fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.response_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, i: usize) -> EncodedExample {
        let n = self.response_lengths[i];
        EncodedExample {
            persona_a: self.persona_a.row(i),
            persona_b: self.persona_b.row(i),
            context: self.context.row(i),
            response: self.response_ids.slice(s![i, ..n]).to_vec(),
        }
    }

    pub fn examples(&self) -> Vec<EncodedExample> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }
}
