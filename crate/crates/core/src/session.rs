//! Live chat sessions. The knowledge state advances one interaction step per
//! turn (user and bot alike); each reply conditions on the most recent
//! `l_c_max` turn summaries.

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Caps, Vocabulary};
use crate::error::{Error, Result};
use crate::interaction::{KnowledgeState, TurnSummary};
use crate::model::{DecodeConfig, Model};
use crate::decoder::Conditioning;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub reply: String,
    /// Coverage after the exchange, one value per persona-A sentence.
    pub coverage: Vec<f64>,
    /// Coverage-aware attention over persona-A sentences for the user turn.
    pub attention: Vec<f64>,
    pub semantic_attention: Vec<f64>,
    /// Interaction steps run so far; equals the coverage total.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub persona_a: Vec<String>,
    pub persona_b: Vec<String>,
    pub decode: DecodeConfig,
    pub transcript: Vec<TranscriptEntry>,
    pub coverage: Vec<f64>,
    pub attention: Vec<f64>,
    pub steps: usize,
    pub knowledge: KnowledgeState,
}

#[derive(Clone, Debug)]
pub struct ChatSession {
    persona_a: Vec<String>,
    persona_b: Vec<String>,
    decode: DecodeConfig,
    caps: Caps,
    style: Option<Vec<f64>>,
    state: KnowledgeState,
    summaries: Vec<TurnSummary>,
    transcript: Vec<TranscriptEntry>,
    attention: Vec<f64>,
    steps: usize,
}

fn encode_text(model: &Model, vocab: &Vocabulary, text: &str, caps: Caps) -> Result<Option<Vec<f64>>> {
    let mut tokens = tokenize(text);
    tokens.truncate(caps.k_max.max(1));
    if tokens.is_empty() {
        return Ok(None);
    }
    model.encode_sentence(&vocab.encode(&tokens)).map(Some)
}

fn encode_persona(model: &Model, vocab: &Vocabulary, sentences: &[String], caps: Caps) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        if let Some(v) = encode_text(model, vocab, s, caps)? {
            out.push(v);
        }
    }
    Ok(out)
}

impl ChatSession {
    pub fn new(
        model: &Model,
        vocab: &Vocabulary,
        persona_a: Vec<String>,
        persona_b: Vec<String>,
        decode: DecodeConfig,
        caps: Caps,
    ) -> Result<Self> {
        if decode.beam_size == 0 || decode.max_len == 0 {
            return Err(Error::contract("beam_size and max_len must be positive"));
        }
        for (who, p) in [("persona_a", &persona_a), ("persona_b", &persona_b)] {
            if p.len() > caps.l_p_max {
                return Err(Error::contract(format!(
                    "{who} has {} sentences, at most {} allowed",
                    p.len(),
                    caps.l_p_max
                )));
            }
        }
        let a = encode_persona(model, vocab, &persona_a, caps)?;
        if a.is_empty() {
            return Err(Error::contract("persona_a needs at least one non-empty sentence"));
        }
        let b = encode_persona(model, vocab, &persona_b, caps)?;
        let style = model.style_vector(&a, &b)?;
        let state = model.initial_knowledge(&a)?;
        Ok(Self {
            attention: vec![0.0; a.len()],
            persona_a,
            persona_b,
            decode,
            caps,
            style,
            state,
            summaries: Vec::new(),
            transcript: Vec::new(),
            steps: 0,
        })
    }

    fn advance(&mut self, model: &Model, turn: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let step = model.interact(&self.state, turn);
        self.state = step.state;
        self.summaries.push(step.summary);
        self.steps += 1;
        (step.coverage_weights, step.semantic_weights)
    }

    pub fn post_message(&mut self, model: &Model, vocab: &Vocabulary, text: &str) -> Result<Reply> {
        let turn = encode_text(model, vocab, text, self.caps)?
            .ok_or_else(|| Error::contract("message text is empty"))?;
        let (attention, semantic_attention) = self.advance(model, &turn);

        let keep = self.summaries.len().saturating_sub(self.caps.l_c_max.max(1));
        let context = model.aggregate(&self.summaries[keep..])?;
        let cond = Conditioning {
            context,
            style: self.style.clone(),
        };
        let hyp = model.decode(&cond, &self.decode)?;
        let reply = vocab.decode(&hyp.tokens).join(" ");

        self.transcript.push(TranscriptEntry {
            speaker: Speaker::User,
            text: text.to_string(),
        });
        self.transcript.push(TranscriptEntry {
            speaker: Speaker::Bot,
            text: reply.clone(),
        });
        if let Some(v) = encode_text(model, vocab, &reply, self.caps)? {
            self.advance(model, &v);
        }
        self.attention = attention.clone();
        Ok(Reply {
            reply,
            coverage: self.state.coverage.clone(),
            attention,
            semantic_attention,
            steps: self.steps,
        })
    }

    /// Rebuilds a session by re-posting every user turn of `transcript`.
    pub fn replay(
        model: &Model,
        vocab: &Vocabulary,
        persona_a: Vec<String>,
        persona_b: Vec<String>,
        decode: DecodeConfig,
        caps: Caps,
        user_turns: &[String],
    ) -> Result<(Self, Vec<Reply>)> {
        let mut s = Self::new(model, vocab, persona_a, persona_b, decode, caps)?;
        let replies = user_turns
            .iter()
            .map(|t| s.post_message(model, vocab, t))
            .collect::<Result<_>>()?;
        Ok((s, replies))
    }

    pub fn user_turns(&self) -> Vec<String> {
        self.transcript
            .iter()
            .filter(|e| e.speaker == Speaker::User)
            .map(|e| e.text.clone())
            .collect()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn coverage(&self) -> &[f64] {
        &self.state.coverage
    }

    pub fn knowledge(&self) -> &KnowledgeState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn persona_a(&self) -> &[String] {
        &self.persona_a
    }

    pub fn persona_b(&self) -> &[String] {
        &self.persona_b
    }

    pub fn decode_config(&self) -> &DecodeConfig {
        &self.decode
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            persona_a: self.persona_a.clone(),
            persona_b: self.persona_b.clone(),
            decode: self.decode.clone(),
            transcript: self.transcript.clone(),
            coverage: self.state.coverage.clone(),
            attention: self.attention.clone(),
            steps: self.steps,
            knowledge: self.state.clone(),
        }
    }
}
