//! Full model: encoder, interaction and decoder over one shared parameter
//! store, plus the plain-value entry points used by decoding and sessions.

use std::borrow::Cow;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::vocab::PAD_ID;
use crate::data::EncodedExample;
use crate::decoder::{Conditioning, DecoderParams, Hypothesis};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::interaction::{
    InteractionFlags, InteractionParams, KnowledgeState, KnowledgeVars, StepTrace, TurnSummary,
    TurnSummaryVars,
};
use crate::layers::{maybe_dropout, Activation, Dropout};
use crate::params::{Gradients, Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_style: bool,
    pub no_knowledge_update: bool,
    pub no_coverage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Shared width `d` of every sentence, turn and decoder vector.
    pub hidden: usize,
    /// Per-direction width of the sentence GRU.
    pub gru_hidden: usize,
    pub attn_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// `gru_hidden` and `attn_dim` default to `hidden`.
    pub fn new(vocab_size: usize, embed_dim: usize, hidden: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden,
            gru_hidden: hidden,
            attn_dim: hidden,
            dropout: 0.0,
            activation: Activation::Logistic,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 1,
            max_len: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: ParamId,
    pub encoder: EncoderParams,
    pub interaction: InteractionParams,
    pub decoder: DecoderParams,
}

/// Everything the conditioning pass produced on a tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub context: Var,
    pub style: Option<Var>,
    pub persona_a: Vec<Var>,
    /// Knowledge state before each turn, plus the final one.
    pub states: Vec<KnowledgeVars>,
    pub steps: Vec<StepTrace>,
    pub summaries: Vec<TurnSummaryVars>,
    pub history_weights: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TokenLoss {
    /// Summed negative log-likelihood.
    pub sum: Var,
    pub tokens: usize,
}

/// Result of one interaction step in plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: KnowledgeState,
    pub summary: TurnSummary,
    pub semantic_weights: Vec<f64>,
    pub coverage_weights: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedding = params.add(
            "embedding",
            config.vocab_size,
            config.embed_dim,
            Init::Uniform(0.1),
            &mut rng,
        );
        params.get_mut(embedding).data[..config.embed_dim]
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let encoder = EncoderParams::register(
            &mut params,
            config.embed_dim,
            config.gru_hidden,
            config.hidden,
            config.attn_dim,
            &mut rng,
        );
        let flags = InteractionFlags {
            no_knowledge_update: config.ablation.no_knowledge_update,
            no_coverage: config.ablation.no_coverage,
        };
        let interaction = InteractionParams::register(
            &mut params,
            config.hidden,
            config.attn_dim,
            config.activation,
            flags,
            &mut rng,
        );
        let decoder = DecoderParams::register(
            &mut params,
            config.embed_dim,
            config.hidden,
            config.vocab_size,
            &mut rng,
        );
        Self {
            config,
            params,
            embedding,
            encoder,
            interaction,
            decoder,
        }
    }

    /// Rebuilds a model around previously trained parameters.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0);
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, want), (_, got)) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.rows != got.rows || want.cols != got.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {} [{}x{}] does not match {} [{}x{}]",
                    got.name, got.rows, got.cols, want.name, want.rows, want.cols
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn set_embeddings(&mut self, matrix: &Array2<f64>) -> Result<()> {
        let p = self.params.get_mut(self.embedding);
        if matrix.dim() != (p.rows, p.cols) {
            return Err(Error::Config(format!(
                "embedding matrix is {:?}, model expects ({}, {})",
                matrix.dim(),
                p.rows,
                p.cols
            )));
        }
        p.data = matrix.iter().copied().collect();
        Ok(())
    }

    /// Parameters that only the speaking-style path reaches.
    pub fn style_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.style_param_ids().to_vec();
        ids.extend(self.decoder.style_param_ids());
        ids
    }

    fn encode_sentences(
        &self,
        tape: &mut Tape,
        sentences: &[Vec<usize>],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Vec<Var>> {
        sentences
            .iter()
            .map(|s| {
                self.encoder
                    .f_enc(tape, self.embedding, s, dropout.as_deref_mut())
                    .map(|e| e.pooled)
            })
            .collect()
    }

    /// Encoder and interaction passes for one example.
    pub fn condition(
        &self,
        tape: &mut Tape,
        ex: &EncodedExample,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardTrace> {
        if ex.persona_a.is_empty() {
            return Err(Error::contract("example has no persona sentences"));
        }
        if ex.context.is_empty() {
            return Err(Error::contract("example has no context turns"));
        }
        let h_a = self.encode_sentences(tape, &ex.persona_a, &mut dropout)?;
        let h_c = self.encode_sentences(tape, &ex.context, &mut dropout)?;
        let style = if self.config.ablation.no_style {
            None
        } else if ex.persona_b.is_empty() {
            Some(self.encoder.speaking_style(tape, &h_a, &h_a)?)
        } else {
            let h_b = self.encode_sentences(tape, &ex.persona_b, &mut dropout)?;
            Some(self.encoder.speaking_style(tape, &h_a, &h_b)?)
        };

        let mut state = self.interaction.initial_state(tape, &h_a)?;
        let mut states = Vec::with_capacity(h_c.len() + 1);
        let mut steps = Vec::with_capacity(h_c.len());
        let mut summaries = Vec::with_capacity(h_c.len());
        for &turn in &h_c {
            let (next, summary, step) = self.interaction.interaction_step(tape, &state, turn);
            states.push(std::mem::replace(&mut state, next));
            steps.push(step);
            summaries.push(summary);
        }
        states.push(state);
        let (context, history_weights) = self.interaction.aggregate_history(tape, &summaries)?;
        Ok(ForwardTrace {
            context,
            style,
            persona_a: h_a,
            states,
            steps,
            summaries,
            history_weights,
        })
    }

    /// Teacher-forced decoder pass from an existing conditioning trace.
    pub fn decoder_nll(
        &self,
        tape: &mut Tape,
        trace: &ForwardTrace,
        ex: &EncodedExample,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<TokenLoss> {
        if ex.response.len() < 2 {
            return Err(Error::contract("response must be framed with start and end tokens"));
        }
        let mut s = self.decoder.init_state(tape, trace.context);
        let mut nlls = Vec::with_capacity(ex.targets().len());
        for (&input, &target) in ex.decoder_inputs().iter().zip(ex.targets()) {
            if target == PAD_ID {
                return Err(Error::contract("pad id used as a decoder target"));
            }
            let emb = tape.param_row(self.embedding, input);
            let emb = maybe_dropout(&mut dropout, tape, emb);
            let out = self.decoder.hgfu_step(tape, s, emb, trace.style);
            s = out.state;
            let logits = self.decoder.logits(tape, s, emb);
            nlls.push(tape.nll(logits, target, Some(PAD_ID)));
        }
        Ok(TokenLoss {
            sum: tape.sum(&nlls),
            tokens: nlls.len(),
        })
    }

    pub fn example_nll(
        &self,
        tape: &mut Tape,
        ex: &EncodedExample,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<TokenLoss> {
        let trace = self.condition(tape, ex, dropout.as_deref_mut())?;
        self.decoder_nll(tape, &trace, ex, dropout)
    }

    /// Summed NLL, token count and parameter gradients (of the sum).
    pub fn loss_and_grad(&self, ex: &EncodedExample, dropout_seed: Option<u64>, grads: &mut Gradients) -> Result<(f64, usize)> {
        let mut tape = Tape::new(&self.params);
        let mut dropout = dropout_seed
            .filter(|_| self.config.dropout > 0.0)
            .map(|s| Dropout::new(self.config.dropout, s));
        let loss = self.example_nll(&mut tape, ex, dropout.as_mut())?;
        tape.backward(loss.sum, 1.0, grads);
        Ok((tape.scalar(loss.sum), loss.tokens))
    }

    /// Summed NLL without gradients.
    pub fn nll(&self, ex: &EncodedExample) -> Result<(f64, usize)> {
        let mut tape = Tape::new(&self.params);
        let loss = self.example_nll(&mut tape, ex, None)?;
        Ok((tape.scalar(loss.sum), loss.tokens))
    }

    pub fn conditioning(&self, ex: &EncodedExample) -> Result<Conditioning> {
        let mut tape = Tape::new(&self.params);
        let trace = self.condition(&mut tape, ex, None)?;
        Ok(Conditioning {
            context: tape.value(trace.context).to_vec(),
            style: trace.style.map(|s| tape.value(s).to_vec()),
        })
    }

    /// With the style ablation any supplied style vector is ignored.
    fn effective<'c>(&self, cond: &'c Conditioning) -> Cow<'c, Conditioning> {
        if self.config.ablation.no_style && cond.style.is_some() {
            Cow::Owned(Conditioning {
                context: cond.context.clone(),
                style: None,
            })
        } else {
            Cow::Borrowed(cond)
        }
    }

    pub fn greedy_decode(&self, cond: &Conditioning, max_len: usize) -> Result<Hypothesis> {
        self.decoder
            .greedy_decode(&self.params, self.embedding, &self.effective(cond), max_len)
    }

    pub fn beam_decode(&self, cond: &Conditioning, beam_size: usize, max_len: usize) -> Result<Hypothesis> {
        self.decoder
            .beam_decode(&self.params, self.embedding, &self.effective(cond), beam_size, max_len)
    }

    pub fn decode(&self, cond: &Conditioning, cfg: &DecodeConfig) -> Result<Hypothesis> {
        if cfg.beam_size <= 1 {
            self.greedy_decode(cond, cfg.max_len)
        } else {
            self.beam_decode(cond, cfg.beam_size, cfg.max_len)
        }
    }

    pub fn respond(&self, ex: &EncodedExample, cfg: &DecodeConfig) -> Result<Hypothesis> {
        let cond = self.conditioning(ex)?;
        self.decode(&cond, cfg)
    }

    // Incremental entry points for live sessions.

    pub fn encode_sentence(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encoder.f_enc(&mut tape, self.embedding, ids, None)?;
        Ok(tape.value(enc.pooled).to_vec())
    }

    pub fn initial_knowledge(&self, persona_a: &[Vec<f64>]) -> Result<KnowledgeState> {
        let mut tape = Tape::new(&self.params);
        let rows: Vec<Var> = persona_a.iter().map(|r| tape.input(r.clone())).collect();
        let state = self.interaction.initial_state(&mut tape, &rows)?;
        Ok(KnowledgeState::read(&tape, &state))
    }

    pub fn style_vector(&self, persona_a: &[Vec<f64>], persona_b: &[Vec<f64>]) -> Result<Option<Vec<f64>>> {
        if self.config.ablation.no_style {
            return Ok(None);
        }
        let mut tape = Tape::new(&self.params);
        let a: Vec<Var> = persona_a.iter().map(|r| tape.input(r.clone())).collect();
        let b: Vec<Var> = if persona_b.is_empty() {
            a.clone()
        } else {
            persona_b.iter().map(|r| tape.input(r.clone())).collect()
        };
        let s = self.encoder.speaking_style(&mut tape, &a, &b)?;
        Ok(Some(tape.value(s).to_vec()))
    }

    pub fn interact(&self, state: &KnowledgeState, turn: &[f64]) -> StepOutcome {
        let mut tape = Tape::new(&self.params);
        let vars = state.load(&mut tape);
        let turn = tape.input(turn.to_vec());
        let (next, summary, step) = self.interaction.interaction_step(&mut tape, &vars, turn);
        StepOutcome {
            state: KnowledgeState::read(&tape, &next),
            summary: TurnSummary::read(&tape, &summary),
            semantic_weights: tape.value(step.semantic_weights).to_vec(),
            coverage_weights: tape.value(step.coverage_weights).to_vec(),
        }
    }

    pub fn aggregate(&self, summaries: &[TurnSummary]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let vars: Vec<TurnSummaryVars> = summaries.iter().map(|s| s.load(&mut tape)).collect();
        let (o, _) = self.interaction.aggregate_history(&mut tape, &vars)?;
        Ok(tape.value(o).to_vec())
    }
}
