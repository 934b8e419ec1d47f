//! Gated-fusion decoder: a token GRU and a style GRU share the previous
//! decoder state, and a learned gate mixes their outputs into the next state.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_masked, Tape, Var};
use crate::data::vocab::{EOS_ID, PAD_ID, SOS_ID};
use crate::error::{Error, Result};
use crate::layers::Gru;
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embed_dim: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub token_gru: Gru,
    pub style_gru: Gru,
    pub w_y: ParamId,
    pub w_p: ParamId,
    pub v_gate: ParamId,
    pub w_init: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HgfuOutput {
    pub state: Var,
    pub token_state: Var,
    pub style_state: Option<Var>,
    pub gate: Option<Var>,
}

/// What the decoder is conditioned on: the history vector and, unless the
/// style path is ablated, the speaking-style vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub context: Vec<f64>,
    pub style: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, end token excluded.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Number of scored predictions (includes the end token when emitted).
    pub steps: usize,
}

impl Hypothesis {
    /// Length-normalized score: mean log-probability per prediction.
    pub fn score(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.log_prob / self.steps as f64
        }
    }
}

impl DecoderParams {
    pub fn register(
        store: &mut ParamStore,
        embed_dim: usize,
        dim: usize,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let token_gru = Gru::register(store, "decoder.token_gru", embed_dim, dim, rng);
        let style_gru = Gru::register(store, "decoder.style_gru", dim, dim, rng);
        let w_y = store.add("decoder.w_y", dim, dim, Init::FanIn, rng);
        let w_p = store.add("decoder.w_p", dim, dim, Init::FanIn, rng);
        let v_gate = store.add("decoder.v_gate", dim, 2 * dim, Init::FanIn, rng);
        let w_init = store.add("decoder.w_init", dim, dim, Init::FanIn, rng);
        let w_out = store.add("decoder.w_out", vocab_size, dim + embed_dim, Init::FanIn, rng);
        let b_out = store.add("decoder.b_out", vocab_size, 1, Init::Zeros, rng);
        Self {
            embed_dim,
            dim,
            vocab_size,
            token_gru,
            style_gru,
            w_y,
            w_p,
            v_gate,
            w_init,
            w_out,
            b_out,
        }
    }

    /// Parameters only reachable through the style path.
    pub fn style_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.style_gru.param_ids().to_vec();
        ids.extend([self.w_y, self.w_p, self.v_gate]);
        ids
    }

    /// `s_0 = tanh(W_init O)`.
    pub fn init_state(&self, tape: &mut Tape, context: Var) -> Var {
        let pre = tape.matvec(self.w_init, context);
        tape.tanh(pre)
    }

    /// One fused step. Passing `style = None` bypasses the gate entirely,
    /// so the next state is the token GRU output.
    pub fn hgfu_step(&self, tape: &mut Tape, prev: Var, token_embedding: Var, style: Option<Var>) -> HgfuOutput {
        let token_state = self.token_gru.step(tape, token_embedding, prev);
        let Some(style) = style else {
            return HgfuOutput {
                state: token_state,
                token_state,
                style_state: None,
                gate: None,
            };
        };
        let style_state = self.style_gru.step(tape, style, prev);
        let a = tape.matvec(self.w_y, token_state);
        let a = tape.tanh(a);
        let b = tape.matvec(self.w_p, style_state);
        let b = tape.tanh(b);
        let ab = tape.concat(&[a, b]);
        let gate = tape.matvec(self.v_gate, ab);
        let gate = tape.sigmoid(gate);
        let keep = tape.mul(gate, token_state);
        let inv = tape.one_minus(gate);
        let mix = tape.mul(inv, style_state);
        HgfuOutput {
            state: tape.add(keep, mix),
            token_state,
            style_state: Some(style_state),
            gate: Some(gate),
        }
    }

    /// Unnormalized output scores `W_o [s ; emb(y_prev)] + b_o`.
    pub fn logits(&self, tape: &mut Tape, state: Var, prev_embedding: Var) -> Var {
        let x = tape.concat(&[state, prev_embedding]);
        tape.affine(self.w_out, x, self.b_out)
    }

    pub fn output_distribution(&self, tape: &mut Tape, state: Var, prev_embedding: Var) -> Vec<f64> {
        let logits = self.logits(tape, state, prev_embedding);
        softmax_masked(tape.value(logits), Some(PAD_ID))
    }

    fn advance(
        &self,
        store: &ParamStore,
        embedding: ParamId,
        style: Option<&[f64]>,
        state: &[f64],
        prev_token: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(store);
        let s = tape.input(state.to_vec());
        let sty = style.map(|v| tape.input(v.to_vec()));
        let emb = tape.param_row(embedding, prev_token);
        let next = self.hgfu_step(&mut tape, s, emb, sty);
        let probs = self.output_distribution(&mut tape, next.state, emb);
        (tape.value(next.state).to_vec(), probs)
    }

    fn initial(&self, store: &ParamStore, cond: &Conditioning) -> Vec<f64> {
        let mut tape = Tape::new(store);
        let o = tape.input(cond.context.clone());
        let s = self.init_state(&mut tape, o);
        tape.value(s).to_vec()
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        embedding: ParamId,
        cond: &Conditioning,
        max_len: usize,
    ) -> Result<Hypothesis> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        let mut state = self.initial(store, cond);
        let mut prev = SOS_ID;
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            steps: 0,
        };
        for _ in 0..max_len {
            let (next, probs) = self.advance(store, embedding, cond.style.as_deref(), &state, prev);
            let tok = argmax(&probs);
            hyp.log_prob += probs[tok].ln();
            hyp.steps += 1;
            if tok == EOS_ID {
                break;
            }
            hyp.tokens.push(tok);
            state = next;
            prev = tok;
        }
        Ok(hyp)
    }

    /// Beam search ranked by cumulative log-probability during expansion and
    /// by mean log-probability at the end. The greedy hypothesis is always a
    /// final candidate, so the result never scores below greedy decoding.
    pub fn beam_decode(
        &self,
        store: &ParamStore,
        embedding: ParamId,
        cond: &Conditioning,
        beam_size: usize,
        max_len: usize,
    ) -> Result<Hypothesis> {
        let greedy = self.greedy_decode(store, embedding, cond, max_len)?;
        let mut pool = vec![greedy];
        pool.extend(self.beam_hypotheses(store, embedding, cond, beam_size, max_len)?);
        let best = pool
            .into_iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.score()
                    .partial_cmp(&b.score())
                    .unwrap_or(Ordering::Equal)
                    .then(ib.cmp(ia))
            })
            .map(|(_, h)| h)
            .expect("pool holds the greedy hypothesis");
        Ok(best)
    }

    /// Every hypothesis the beam finished, in completion order.
    pub fn beam_hypotheses(
        &self,
        store: &ParamStore,
        embedding: ParamId,
        cond: &Conditioning,
        beam_size: usize,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>> {
        if beam_size == 0 {
            return Err(Error::contract("beam_size must be at least 1"));
        }
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }

        struct Live {
            hyp: Hypothesis,
            state: Vec<f64>,
            prev: usize,
        }
        let mut live = vec![Live {
            hyp: Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
                steps: 0,
            },
            state: self.initial(store, cond),
            prev: SOS_ID,
        }];
        let mut finished = Vec::new();

        while !live.is_empty() {
            let expanded: Vec<(Vec<f64>, Vec<f64>)> = live
                .iter()
                .map(|b| self.advance(store, embedding, cond.style.as_deref(), &b.state, b.prev))
                .collect();
            // (cumulative log-prob, token prob, beam index, token)
            let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
            for (bi, (b, (_, probs))) in live.iter().zip(&expanded).enumerate() {
                for (tok, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        candidates.push((b.hyp.log_prob + p.ln(), p, bi, tok));
                    }
                }
            }
            // ln and + are monotone, so a strictly likelier token never ranks
            // below a less likely sibling; the probability tiebreak keeps
            // width-1 search identical to argmax decoding.
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next_live = Vec::new();
            for &(lp, _, bi, tok) in candidates.iter().take(beam_size) {
                let parent = &live[bi];
                let mut hyp = Hypothesis {
                    tokens: parent.hyp.tokens.clone(),
                    log_prob: lp,
                    steps: parent.hyp.steps + 1,
                };
                if tok == EOS_ID {
                    finished.push(hyp);
                    continue;
                }
                hyp.tokens.push(tok);
                if hyp.tokens.len() >= max_len {
                    finished.push(hyp);
                } else {
                    next_live.push(Live {
                        hyp,
                        state: expanded[bi].0.clone(),
                        prev: tok,
                    });
                }
            }
            live = next_live;
        }
        Ok(finished)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood over unmasked positions.
pub fn nll_loss(distributions: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<f64> {
    if distributions.len() != targets.len() || targets.len() != mask.len() {
        return Err(Error::contract("nll_loss inputs must have equal length"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((dist, &t), &m) in distributions.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        if t == PAD_ID {
            return Err(Error::contract("pad id used as a target at an unmasked position"));
        }
        let p = *dist
            .get(t)
            .ok_or_else(|| Error::contract(format!("target {t} outside the vocabulary")))?;
        total -= p.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("nll_loss needs at least one unmasked position"));
    }
    Ok(total / count as f64)
}
