//! Turn-by-turn interaction between the persona knowledge and the
//! conversation history.
//!
//! For every context turn the knowledge rows are attended twice: once on
//! semantic relevance alone and once with the coverage accumulator folded into
//! the score. The two views are fused into a persona-aware turn vector, the
//! coverage-aware weights are added to the accumulator, and each knowledge row
//! receives a gated residual computed from the turn. The sequence of
//! `[turn ; persona-aware turn]` vectors is then run through a turn-level GRU
//! and pooled into the history vector consumed by the decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Activation, AttentionPool, Gru};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionFlags {
    /// Freeze the knowledge rows at their initial encoding.
    pub no_knowledge_update: bool,
    /// Drop the coverage term from the coverage-aware score.
    pub no_coverage: bool,
}

#[derive(Clone, Debug)]
pub struct InteractionParams {
    pub dim: usize,
    pub sem_w: ParamId,
    pub sem_v: ParamId,
    pub sem_score: ParamId,
    pub cov_w: ParamId,
    pub cov_v: ParamId,
    pub cov_u: ParamId,
    pub cov_score: ParamId,
    pub w_sem: ParamId,
    pub w_rep: ParamId,
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub turn_gru: Gru,
    pub turn_pool: AttentionPool,
    pub activation: Activation,
    pub flags: InteractionFlags,
}

/// Knowledge semantic rows and coverage accumulator on a tape.
#[derive(Clone, Debug)]
pub struct KnowledgeVars {
    pub semantic: Vec<Var>,
    pub coverage: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TurnSummaryVars {
    pub turn: Var,
    pub fused: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub semantic_weights: Var,
    pub coverage_weights: Var,
}

/// Plain-value knowledge state, kept between turns of a live session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeState {
    pub semantic: Vec<Vec<f64>>,
    pub coverage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub turn: Vec<f64>,
    pub fused: Vec<f64>,
}

impl KnowledgeState {
    pub fn read(tape: &Tape, vars: &KnowledgeVars) -> Self {
        Self {
            semantic: vars.semantic.iter().map(|&v| tape.value(v).to_vec()).collect(),
            coverage: tape.value(vars.coverage).to_vec(),
        }
    }

    pub fn load(&self, tape: &mut Tape) -> KnowledgeVars {
        KnowledgeVars {
            semantic: self.semantic.iter().map(|r| tape.input(r.clone())).collect(),
            coverage: tape.input(self.coverage.clone()),
        }
    }
}

impl TurnSummary {
    pub fn read(tape: &Tape, vars: &TurnSummaryVars) -> Self {
        Self {
            turn: tape.value(vars.turn).to_vec(),
            fused: tape.value(vars.fused).to_vec(),
        }
    }

    pub fn load(&self, tape: &mut Tape) -> TurnSummaryVars {
        TurnSummaryVars {
            turn: tape.input(self.turn.clone()),
            fused: tape.input(self.fused.clone()),
        }
    }
}

impl InteractionParams {
    pub fn register(
        store: &mut ParamStore,
        dim: usize,
        attn_dim: usize,
        activation: Activation,
        flags: InteractionFlags,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut add = |name: &str, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng| {
            store.add(format!("interaction.{name}"), rows, cols, init, rng)
        };
        let sem_w = add("sem_w", attn_dim, dim, Init::FanIn, rng);
        let sem_v = add("sem_v", attn_dim, dim, Init::FanIn, rng);
        let sem_score = add("sem_score", attn_dim, 1, Init::FanIn, rng);
        let cov_w = add("cov_w", attn_dim, dim, Init::FanIn, rng);
        let cov_v = add("cov_v", attn_dim, dim, Init::FanIn, rng);
        let cov_u = add("cov_u", attn_dim, 1, Init::Uniform(1.0), rng);
        let cov_score = add("cov_score", attn_dim, 1, Init::FanIn, rng);
        let w_sem = add("w_sem", dim, dim, Init::FanIn, rng);
        let w_rep = add("w_rep", dim, dim, Init::FanIn, rng);
        let w_p = add("w_p", dim, 2 * dim, Init::FanIn, rng);
        let b_p = add("b_p", dim, 1, Init::Zeros, rng);
        let turn_gru = Gru::register(store, "interaction.turn_gru", 2 * dim, dim, rng);
        let turn_pool = AttentionPool::register(store, "interaction.turn_pool", dim, attn_dim, rng);
        Self {
            dim,
            sem_w,
            sem_v,
            sem_score,
            cov_w,
            cov_v,
            cov_u,
            cov_score,
            w_sem,
            w_rep,
            w_p,
            b_p,
            turn_gru,
            turn_pool,
            activation,
            flags,
        }
    }

    /// Initial state: the persona-A encodings and a zero coverage vector.
    pub fn initial_state(&self, tape: &mut Tape, persona: &[Var]) -> Result<KnowledgeVars> {
        if persona.is_empty() {
            return Err(Error::contract("knowledge state needs at least one persona row"));
        }
        Ok(KnowledgeVars {
            semantic: persona.to_vec(),
            coverage: tape.zeros(persona.len()),
        })
    }

    /// Relevance-only attention over the knowledge rows.
    pub fn semantic_attend(&self, tape: &mut Tape, state: &KnowledgeVars, turn: Var) -> (Var, Var) {
        let score_v = tape.param(self.sem_score);
        let turn_proj = tape.matvec(self.sem_v, turn);
        let scores: Vec<Var> = state
            .semantic
            .iter()
            .map(|&row| {
                let k = tape.matvec(self.sem_w, row);
                let pre = tape.add(k, turn_proj);
                let act = tape.tanh(pre);
                tape.dot(score_v, act)
            })
            .collect();
        let scores = tape.stack(&scores);
        let weights = tape.softmax(scores);
        let out = tape.weighted_sum(weights, &state.semantic);
        (weights, out)
    }

    /// Attention whose scores also see each row's accumulated coverage.
    pub fn coverage_attend(&self, tape: &mut Tape, state: &KnowledgeVars, turn: Var) -> (Var, Var) {
        let score_v = tape.param(self.cov_score);
        let cov_u = tape.param(self.cov_u);
        let turn_proj = tape.matvec(self.cov_v, turn);
        let scores: Vec<Var> = state
            .semantic
            .iter()
            .enumerate()
            .map(|(i, &row)| {
                let k = tape.matvec(self.cov_w, row);
                let mut pre = tape.add(k, turn_proj);
                if !self.flags.no_coverage {
                    let s_i = tape.index(state.coverage, i);
                    let cov = tape.scale_by(cov_u, s_i);
                    pre = tape.add(pre, cov);
                }
                let act = tape.tanh(pre);
                tape.dot(score_v, act)
            })
            .collect();
        let scores = tape.stack(&scores);
        let weights = tape.softmax(scores);
        let out = tape.weighted_sum(weights, &state.semantic);
        (weights, out)
    }

    pub fn fuse_views(&self, tape: &mut Tape, semantic: Var, coverage: Var) -> Var {
        let a = tape.matvec(self.w_sem, semantic);
        let b = tape.matvec(self.w_rep, coverage);
        let pre = tape.add(a, b);
        self.activation.apply(tape, pre)
    }

    pub fn update_coverage(&self, tape: &mut Tape, state: &KnowledgeVars, weights: Var) -> Var {
        tape.add(state.coverage, weights)
    }

    /// Residual update of every knowledge row from the current turn.
    pub fn update_knowledge(&self, tape: &mut Tape, state: &KnowledgeVars, turn: Var) -> Vec<Var> {
        if self.flags.no_knowledge_update {
            return state.semantic.clone();
        }
        let b = tape.param(self.b_p);
        state
            .semantic
            .iter()
            .map(|&row| {
                let sum = tape.add(turn, row);
                let prod = tape.mul(turn, row);
                let both = tape.concat(&[sum, prod]);
                let lin = tape.matvec(self.w_p, both);
                let pre = tape.add(lin, b);
                let delta = self.activation.apply(tape, pre);
                tape.add(row, delta)
            })
            .collect()
    }

    pub fn interaction_step(
        &self,
        tape: &mut Tape,
        state: &KnowledgeVars,
        turn: Var,
    ) -> (KnowledgeVars, TurnSummaryVars, StepTrace) {
        let (sem_w, sem) = self.semantic_attend(tape, state, turn);
        let (rep_w, rep) = self.coverage_attend(tape, state, turn);
        let fused = self.fuse_views(tape, sem, rep);
        let coverage = self.update_coverage(tape, state, rep_w);
        let semantic = self.update_knowledge(tape, state, turn);
        (
            KnowledgeVars { semantic, coverage },
            TurnSummaryVars { turn, fused },
            StepTrace {
                semantic_weights: sem_w,
                coverage_weights: rep_w,
            },
        )
    }

    /// Turn-level GRU over `[turn ; fused]` followed by attention pooling.
    /// Returns `(O, pooling weights)`.
    pub fn aggregate_history(&self, tape: &mut Tape, summaries: &[TurnSummaryVars]) -> Result<(Var, Var)> {
        if summaries.is_empty() {
            return Err(Error::contract("cannot aggregate an empty history"));
        }
        let mut h = tape.zeros(self.dim);
        let mut outputs = Vec::with_capacity(summaries.len());
        for s in summaries {
            let x = tape.concat(&[s.turn, s.fused]);
            h = self.turn_gru.step(tape, x, h);
            outputs.push(h);
        }
        let pooled = self.turn_pool.pool(tape, &outputs)?;
        Ok((pooled.output, pooled.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::SeedableRng;

    fn setup(d: usize) -> (ParamStore, InteractionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = InteractionParams::register(
            &mut store,
            d,
            d,
            Activation::Logistic,
            InteractionFlags::default(),
            &mut rng,
        );
        (store, p)
    }

    fn fill(store: &mut ParamStore, id: ParamId, values: &[f64]) {
        store.get_mut(id).data = values.to_vec();
    }

    fn state(tape: &mut Tape, rows: &[&[f64]], cov: &[f64]) -> KnowledgeVars {
        KnowledgeVars {
            semantic: rows.iter().map(|r| tape.input(r.to_vec())).collect(),
            coverage: tape.input(cov.to_vec()),
        }
    }

    #[test]
    fn semantic_hand_example() {
        let (mut store, p) = setup(2);
        fill(&mut store, p.sem_w, &[1.0, 0.0, 0.0, 1.0]);
        fill(&mut store, p.sem_v, &[1.0, 0.0, 0.0, 1.0]);
        fill(&mut store, p.sem_score, &[1.0, 1.0]);
        let mut tape = Tape::new(&store);
        let st = state(&mut tape, &[&[1.0, 0.0], &[0.0, 0.0]], &[0.0, 0.0]);
        let turn = tape.zeros(2);
        let (w, out) = p.semantic_attend(&mut tape, &st, turn);
        let e = 1f64.tanh().exp();
        let w0 = e / (e + 1.0);
        assert!((tape.value(w)[0] - w0).abs() < 1e-12);
        assert!((tape.value(w)[0] - 0.681700).abs() < 1e-6);
        assert!((tape.value(out)[0] - w0).abs() < 1e-12);
        assert_eq!(tape.value(out)[1], 0.0);
    }

    #[test]
    fn singleton_and_identical_rows() {
        let (store, p) = setup(3);
        let mut tape = Tape::new(&store);
        let st = state(&mut tape, &[&[0.2, -0.4, 0.9]], &[2.5]);
        let turn = tape.input(vec![0.5, 0.1, -0.3]);
        let (w, out) = p.semantic_attend(&mut tape, &st, turn);
        assert_eq!(tape.value(w), &[1.0]);
        assert_eq!(tape.value(out), &[0.2, -0.4, 0.9]);
        let (w, _) = p.coverage_attend(&mut tape, &st, turn);
        assert_eq!(tape.value(w), &[1.0]);

        let row: &[f64] = &[0.3, 0.3, -0.1];
        let st = state(&mut tape, &[row, row, row, row], &[0.0; 4]);
        let (w, _) = p.semantic_attend(&mut tape, &st, turn);
        for &x in tape.value(w) {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coverage_collapses_to_semantic_attention() {
        let (mut store, p) = setup(3);
        for (src, dst) in [(p.sem_w, p.cov_w), (p.sem_v, p.cov_v), (p.sem_score, p.cov_score)] {
            let data = store.get(src).data.clone();
            store.get_mut(dst).data = data;
        }
        let mut tape = Tape::new(&store);
        let st = state(&mut tape, &[&[0.1, 0.2, 0.3], &[-0.5, 0.4, 0.0]], &[0.0, 0.0]);
        let turn = tape.input(vec![0.7, -0.1, 0.2]);
        let (ws, os) = p.semantic_attend(&mut tape, &st, turn);
        let (wc, oc) = p.coverage_attend(&mut tape, &st, turn);
        assert_eq!(tape.value(ws), tape.value(wc));
        assert_eq!(tape.value(os), tape.value(oc));
    }

    #[test]
    fn coverage_term_shifts_scores_by_hand_formula() {
        let (mut store, p) = setup(2);
        fill(&mut store, p.cov_w, &[1.0, 0.0, 0.0, 1.0]);
        fill(&mut store, p.cov_v, &[0.0; 4]);
        fill(&mut store, p.cov_u, &[0.8, -0.5]);
        fill(&mut store, p.cov_score, &[1.0, 2.0]);
        let mut tape = Tape::new(&store);
        let row: &[f64] = &[0.4, 0.1];
        let st = state(&mut tape, &[row, row], &[1.0, 0.0]);
        let turn = tape.input(vec![0.3, 0.3]);
        let (w, _) = p.coverage_attend(&mut tape, &st, turn);
        let s0 = (0.4f64 + 0.8).tanh() + 2.0 * (0.1f64 - 0.5).tanh();
        let s1 = 0.4f64.tanh() + 2.0 * 0.1f64.tanh();
        let w0 = s0.exp() / (s0.exp() + s1.exp());
        assert!((tape.value(w)[0] - w0).abs() < 1e-12);
        assert!((tape.value(w)[0] - 0.5).abs() > 1e-3);
    }

    #[test]
    fn fuse_views_examples() {
        let (mut store, p) = setup(3);
        let mut tape = Tape::new(&store);
        let a = tape.input(vec![4.0, -3.0, 0.5]);
        let b = tape.input(vec![-1.0, 10.0, 2.0]);
        let out = p.fuse_views(&mut tape, a, b);
        assert!(tape.value(out).iter().all(|&x| x > 0.0 && x < 1.0));

        fill(&mut store, p.w_sem, &[0.0; 9]);
        fill(&mut store, p.w_rep, &[0.0; 9]);
        let mut tape = Tape::new(&store);
        let z = tape.zeros(3);
        let out = p.fuse_views(&mut tape, z, z);
        assert_eq!(tape.value(out), &[0.5, 0.5, 0.5]);

        let (mut store, p) = setup(3);
        fill(&mut store, p.w_rep, &[0.0; 9]);
        let mut tape = Tape::new(&store);
        let sem = tape.input(vec![0.2, 0.1, -0.7]);
        let r1 = tape.input(vec![1.0, 2.0, 3.0]);
        let r2 = tape.input(vec![-9.0, 0.0, 4.0]);
        let o1 = p.fuse_views(&mut tape, sem, r1);
        let o2 = p.fuse_views(&mut tape, sem, r2);
        assert_eq!(tape.value(o1), tape.value(o2));
    }

    #[test]
    fn coverage_accumulates_weights() {
        let (store, p) = setup(2);
        let mut tape = Tape::new(&store);
        let st = state(&mut tape, &[&[0.0, 0.0][..]; 3], &[0.0; 3]);
        let e = tape.input(vec![0.5, 0.3, 0.2]);
        let s2 = p.update_coverage(&mut tape, &st, e);
        assert_eq!(tape.value(s2), &[0.5, 0.3, 0.2]);
    }

    #[test]
    fn knowledge_update_hand_example() {
        let (mut store, p) = setup(2);
        let mut w = vec![0.0; 8];
        w[0] = 1.0;
        fill(&mut store, p.w_p, &w);
        fill(&mut store, p.b_p, &[0.0, 0.0]);
        let mut tape = Tape::new(&store);
        let st = state(&mut tape, &[&[1.0, 0.0]], &[0.0]);
        let turn = tape.input(vec![1.0, 0.0]);
        let rows = p.update_knowledge(&mut tape, &st, turn);
        let got = tape.value(rows[0]);
        assert!((got[0] - (1.0 + sigmoid(2.0))).abs() < 1e-12);
        assert!((got[0] - 1.8808).abs() < 1e-4);
        assert_eq!(got[1], 0.5);
    }

    #[test]
    fn zero_update_weights_grow_rows_by_half() {
        let (mut store, p) = setup(3);
        fill(&mut store, p.w_p, &[0.0; 18]);
        fill(&mut store, p.b_p, &[0.0; 3]);
        let mut tape = Tape::new(&store);
        let st = state(&mut tape, &[&[0.1, -0.2, 0.3], &[1.0, 1.0, 1.0]], &[0.0; 2]);
        let turn = tape.input(vec![0.9, 0.8, 0.7]);
        let rows = p.update_knowledge(&mut tape, &st, turn);
        for (new, old) in rows.iter().zip(&st.semantic) {
            for (a, b) in tape.value(*new).iter().zip(tape.value(*old)) {
                assert!((a - b - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_steps_telescope_and_stay_deterministic() {
        let (store, p) = setup(4);
        let run = || {
            let mut tape = Tape::new(&store);
            let rows: Vec<Var> = (0..3)
                .map(|i| tape.input(vec![0.1 * i as f64, -0.2, 0.3, 0.05]))
                .collect();
            let mut st = p.initial_state(&mut tape, &rows).unwrap();
            let turn = tape.input(vec![0.4, 0.4, -0.1, 0.2]);
            for _ in 0..2 {
                let (next, _, _) = p.interaction_step(&mut tape, &st, turn);
                st = next;
            }
            KnowledgeState::read(&tape, &st)
        };
        let a = run();
        assert!((a.coverage.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(a, run());
    }

    #[test]
    fn aggregate_history_edge_cases() {
        let (store, p) = setup(4);
        let mut tape = Tape::new(&store);
        assert!(p.aggregate_history(&mut tape, &[]).is_err());

        let s = TurnSummaryVars {
            turn: tape.input(vec![0.1, 0.2, 0.3, 0.4]),
            fused: tape.input(vec![0.5, 0.5, 0.5, 0.5]),
        };
        let (o, w) = p.aggregate_history(&mut tape, &[s]).unwrap();
        assert_eq!(tape.value(w), &[1.0]);
        let x = tape.concat(&[s.turn, s.fused]);
        let h0 = tape.zeros(4);
        let h = p.turn_gru.step(&mut tape, x, h0);
        assert_eq!(tape.value(o), tape.value(h));

        let (o, w) = p.aggregate_history(&mut tape, &[s, s, s, s]).unwrap();
        assert_eq!(tape.value(o).len(), 4);
        assert!((tape.value(w).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_knowledge_flag_keeps_rows() {
        let (store, mut p) = setup(3);
        p.flags.no_knowledge_update = true;
        let mut tape = Tape::new(&store);
        let st = state(&mut tape, &[&[0.1, 0.2, 0.3]], &[0.0]);
        let turn = tape.input(vec![1.0, 1.0, 1.0]);
        let (next, _, _) = p.interaction_step(&mut tape, &st, turn);
        assert_eq!(tape.value(next.semantic[0]), &[0.1, 0.2, 0.3]);
    }
}
