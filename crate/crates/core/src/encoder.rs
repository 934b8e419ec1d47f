//! Sentence encoder (bidirectional GRU + attention pooling) and the
//! speaking-style vector built from both speakers' knowledge encodings.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::layers::{maybe_dropout, AttentionPool, Dropout, Gru};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed_dim: usize,
    /// Per-direction GRU width.
    pub gru_hidden: usize,
    /// Shared model width `d`.
    pub dim: usize,
    pub forward: Gru,
    pub backward: Gru,
    /// `[d x 2H]` map from concatenated directions to `d`.
    pub proj: ParamId,
    pub pool: AttentionPool,
    pub style_u: ParamId,
    pub style_v: ParamId,
}

/// Per-token outputs of [`EncoderParams::bigru_encode`].
#[derive(Clone, Debug)]
pub struct BiGruOutput {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
    /// Projected states, one per input position; padded positions are zero.
    pub states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SentenceEncoding {
    pub pooled: Var,
    pub states: Vec<Var>,
    pub weights: Var,
}

impl EncoderParams {
    pub fn register(
        store: &mut ParamStore,
        embed_dim: usize,
        gru_hidden: usize,
        dim: usize,
        attn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let forward = Gru::register(store, "encoder.gru_fwd", embed_dim, gru_hidden, rng);
        let backward = Gru::register(store, "encoder.gru_bwd", embed_dim, gru_hidden, rng);
        let proj = store.add("encoder.proj", dim, 2 * gru_hidden, Init::FanIn, rng);
        let pool = AttentionPool::register(store, "encoder.pool", dim, attn_dim, rng);
        let style_u = store.add("encoder.style_u", dim, dim, Init::FanIn, rng);
        let style_v = store.add("encoder.style_v", dim, dim, Init::FanIn, rng);
        Self {
            embed_dim,
            gru_hidden,
            dim,
            forward,
            backward,
            proj,
            pool,
            style_u,
            style_v,
        }
    }

    pub fn style_param_ids(&self) -> [ParamId; 2] {
        [self.style_u, self.style_v]
    }

    /// Runs both directions over the first `length` embeddings.
    pub fn bigru_encode(&self, tape: &mut Tape, embeddings: &[Var], length: usize) -> Result<BiGruOutput> {
        if length == 0 {
            return Err(Error::contract("cannot encode a zero-length sentence"));
        }
        if length > embeddings.len() {
            return Err(Error::contract(format!(
                "length {length} exceeds {} embeddings",
                embeddings.len()
            )));
        }
        let mut h = tape.zeros(self.gru_hidden);
        let mut forward = Vec::with_capacity(length);
        for &x in &embeddings[..length] {
            h = self.forward.step(tape, x, h);
            forward.push(h);
        }
        let mut h = tape.zeros(self.gru_hidden);
        let mut backward = vec![h; length];
        for t in (0..length).rev() {
            h = self.backward.step(tape, embeddings[t], h);
            backward[t] = h;
        }
        let mut states = Vec::with_capacity(embeddings.len());
        for t in 0..length {
            let both = tape.concat(&[forward[t], backward[t]]);
            states.push(tape.matvec(self.proj, both));
        }
        for _ in length..embeddings.len() {
            states.push(tape.zeros(self.dim));
        }
        Ok(BiGruOutput {
            forward,
            backward,
            states,
        })
    }

    /// Attention pooling over the positions where `mask` is true.
    pub fn attention_pool(&self, tape: &mut Tape, states: &[Var], mask: &[bool]) -> Result<(Var, Var)> {
        let live: Vec<Var> = states
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&s, _)| s)
            .collect();
        let pooled = self.pool.pool(tape, &live)?;
        Ok((pooled.weights, pooled.output))
    }

    /// Encodes one sentence of token ids; trailing pad ids are ignored.
    pub fn f_enc(
        &self,
        tape: &mut Tape,
        embedding: ParamId,
        ids: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<SentenceEncoding> {
        let length = ids.iter().position(|&t| t == PAD_ID).unwrap_or(ids.len());
        let embeddings: Vec<Var> = ids[..length]
            .iter()
            .map(|&id| {
                let e = tape.param_row(embedding, id);
                maybe_dropout(&mut dropout, tape, e)
            })
            .collect();
        let out = self.bigru_encode(tape, &embeddings, length)?;
        let states: Vec<Var> = out
            .states
            .into_iter()
            .map(|s| maybe_dropout(&mut dropout, tape, s))
            .collect();
        let pooled = self.pool.pool(tape, &states)?;
        Ok(SentenceEncoding {
            pooled: pooled.output,
            states,
            weights: pooled.weights,
        })
    }

    /// `(U maxpool(h_a)) * (V maxpool(h_b))`.
    pub fn speaking_style(&self, tape: &mut Tape, h_a: &[Var], h_b: &[Var]) -> Result<Var> {
        if h_a.is_empty() || h_b.is_empty() {
            return Err(Error::contract("speaking style needs knowledge from both speakers"));
        }
        let a = tape.col_max(h_a);
        let b = tape.col_max(h_b);
        let ua = tape.matvec(self.style_u, a);
        let vb = tape.matvec(self.style_v, b);
        Ok(tape.mul(ua, vb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::SeedableRng;

    fn setup(embed: usize, h: usize, d: usize) -> (ParamStore, EncoderParams, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let emb = store.add("embedding", 10, embed, Init::Uniform(0.5), &mut rng);
        let enc = EncoderParams::register(&mut store, embed, h, d, d, &mut rng);
        (store, enc, emb)
    }

    fn set_identity(store: &mut ParamStore, id: ParamId) {
        let p = store.get_mut(id);
        p.data.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..p.rows.min(p.cols) {
            p.data[i * p.cols + i] = 1.0;
        }
    }

    #[test]
    fn single_token_runs_one_step_per_direction() {
        let (store, enc, _) = setup(3, 4, 5);
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.1, -0.2, 0.3]);
        let out = enc.bigru_encode(&mut tape, &[x], 1).unwrap();
        assert_eq!(out.forward.len(), 1);
        assert_eq!(out.backward.len(), 1);
        assert_eq!(out.states.len(), 1);
        // both directions see the same token from a zero state
        let mut t2 = Tape::new(&store);
        let x2 = t2.input(vec![0.1, -0.2, 0.3]);
        let h0 = t2.zeros(4);
        let f = enc.forward.step(&mut t2, x2, h0);
        let b = enc.backward.step(&mut t2, x2, h0);
        assert_eq!(tape.value(out.forward[0]), t2.value(f));
        assert_eq!(tape.value(out.backward[0]), t2.value(b));
    }

    #[test]
    fn zero_weights_give_hand_computed_states() {
        // With zero weights and biases, z = r = 1/2 and n = tanh(b_n); starting
        // from h = 0 the first step gives (1 - 1/2) * tanh(b_n).
        let (mut store, enc, _) = setup(2, 2, 2);
        for gru in [&enc.forward, &enc.backward] {
            for id in gru.param_ids() {
                store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        set_identity(&mut store, enc.proj);
        let mut tape = Tape::new(&store);
        let xs: Vec<Var> = (0..3).map(|_| tape.input(vec![1.0, -1.0])).collect();
        let out = enc.bigru_encode(&mut tape, &xs, 3).unwrap();
        for s in &out.states {
            assert_eq!(tape.value(*s), &[0.0, 0.0]);
        }

        // nonzero candidate bias: h1 = 0.5 tanh(b), h2 = 0.5 h1 + 0.5 tanh(b)
        let b = 0.7f64;
        store.get_mut(enc.forward.b_n).data.iter_mut().for_each(|x| *x = b);
        let mut tape = Tape::new(&store);
        let xs: Vec<Var> = (0..2).map(|_| tape.input(vec![1.0, -1.0])).collect();
        let out = enc.bigru_encode(&mut tape, &xs, 2).unwrap();
        let z = sigmoid(0.0);
        let h1 = (1.0 - z) * b.tanh();
        let h2 = z * h1 + (1.0 - z) * b.tanh();
        // proj = identity on the first two of four concatenated coordinates
        assert!((tape.value(out.states[0])[0] - h1).abs() < 1e-15);
        assert!((tape.value(out.states[1])[0] - h2).abs() < 1e-15);
        assert!((tape.value(out.states[0])[1] - h1).abs() < 1e-15);
    }

    #[test]
    fn reversed_input_swaps_direction_roles() {
        let (mut store, enc, _) = setup(3, 4, 4);
        // tie the two directions so the swap is exact
        for (f, b) in enc.forward.param_ids().iter().zip(enc.backward.param_ids()) {
            let data = store.get(*f).data.clone();
            store.get_mut(b).data = data;
        }
        let seq = [vec![0.1, 0.5, -0.3], vec![-0.4, 0.2, 0.9], vec![0.3, 0.3, 0.0]];
        let mut tape = Tape::new(&store);
        let xs: Vec<Var> = seq.iter().map(|v| tape.input(v.clone())).collect();
        let out = enc.bigru_encode(&mut tape, &xs, 3).unwrap();
        let rxs: Vec<Var> = seq.iter().rev().map(|v| tape.input(v.clone())).collect();
        let rev = enc.bigru_encode(&mut tape, &rxs, 3).unwrap();
        for t in 0..3 {
            assert_eq!(tape.value(out.forward[t]), tape.value(rev.backward[2 - t]));
            assert_eq!(tape.value(out.backward[t]), tape.value(rev.forward[2 - t]));
        }
    }

    #[test]
    fn zero_length_is_rejected() {
        let (store, enc, _) = setup(2, 2, 2);
        let mut tape = Tape::new(&store);
        assert!(enc.bigru_encode(&mut tape, &[], 0).is_err());
        assert!(enc.f_enc(&mut tape, ParamId(0), &[PAD_ID, PAD_ID], None).is_err());
    }

    #[test]
    fn pooling_hand_example() {
        let (mut store, enc, _) = setup(2, 2, 2);
        set_identity(&mut store, enc.pool.w);
        store.get_mut(enc.pool.v).data = vec![1.0, 0.0];
        let mut tape = Tape::new(&store);
        let a = tape.input(vec![1.0, 0.0]);
        let b = tape.input(vec![0.0, 0.0]);
        let (w, out) = enc.attention_pool(&mut tape, &[a, b], &[true, true]).unwrap();
        let e = 1f64.tanh().exp();
        let w0 = e / (e + 1.0);
        assert!((tape.value(w)[0] - w0).abs() < 1e-12);
        assert!((w0 - 0.681700).abs() < 1e-6);
        assert!((tape.value(out)[0] - w0).abs() < 1e-12);
        assert_eq!(tape.value(out)[1], 0.0);
    }

    #[test]
    fn pooling_identical_states_and_singletons() {
        let (store, enc, _) = setup(2, 2, 3);
        let mut tape = Tape::new(&store);
        let s = tape.input(vec![0.3, -1.2, 2.0]);
        let (w, out) = enc.attention_pool(&mut tape, &[s, s, s], &[true; 3]).unwrap();
        for &x in tape.value(w) {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        for (a, b) in tape.value(out).iter().zip([0.3, -1.2, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let (w, out) = enc.attention_pool(&mut tape, &[s], &[true]).unwrap();
        assert_eq!(tape.value(w), &[1.0]);
        assert_eq!(tape.value(out), &[0.3, -1.2, 2.0]);
        assert!(enc.attention_pool(&mut tape, &[s], &[false]).is_err());
    }

    #[test]
    fn f_enc_shapes_and_determinism() {
        let (store, enc, emb) = setup(4, 3, 6);
        let mut tape = Tape::new(&store);
        let a = enc.f_enc(&mut tape, emb, &[4, 5, 6], None).unwrap();
        let b = enc.f_enc(&mut tape, emb, &[4, 5, 6], None).unwrap();
        assert_eq!(tape.value(a.pooled).len(), 6);
        assert_eq!(a.states.len(), 3);
        assert_eq!(tape.value(a.pooled), tape.value(b.pooled));
    }

    #[test]
    fn trailing_padding_is_ignored() {
        let (store, enc, emb) = setup(4, 3, 6);
        let mut tape = Tape::new(&store);
        let a = enc.f_enc(&mut tape, emb, &[4, 5], None).unwrap();
        let b = enc.f_enc(&mut tape, emb, &[4, 5, PAD_ID, PAD_ID, PAD_ID], None).unwrap();
        for (x, y) in tape.value(a.pooled).iter().zip(tape.value(b.pooled)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn speaking_style_examples() {
        let (mut store, enc, _) = setup(2, 2, 2);
        set_identity(&mut store, enc.style_u);
        set_identity(&mut store, enc.style_v);
        let mut tape = Tape::new(&store);
        let r0 = tape.input(vec![1.0, -2.0]);
        let r1 = tape.input(vec![0.0, 3.0]);
        let m = tape.col_max(&[r0, r1]);
        assert_eq!(tape.value(m), &[1.0, 3.0]);

        let a = tape.input(vec![1.0, 2.0]);
        let b = tape.input(vec![3.0, -1.0]);
        let sty = enc.speaking_style(&mut tape, &[a], &[b]).unwrap();
        assert_eq!(tape.value(sty), &[3.0, -2.0]);
        assert!(enc.speaking_style(&mut tape, &[], &[b]).is_err());
    }

    #[test]
    fn speaking_style_ignores_sentence_order() {
        let (store, enc, _) = setup(2, 2, 3);
        let mut tape = Tape::new(&store);
        let rows: Vec<Var> = [[0.1, 0.9, -0.3], [0.5, -0.2, 0.4], [-0.7, 0.3, 0.8]]
            .iter()
            .map(|r| tape.input(r.to_vec()))
            .collect();
        let hb = tape.input(vec![0.2, 0.2, -0.5]);
        let s1 = enc.speaking_style(&mut tape, &rows, &[hb]).unwrap();
        let perm = [rows[2], rows[0], rows[1]];
        let s2 = enc.speaking_style(&mut tape, &perm, &[hb]).unwrap();
        assert_eq!(tape.value(s1), tape.value(s2));
    }
}
