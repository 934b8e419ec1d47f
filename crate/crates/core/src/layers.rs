//! Building blocks shared by the encoder, interaction and decoder modules.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)
/// r  = sigmoid(Wr x + Ur h + br)
/// n  = tanh(Wn x + Un (r * h) + bn)
/// h' = z * h + (1 - z) * n
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
}

impl Gru {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mat = |name: &str, cols: usize, rng: &mut ChaCha8Rng| {
            store.add(format!("{prefix}.{name}"), hidden, cols, Init::FanIn, rng)
        };
        let w_z = mat("w_z", input, rng);
        let u_z = mat("u_z", hidden, rng);
        let w_r = mat("w_r", input, rng);
        let u_r = mat("u_r", hidden, rng);
        let w_n = mat("w_n", input, rng);
        let u_n = mat("u_n", hidden, rng);
        let b_z = store.add(format!("{prefix}.b_z"), hidden, 1, Init::Zeros, rng);
        let b_r = store.add(format!("{prefix}.b_r"), hidden, 1, Init::Zeros, rng);
        let b_n = store.add(format!("{prefix}.b_n"), hidden, 1, Init::Zeros, rng);
        Self {
            input,
            hidden,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_n,
            u_n,
            b_n,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_n, self.u_n,
            self.b_n,
        ]
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let xz = tape.affine(self.w_z, x, self.b_z);
        let hz = tape.matvec(self.u_z, h);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);

        let xr = tape.affine(self.w_r, x, self.b_r);
        let hr = tape.matvec(self.u_r, h);
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);

        let rh = tape.mul(r, h);
        let xn = tape.affine(self.w_n, x, self.b_n);
        let hn = tape.matvec(self.u_n, rh);
        let n = tape.add(xn, hn);
        let n = tape.tanh(n);

        let keep = tape.mul(z, h);
        let one_minus_z = tape.one_minus(z);
        let fresh = tape.mul(one_minus_z, n);
        tape.add(keep, fresh)
    }
}

/// Additive attention pooling: `e_j = v . tanh(W h_j)`, weights are the
/// softmax of `e`, output is the weighted sum of the `h_j`.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub w: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub weights: Var,
    pub output: Var,
}

impl AttentionPool {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        attn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), attn_dim, dim, Init::FanIn, rng),
            v: store.add(format!("{prefix}.v"), attn_dim, 1, Init::FanIn, rng),
        }
    }

    /// Pools `states`; callers pass only unmasked positions.
    pub fn pool(&self, tape: &mut Tape, states: &[Var]) -> Result<Pooled> {
        if states.is_empty() {
            return Err(Error::contract("attention pooling over zero unmasked positions"));
        }
        let v = tape.param(self.v);
        let scores: Vec<Var> = states
            .iter()
            .map(|&h| {
                let proj = tape.matvec(self.w, h);
                let act = tape.tanh(proj);
                tape.dot(v, act)
            })
            .collect();
        let scores = tape.stack(&scores);
        let weights = tape.softmax(scores);
        let output = tape.weighted_sum(weights, states);
        Ok(Pooled { weights, output })
    }
}

/// Squashing nonlinearity used by the fusion gate and the knowledge residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Logistic,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Logistic => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" | "sigmoid" => Ok(Activation::Logistic),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Logistic => "logistic",
            Activation::Tanh => "tanh",
        })
    }
}

/// Inverted dropout with its own seeded stream.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }
}

/// Applies dropout when training, identity otherwise.
pub(crate) fn maybe_dropout(dropout: &mut Option<&mut Dropout>, tape: &mut Tape, x: Var) -> Var {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;

    #[test]
    fn zero_weight_gru_halves_the_previous_state() {
        // z = r = 0.5, n = tanh(0) = 0, so h' = 0.5 * h.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = Gru::register(&mut store, "g", 2, 3, &mut rng);
        for id in gru.param_ids() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, -2.0]);
        let h = tape.input(vec![0.4, -0.2, 1.0]);
        let out = gru.step(&mut tape, x, h);
        assert_eq!(tape.value(out), &[0.2, -0.1, 0.5]);
    }

    #[test]
    fn gru_step_matches_scalar_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = Gru::register(&mut store, "g", 1, 1, &mut rng);
        let set = |s: &mut ParamStore, id, v| s.get_mut(id).data[0] = v;
        set(&mut store, gru.w_z, 0.5);
        set(&mut store, gru.u_z, -0.3);
        set(&mut store, gru.b_z, 0.1);
        set(&mut store, gru.w_r, 0.2);
        set(&mut store, gru.u_r, 0.7);
        set(&mut store, gru.b_r, -0.1);
        set(&mut store, gru.w_n, 1.1);
        set(&mut store, gru.u_n, 0.4);
        set(&mut store, gru.b_n, 0.05);
        let (x, h) = (0.8, -0.6);
        let z = sigmoid(0.5 * x - 0.3 * h + 0.1);
        let r = sigmoid(0.2 * x + 0.7 * h - 0.1);
        let n = (1.1 * x + 0.4 * (r * h) + 0.05f64).tanh();
        let expected = z * h + (1.0 - z) * n;

        let mut tape = Tape::new(&store);
        let xv = tape.input(vec![x]);
        let hv = tape.input(vec![h]);
        let out = gru.step(&mut tape, xv, hv);
        assert!((tape.scalar(out) - expected).abs() < 1e-15);
    }

    #[test]
    fn pooling_rejects_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let pool = AttentionPool::register(&mut store, "p", 2, 2, &mut rng);
        let mut tape = Tape::new(&store);
        assert!(matches!(pool.pool(&mut tape, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, 2.0]);
        let mut d = Dropout::new(0.0, 1);
        assert_eq!(d.apply(&mut tape, x), x);
    }
}
