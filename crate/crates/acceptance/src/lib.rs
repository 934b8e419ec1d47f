//! Reference implementations used by the acceptance suite. Nothing here calls
//! into the model's forward code; parameters are read by name from the store.

use perchat::data::vocab::{EOS_ID, SOS_ID};
use perchat::data::EncodedExample;
use perchat::params::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix copied out of a parameter store.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn named(store: &ParamStore, name: &str) -> Self {
        let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let p = store.get(id);
        Self {
            rows: p.rows,
            cols: p.cols,
            data: p.data.clone(),
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..self.cols {
                *o += self.data[r * self.cols + c] * x[c];
            }
        }
        out
    }

    pub fn column(&self) -> Vec<f64> {
        assert_eq!(self.cols, 1);
        self.data.clone()
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn mix(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += w * x;
        }
    }
    out
}

/// Interaction weights in plain matrices.
#[derive(Clone, Debug)]
pub struct InteractionWeights {
    pub sem_w: Mat,
    pub sem_v: Mat,
    pub sem_score: Vec<f64>,
    pub cov_w: Mat,
    pub cov_v: Mat,
    pub cov_u: Vec<f64>,
    pub cov_score: Vec<f64>,
    pub w_sem: Mat,
    pub w_rep: Mat,
    pub w_p: Mat,
    pub b_p: Vec<f64>,
}

impl InteractionWeights {
    pub fn read(store: &ParamStore) -> Self {
        let m = |n: &str| Mat::named(store, &format!("interaction.{n}"));
        Self {
            sem_w: m("sem_w"),
            sem_v: m("sem_v"),
            sem_score: m("sem_score").column(),
            cov_w: m("cov_w"),
            cov_v: m("cov_v"),
            cov_u: m("cov_u").column(),
            cov_score: m("cov_score").column(),
            w_sem: m("w_sem"),
            w_rep: m("w_rep"),
            w_p: m("w_p"),
            b_p: m("b_p").column(),
        }
    }
}

/// Everything observable from two interaction steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoTurns {
    pub semantic_weights: [Vec<f64>; 2],
    pub coverage_weights: [Vec<f64>; 2],
    pub fused: [Vec<f64>; 2],
    /// Coverage after turn 1 and turn 2.
    pub coverage: [Vec<f64>; 2],
    /// Knowledge rows after turn 1 and turn 2.
    pub knowledge: [Vec<Vec<f64>>; 2],
}

/// Two interaction steps written out turn by turn, logistic activation.
pub fn unrolled_two_turns(w: &InteractionWeights, persona: &[Vec<f64>], t1: &[f64], t2: &[f64]) -> TwoTurns {
    let n = persona.len();

    // turn 1
    let h1 = persona.to_vec();
    let s1 = vec![0.0; n];
    let v1 = w.sem_v.mul(t1);
    let a1: Vec<f64> = h1
        .iter()
        .map(|h| {
            let pre = add(&w.sem_w.mul(h), &v1);
            dot(&w.sem_score, &pre.iter().map(|x| x.tanh()).collect::<Vec<_>>())
        })
        .collect();
    let alpha1 = softmax(&a1);
    let sem1 = mix(&alpha1, &h1);
    let c1 = w.cov_v.mul(t1);
    let b1: Vec<f64> = h1
        .iter()
        .zip(&s1)
        .map(|(h, &s)| {
            let pre: Vec<f64> = add(&w.cov_w.mul(h), &c1)
                .iter()
                .zip(&w.cov_u)
                .map(|(x, u)| (x + u * s).tanh())
                .collect();
            dot(&w.cov_score, &pre)
        })
        .collect();
    let beta1 = softmax(&b1);
    let rep1 = mix(&beta1, &h1);
    let fused1: Vec<f64> = add(&w.w_sem.mul(&sem1), &w.w_rep.mul(&rep1)).into_iter().map(logistic).collect();
    let s2 = add(&s1, &beta1);
    let h2: Vec<Vec<f64>> = h1
        .iter()
        .map(|h| {
            let mut both = add(t1, h);
            both.extend(t1.iter().zip(h).map(|(a, b)| a * b));
            let delta: Vec<f64> = add(&w.w_p.mul(&both), &w.b_p).into_iter().map(logistic).collect();
            add(h, &delta)
        })
        .collect();

    // turn 2
    let v2 = w.sem_v.mul(t2);
    let a2: Vec<f64> = h2
        .iter()
        .map(|h| {
            let pre = add(&w.sem_w.mul(h), &v2);
            dot(&w.sem_score, &pre.iter().map(|x| x.tanh()).collect::<Vec<_>>())
        })
        .collect();
    let alpha2 = softmax(&a2);
    let sem2 = mix(&alpha2, &h2);
    let c2 = w.cov_v.mul(t2);
    let b2: Vec<f64> = h2
        .iter()
        .zip(&s2)
        .map(|(h, &s)| {
            let pre: Vec<f64> = add(&w.cov_w.mul(h), &c2)
                .iter()
                .zip(&w.cov_u)
                .map(|(x, u)| (x + u * s).tanh())
                .collect();
            dot(&w.cov_score, &pre)
        })
        .collect();
    let beta2 = softmax(&b2);
    let rep2 = mix(&beta2, &h2);
    let fused2: Vec<f64> = add(&w.w_sem.mul(&sem2), &w.w_rep.mul(&rep2)).into_iter().map(logistic).collect();
    let s3 = add(&s2, &beta2);
    let h3: Vec<Vec<f64>> = h2
        .iter()
        .map(|h| {
            let mut both = add(t2, h);
            both.extend(t2.iter().zip(h).map(|(a, b)| a * b));
            let delta: Vec<f64> = add(&w.w_p.mul(&both), &w.b_p).into_iter().map(logistic).collect();
            add(h, &delta)
        })
        .collect();

    TwoTurns {
        semantic_weights: [alpha1, alpha2],
        coverage_weights: [beta1, beta2],
        fused: [fused1, fused2],
        coverage: [s2, s3],
        knowledge: [h2, h3],
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn occurrences(tokens: &[String], gram: &[String]) -> usize {
    if gram.len() > tokens.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| tokens[i..i + gram.len()] == *gram)
        .count()
}

/// Corpus BLEU by positional scanning, one distinct n-gram at a time.
pub fn brute_force_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize, eps: f64) -> f64 {
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            if h.len() < n {
                continue;
            }
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                total += 1;
                if !seen.contains(&g) {
                    seen.push(g);
                    matched += occurrences(h, g).min(occurrences(rf, g));
                }
            }
        }
        let p = if matched == 0 { eps } else { matched as f64 / total as f64 };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

pub fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let alphabet = ["a", "b", "c", "d", "e"];
    let sent = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(0..7);
        (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_string()).collect()
    };
    let hyps = (0..n).map(|_| sent(rng)).collect();
    let refs = (0..n).map(|_| sent(rng)).collect();
    (hyps, refs)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Encoded example with `l_p` persona sentences per speaker, `l_c` context
/// turns and a response of `t` target tokens.
pub fn random_example(rng: &mut ChaCha8Rng, vocab: usize, l_p: usize, l_c: usize, t: usize) -> EncodedExample {
    let mut sentences = |n: usize| -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..=5);
                (0..len).map(|_| rng.random_range(4..vocab)).collect()
            })
            .collect()
    };
    let persona_a = sentences(l_p);
    let persona_b = sentences(l_p);
    let context = sentences(l_c);
    let mut response = vec![SOS_ID];
    response.extend(sentences(1)[0].iter().cycle().take(t - 1));
    response.push(EOS_ID);
    EncodedExample {
        persona_a,
        persona_b,
        context,
        response,
    }
}
