#![allow(dead_code)]

use perchat::data::vocab::{EOS_ID, SOS_ID};
use perchat::data::{DialogueExample, EncodedExample, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` examples over a vocabulary of exactly `vocab_size` ids.
pub fn synthetic_corpus(n: usize, vocab_size: usize, seed: u64) -> (Vocabulary, Vec<DialogueExample>) {
    let words: Vec<String> = (0..vocab_size - 4).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(words.iter().map(String::as_str));
    assert_eq!(vocab.len(), vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentence = |len: usize| -> Vec<String> {
        (0..len)
            .map(|_| words[rng.random_range(0..words.len())].clone())
            .collect()
    };
    let examples = (0..n)
        .map(|_| DialogueExample {
            persona_a: vec![sentence(4), sentence(3)],
            persona_b: vec![sentence(3)],
            context: vec![sentence(3), sentence(4)],
            response: sentence(5),
        })
        .collect();
    (vocab, examples)
}

pub fn random_ids(rng: &mut ChaCha8Rng, vocab_size: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(4..vocab_size)).collect()
}

/// Random encoded example with the given shape.
pub fn random_example(rng: &mut ChaCha8Rng, vocab_size: usize, l_p: usize, l_c: usize, t: usize) -> EncodedExample {
    let sentences = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..=4);
                random_ids(rng, vocab_size, len)
            })
            .collect()
    };
    let persona_a = sentences(l_p, rng);
    let persona_b = sentences(l_p, rng);
    let context = sentences(l_c, rng);
    let mut response = vec![SOS_ID];
    response.extend(random_ids(rng, vocab_size, t - 1));
    response.push(EOS_ID);
    EncodedExample {
        persona_a,
        persona_b,
        context,
        response,
    }
}

use perchat::params::{Gradients, ParamStore};

/// Largest relative error between `analytic` and central differences of `f`
/// over every scalar of `store`, with `|a - n| / max(|a|, |n|, floor)`.
pub fn max_grad_error(store: &ParamStore, analytic: &Gradients, h: f64, floor: f64, f: impl Fn(&ParamStore) -> f64) -> (f64, usize) {
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let x = store.get(id).data[j];
            work.get_mut(id).data[j] = x + h;
            let up = f(&work);
            work.get_mut(id).data[j] = x - h;
            let down = f(&work);
            work.get_mut(id).data[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id)[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

fn occurrences(tokens: &[String], gram: &[String]) -> usize {
    if gram.len() > tokens.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| (0..gram.len()).all(|j| tokens[i + j] == gram[j]))
        .count()
}

/// Straight-loop corpus BLEU: clipped counts by positional scanning, one
/// distinct n-gram at a time.
pub fn brute_force_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize, eps: f64) -> f64 {
    let c: usize = hyps.iter().map(|h| h.len()).sum();
    let r: usize = refs.iter().map(|h| h.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, rf) in hyps.iter().zip(refs) {
            if h.len() < n {
                continue;
            }
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                total += 1;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matched += occurrences(h, g).min(occurrences(rf, g));
            }
        }
        let p = if matched == 0 { eps } else { matched as f64 / total as f64 };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

/// Random corpus of small token lists over a tiny alphabet.
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

use perchat::autodiff::Tape;
use perchat::Model;

/// Every attention distribution the model computes for `ex`: sentence
/// pooling, semantic and coverage attention per turn, and turn pooling.
pub fn attention_distributions(model: &Model, ex: &EncodedExample) -> Vec<Vec<f64>> {
    let mut tape = Tape::new(&model.params);
    let mut out = Vec::new();
    for s in ex.persona_a.iter().chain(&ex.persona_b).chain(&ex.context) {
        let enc = model.encoder.f_enc(&mut tape, model.embedding, s, None).unwrap();
        out.push(tape.value(enc.weights).to_vec());
    }
    let trace = model.condition(&mut tape, ex, None).unwrap();
    for step in &trace.steps {
        out.push(tape.value(step.semantic_weights).to_vec());
        out.push(tape.value(step.coverage_weights).to_vec());
    }
    out.push(tape.value(trace.history_weights).to_vec());
    out
}

/// Coverage vectors before the first turn and after each turn.
pub fn coverage_trajectory(model: &Model, ex: &EncodedExample) -> Vec<Vec<f64>> {
    let mut tape = Tape::new(&model.params);
    let trace = model.condition(&mut tape, ex, None).unwrap();
    trace.states.iter().map(|s| tape.value(s.coverage).to_vec()).collect()
}
