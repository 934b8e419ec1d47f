//! Corpus BLEU, distinct-n and knowledge recall/precision/F1.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor used for an n-gram precision with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;

const STOPWORDS_TEXT: &str = include_str!("../data/stopwords.txt");

pub fn stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_TEXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    })
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = Vec<&str>> {
    tokens
        .windows(n.max(1))
        .filter(move |_| n > 0)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
}

fn counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    for g in ngrams(tokens, n) {
        *out.entry(g).or_insert(0) += 1;
    }
    out
}

/// Clipped matches and total hypothesis n-grams summed over the corpus.
fn modified_precision_counts<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let mut matches = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let rc = counts(r, n);
        for (g, c) in counts(h, n) {
            matches += c.min(rc.get(&g).copied().unwrap_or(0));
            total += c;
        }
    }
    (matches, total)
}

/// Corpus BLEU with uniform weights over orders `1..=max_n` and a brevity
/// penalty from corpus lengths.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::contract("bleu needs at least one hypothesis"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::contract("bleu order must be at least 1"));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = modified_precision_counts(hyps, refs, n);
        let p = if m > 0 { m as f64 / t as f64 } else { BLEU_EPSILON };
        log_sum += p.ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Distinct n-grams over all n-grams, pooled across the corpus.
pub fn distinct_n<S: AsRef<str>>(hyps: &[Vec<S>], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        for g in ngrams(h, n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn content_set<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> HashSet<String> {
    let stop = stopwords();
    tokens
        .into_iter()
        .map(|t| t.as_ref().to_lowercase())
        .filter(|t| !stop.contains(t))
        .collect()
}

/// Set overlap between content words of the hypothesis and the knowledge.
pub fn knowledge_rpf1<S: AsRef<str>>(hyp: &[S], knowledge: &[Vec<S>]) -> KnowledgeScore {
    let k = content_set(knowledge.iter().flatten());
    let r = content_set(hyp);
    let overlap = r.intersection(&k).count() as f64;
    let precision = if r.is_empty() { 0.0 } else { overlap / r.len() as f64 };
    let recall = if k.is_empty() { 0.0 } else { overlap / k.len() as f64 };
    KnowledgeScore {
        recall,
        precision,
        f1: harmonic(precision, recall),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub knowledge_recall: f64,
    pub knowledge_precision: f64,
    pub knowledge_f1: f64,
    pub examples: usize,
    pub bleu_smoothing: String,
    pub bleu_epsilon: f64,
}

impl EvalReport {
    pub const METRICS: [&'static str; 7] = [
        "bleu1",
        "bleu2",
        "distinct1",
        "distinct2",
        "knowledge_recall",
        "knowledge_precision",
        "knowledge_f1",
    ];

    pub fn metric_values(&self) -> [f64; 7] {
        [
            self.bleu1,
            self.bleu2,
            self.distinct1,
            self.distinct2,
            self.knowledge_recall,
            self.knowledge_precision,
            self.knowledge_f1,
        ]
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::METRICS.iter().zip(self.metric_values()) {
            let _ = writeln!(out, "{k}={v:?}");
        }
        let _ = writeln!(out, "examples={}", self.examples);
        let _ = writeln!(out, "bleu_smoothing={}", self.bleu_smoothing);
        let _ = writeln!(out, "bleu_epsilon={:e}", self.bleu_epsilon);
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let kv = dir.join("report.txt");
        std::fs::write(&kv, self.to_key_values()).map_err(|e| Error::io(&kv, e))?;
        let js = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&js, text).map_err(|e| Error::io(&js, e))
    }
}

/// Corpus BLEU-1/2 and distinct-1/2; knowledge recall and precision averaged
/// per example, F1 as their harmonic mean.
pub fn evaluate_corpus<S: AsRef<str>>(
    outputs: &[Vec<S>],
    golds: &[Vec<S>],
    knowledge: &[Vec<Vec<S>>],
) -> Result<EvalReport> {
    if outputs.len() != golds.len() || outputs.len() != knowledge.len() {
        return Err(Error::contract(format!(
            "length mismatch: {} outputs, {} gold responses, {} knowledge lists",
            outputs.len(),
            golds.len(),
            knowledge.len()
        )));
    }
    let n = outputs.len();
    let (mut r, mut p) = (0.0, 0.0);
    for (o, k) in outputs.iter().zip(knowledge) {
        let s = knowledge_rpf1(o, k);
        r += s.recall;
        p += s.precision;
    }
    let (r, p) = (r / n as f64, p / n as f64);
    Ok(EvalReport {
        bleu1: bleu(outputs, golds, 1)?,
        bleu2: bleu(outputs, golds, 2)?,
        distinct1: distinct_n(outputs, 1),
        distinct2: distinct_n(outputs, 2),
        knowledge_recall: r,
        knowledge_precision: p,
        knowledge_f1: harmonic(p, r),
        examples: n,
        bleu_smoothing: "add-epsilon".into(),
        bleu_epsilon: BLEU_EPSILON,
    })
}
