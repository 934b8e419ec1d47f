//! Teacher-forced training, checkpoint selection and corpus evaluation.

pub mod adam;
pub mod checkpoint;
pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use config::{read_key_values, Dataset, TrainConfig};

use crate::data::{tokenize, Batch, Caps, DialogueExample, EncodedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{evaluate_corpus, EvalReport};
use crate::model::{DecodeConfig, Model};
use crate::params::Gradients;

/// Examples per gradient task. Fixed so that the summation order, and hence
/// every floating-point result, is independent of the thread count.
pub const GRAD_CHUNK: usize = 4;

/// Derives a stream seed from a base seed and a tag.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rescales `grads` in place to global norm `max_norm` when it is exceeded.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !grads.is_finite() {
        return Err(Error::contract("cannot clip non-finite gradients"));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean per-token loss of the batch before the update.
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub clip_norm: f64,
    pub execution: Execution,
    pub steps: u64,
}

impl Trainer {
    pub fn new(model: Model, lr: f64, clip_norm: f64, execution: Execution) -> Self {
        let optimizer = Adam::new(&model.params, lr);
        Self {
            model,
            optimizer,
            clip_norm,
            execution,
            steps: 0,
        }
    }

    /// Summed NLL, token count, and gradients of the per-token mean loss.
    /// With `dropout_seed`, example `i` uses dropout stream `mix(seed, i)`.
    pub fn gradients(&self, batch: &[EncodedExample], dropout_seed: Option<u64>) -> Result<(f64, usize, Gradients)> {
        let model = &self.model;
        let parts = self.execution.map_chunks(batch, GRAD_CHUNK, |start, chunk| {
            let mut grads = Gradients::zeros_like(&model.params);
            let mut sum = 0.0;
            let mut tokens = 0;
            for (i, ex) in chunk.iter().enumerate() {
                let seed = dropout_seed.map(|s| mix_seed(s, (start + i) as u64));
                let (l, n) = model.loss_and_grad(ex, seed, &mut grads)?;
                sum += l;
                tokens += n;
            }
            Ok::<_, Error>((sum, tokens, grads))
        });
        let mut total = Gradients::zeros_like(&model.params);
        let mut sum = 0.0;
        let mut tokens = 0;
        for part in parts {
            let (s, n, g) = part?;
            sum += s;
            tokens += n;
            total.add_assign(&g);
        }
        if tokens == 0 {
            return Err(Error::contract("batch has no target tokens"));
        }
        total.scale(1.0 / tokens as f64);
        Ok((sum, tokens, total))
    }

    pub fn step(&mut self, batch: &[EncodedExample], dropout_seed: Option<u64>) -> Result<StepStats> {
        let (sum, tokens, mut grads) = self.gradients(batch, dropout_seed)?;
        let diverged = |what: &str, model: &Model, steps: u64| Error::NonFinite {
            what: what.into(),
            batch: steps as usize,
            norms: model.params.norm_summary(),
        };
        if !sum.is_finite() {
            return Err(diverged("loss", &self.model, self.steps));
        }
        if !grads.is_finite() {
            return Err(diverged("gradient", &self.model, self.steps));
        }
        let grad_norm = clip_gradients(&mut grads, self.clip_norm)?;
        self.optimizer.step(&mut self.model.params, &grads);
        self.steps += 1;
        if !self.model.params.is_finite() {
            return Err(diverged("parameter", &self.model, self.steps - 1));
        }
        Ok(StepStats {
            loss: sum / tokens as f64,
            tokens,
            grad_norm,
        })
    }

    /// Per-token NLL over `examples` without dropout.
    pub fn mean_loss(&self, examples: &[EncodedExample]) -> Result<f64> {
        mean_loss(&self.model, examples, self.execution)
    }
}

pub fn mean_loss(model: &Model, examples: &[EncodedExample], execution: Execution) -> Result<f64> {
    let parts = execution.map(examples, |ex| model.nll(ex));
    let mut sum = 0.0;
    let mut tokens = 0;
    for p in parts {
        let (s, n) = p?;
        sum += s;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::contract("no target tokens to score"));
    }
    Ok(sum / tokens as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub wall_time: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `train_log.csv` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub embeddings: Option<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

fn csv_log(dir: &Path) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("train_log.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    writeln!(w, "epoch,train_loss,valid_loss,wall_time").map_err(|e| Error::io(&path, e))?;
    Ok(w)
}

/// Seeded shuffled mini-batches, clipped Adam updates, best-by-validation
/// checkpoint selection.
pub fn train(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let mut model = Model::new(config.model_config(vocab.len()), config.seed);
    if let Some(e) = &opts.embeddings {
        model.set_embeddings(e)?;
    }
    let mut trainer = Trainer::new(model, config.lr, config.clip_norm, config.execution);
    let mut log = opts.out_dir.as_deref().map(csv_log).transpose()?;
    let started = Instant::now();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let max_steps = config.max_steps.map(|s| s as u64);
    let use_dropout = config.dropout > 0.0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut tokens = 0;
        for idx in order.chunks(config.batch_size) {
            if max_steps.is_some_and(|m| trainer.steps >= m) {
                break;
            }
            let batch: Vec<EncodedExample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let dropout_seed = use_dropout.then(|| mix_seed(config.seed ^ 0xD7, trainer.steps));
            let stats = trainer.step(&batch, dropout_seed)?;
            sum += stats.loss * stats.tokens as f64;
            tokens += stats.tokens;
        }
        if tokens == 0 {
            break;
        }
        let valid_loss = trainer.mean_loss(valid_set)?;
        let entry = EpochLog {
            epoch,
            train_loss: sum / tokens as f64,
            valid_loss,
            wall_time: started.elapsed().as_secs_f64(),
            steps: trainer.steps,
        };
        if let Some(w) = log.as_mut() {
            writeln!(
                w,
                "{},{},{},{:.3}",
                entry.epoch, entry.train_loss, entry.valid_loss, entry.wall_time
            )
            .and_then(|_| w.flush())
            .map_err(|e| Error::io("train_log.csv", e))?;
        }
        let improved = best
            .as_ref()
            .and_then(|b| b.valid_loss)
            .is_none_or(|b| valid_loss < b);
        if improved {
            let ck = snapshot(&trainer, config, vocab, epoch, valid_loss);
            if let Some(dir) = &opts.out_dir {
                ck.save(dir.join("best.ckpt"))?;
            }
            best = Some(ck);
        }
        history.push(entry);
        if max_steps.is_some_and(|m| trainer.steps >= m) {
            break;
        }
    }
    let last_epoch = history.last().map_or(0, |h| h.epoch);
    let last_valid = history.last().map(|h| h.valid_loss).unwrap_or(f64::NAN);
    let last = snapshot(&trainer, config, vocab, last_epoch, last_valid);
    Ok(TrainOutcome {
        history,
        best: best.unwrap_or_else(|| last.clone()),
        last,
    })
}

fn snapshot(trainer: &Trainer, config: &TrainConfig, vocab: &Vocabulary, epoch: usize, valid_loss: f64) -> Checkpoint {
    let mut ck = Checkpoint::new(&trainer.model, config, vocab);
    ck.optimizer = Some(trainer.optimizer.clone());
    ck.epoch = epoch;
    ck.step = trainer.steps;
    ck.valid_loss = Some(valid_loss);
    ck
}

/// Raw examples together with their id batch.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub examples: Vec<DialogueExample>,
    pub batch: Batch,
}

impl EvalSet {
    pub fn new(examples: Vec<DialogueExample>, vocab: &Vocabulary, caps: Caps) -> Self {
        let batch = crate::data::encode_batch(&examples, vocab, caps);
        Self { examples, batch }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub index: usize,
    pub context: Vec<String>,
    pub knowledge: Vec<String>,
    pub gold: String,
    pub generated: String,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub generations: Vec<Generation>,
}

impl Evaluation {
    /// Writes `report.txt`, `report.json` and `generations.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.report.write(dir)?;
        let path = dir.join("generations.jsonl");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for g in &self.generations {
            let line = serde_json::to_string(g).expect("generation serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Score the gold responses themselves instead of decoding.
    pub gold_as_generations: bool,
    pub execution: Execution,
}

pub fn evaluate(checkpoint: &Checkpoint, set: &EvalSet, decode: &DecodeConfig, opts: EvalOptions) -> Result<Evaluation> {
    let fingerprint = checkpoint.vocab.fingerprint();
    if set.batch.vocab_fingerprint != fingerprint {
        return Err(Error::VocabMismatch {
            checkpoint: fingerprint,
            data: set.batch.vocab_fingerprint,
        });
    }
    if set.examples.len() != set.batch.len() {
        return Err(Error::contract("evaluation examples and batch differ in length"));
    }
    let outputs: Vec<Vec<String>> = if opts.gold_as_generations {
        set.examples.iter().map(|e| e.response.clone()).collect()
    } else {
        let model = checkpoint.model()?;
        let encoded = set.batch.examples();
        opts.execution
            .map(&encoded, |ex| model.respond(ex, decode))
            .into_iter()
            .map(|h| h.map(|h| checkpoint.vocab.decode(&h.tokens)))
            .collect::<Result<_>>()?
    };
    let golds: Vec<Vec<String>> = set.examples.iter().map(|e| e.response.clone()).collect();
    let knowledge: Vec<Vec<Vec<String>>> = set.examples.iter().map(|e| e.persona_a.clone()).collect();
    let report = evaluate_corpus(&outputs, &golds, &knowledge)?;
    let generations = set
        .examples
        .iter()
        .zip(&outputs)
        .enumerate()
        .map(|(index, (e, o))| Generation {
            index,
            context: e.context.iter().map(|s| s.join(" ")).collect(),
            knowledge: e.persona_a.iter().map(|s| s.join(" ")).collect(),
            gold: e.response.join(" "),
            generated: o.join(" "),
        })
        .collect();
    Ok(Evaluation { report, generations })
}

/// Input record for batch generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRequest {
    pub persona_a: Vec<String>,
    #[serde(default)]
    pub persona_b: Vec<String>,
    pub context: Vec<String>,
}

impl ContextRequest {
    pub fn to_example(&self) -> DialogueExample {
        let sentences = |v: &[String]| v.iter().map(|s| tokenize(s)).filter(|t| !t.is_empty()).collect();
        DialogueExample {
            persona_a: sentences(&self.persona_a),
            persona_b: sentences(&self.persona_b),
            context: sentences(&self.context),
            response: Vec::new(),
        }
    }
}

/// Decodes a reply for every request, in input order.
pub fn generate(
    model: &Model,
    vocab: &Vocabulary,
    requests: &[ContextRequest],
    caps: Caps,
    decode: &DecodeConfig,
    execution: Execution,
) -> Result<Vec<String>> {
    let encoded: Vec<EncodedExample> = requests
        .iter()
        .map(|r| EncodedExample::encode(&r.to_example(), vocab, caps))
        .collect();
    execution
        .map(&encoded, |ex| model.respond(ex, decode))
        .into_iter()
        .map(|h| h.map(|h| vocab.decode(&h.tokens).join(" ")))
        .collect()
}
