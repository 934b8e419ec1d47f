mod common;

use perchat::data::{Caps, EncodedExample, Vocabulary};
use perchat::metrics::EvalReport;
use perchat::training::{
    evaluate, train, Checkpoint, EvalOptions, EvalSet, TrainConfig, TrainOptions, Trainer,
};
use perchat::{DecodeConfig, Error, Execution, Model, ModelConfig};

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig::from_pairs([
        ("hidden", "8"),
        ("embed_dim", "6"),
        ("lr", "0.01"),
        ("batch_size", "3"),
        ("epochs", "3"),
        ("seed", &seed.to_string()),
        ("max_len", "8"),
    ])
    .unwrap()
}

fn corpus() -> (Vocabulary, Vec<EncodedExample>) {
    let (vocab, exs) = common::synthetic_corpus(8, 30, 4);
    let enc = exs
        .iter()
        .map(|e| EncodedExample::encode(e, &vocab, Caps::default()))
        .collect();
    (vocab, enc)
}

#[test]
fn identical_seeds_give_identical_curves() {
    let (vocab, data) = corpus();
    let cfg = tiny_config(7);
    let a = train(&cfg, &vocab, &data, &data[..3], &TrainOptions::default()).unwrap();
    let b = train(&cfg, &vocab, &data, &data[..3], &TrainOptions::default()).unwrap();
    assert_eq!(a.history.len(), 3);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.train_loss, y.train_loss);
        assert_eq!(x.valid_loss, y.valid_loss);
    }
    assert_eq!(a.last.params, b.last.params);

    let mut seq = cfg.clone();
    seq.execution = Execution::Sequential;
    let c = train(&seq, &vocab, &data, &data[..3], &TrainOptions::default()).unwrap();
    for (x, y) in a.history.iter().zip(&c.history) {
        assert_eq!(x.train_loss, y.train_loss);
    }

    let d = train(&tiny_config(8), &vocab, &data, &data[..3], &TrainOptions::default()).unwrap();
    assert_ne!(a.history[0].train_loss, d.history[0].train_loss);
}

#[test]
fn overfitting_loss_falls_almost_monotonically() {
    let (vocab, data) = corpus();
    let model = Model::new(ModelConfig::new(vocab.len(), 8, 16), 1);
    let mut trainer = Trainer::new(model, 0.01, 5.0, Execution::Parallel);
    let losses: Vec<f64> = (0..51).map(|_| trainer.step(&data, None).unwrap().loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 5, "{rises} non-decreasing steps: {losses:?}");
    assert!(losses[50] < losses[0]);
}

#[test]
fn style_ablation_never_updates_style_parameters() {
    let (vocab, data) = corpus();
    let mut cfg = tiny_config(3);
    cfg.no_style = true;
    let out = train(&cfg, &vocab, &data, &data[..2], &TrainOptions::default()).unwrap();
    let init = Model::new(cfg.model_config(vocab.len()), cfg.seed);
    let trained = out.last.model().unwrap();
    for id in init.style_param_ids() {
        assert_eq!(init.params.get(id).data, trained.params.get(id).data, "{}", init.params.get(id).name);
    }
    let other = init.params.ids().find(|id| !init.style_param_ids().contains(id)).unwrap();
    assert_ne!(init.params.get(other).data, trained.params.get(other).data);
}

#[test]
fn checkpoint_reload_is_bitwise_identical() {
    let (vocab, data) = corpus();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        embeddings: None,
    };
    let out = train(&tiny_config(5), &vocab, &data, &data[..2], &opts).unwrap();
    let loaded = Checkpoint::load(dir.path().join("best.ckpt")).unwrap();
    assert_eq!(loaded, out.best);
    let before = out.best.model().unwrap();
    let after = loaded.model().unwrap();
    for ex in &data {
        assert_eq!(before.nll(ex).unwrap(), after.nll(ex).unwrap());
        assert_eq!(before.conditioning(ex).unwrap(), after.conditioning(ex).unwrap());
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,valid_loss,wall_time"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn best_checkpoint_has_lowest_validation_loss() {
    let (vocab, data) = corpus();
    let out = train(&tiny_config(6), &vocab, &data, &data[..2], &TrainOptions::default()).unwrap();
    let min = out.history.iter().map(|h| h.valid_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.valid_loss, Some(min));
}

#[test]
fn max_steps_stops_early() {
    let (vocab, data) = corpus();
    let mut cfg = tiny_config(1);
    cfg.max_steps = Some(4);
    let out = train(&cfg, &vocab, &data, &data[..2], &TrainOptions::default()).unwrap();
    assert_eq!(out.last.step, 4);
    assert_eq!(out.history.len(), 2);
}

#[test]
fn empty_corpora_are_rejected() {
    let (vocab, data) = corpus();
    let cfg = tiny_config(1);
    assert!(train(&cfg, &vocab, &[], &data, &TrainOptions::default()).is_err());
    assert!(train(&cfg, &vocab, &data, &[], &TrainOptions::default()).is_err());
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let (vocab, data) = corpus();
    let mut model = Model::new(ModelConfig::new(vocab.len(), 6, 8), 0);
    let id = model.decoder.b_out;
    model.params.get_mut(id).data[5] = f64::NAN;
    let mut trainer = Trainer::new(model, 0.01, 5.0, Execution::Sequential);
    match trainer.step(&data[..2], None) {
        Err(Error::NonFinite { batch, norms, .. }) => {
            assert_eq!(batch, 0);
            assert!(norms.contains("decoder.b_out=NaN"), "{norms}");
        }
        other => panic!("expected divergence error, got {other:?}"),
    }
}

fn eval_fixture() -> (Checkpoint, Vec<perchat::data::DialogueExample>, Vocabulary) {
    let (vocab, exs) = common::synthetic_corpus(6, 30, 9);
    let cfg = tiny_config(2);
    let model = Model::new(cfg.model_config(vocab.len()), 2);
    (Checkpoint::new(&model, &cfg, &vocab), exs, vocab)
}

#[test]
fn gold_generations_score_perfect_bleu() {
    let (ck, exs, vocab) = eval_fixture();
    let set = EvalSet::new(exs, &vocab, Caps::default());
    let opts = EvalOptions {
        gold_as_generations: true,
        ..Default::default()
    };
    let out = evaluate(&ck, &set, &DecodeConfig::default(), opts).unwrap();
    assert_eq!(out.report.bleu1, 1.0);
    assert!((out.report.bleu2 - 1.0).abs() < 1e-12);
}

#[test]
fn evaluation_writes_report_and_generations() {
    let (ck, exs, vocab) = eval_fixture();
    let n = exs.len();
    let set = EvalSet::new(exs, &vocab, Caps::default());
    let cfg = DecodeConfig {
        beam_size: 1,
        max_len: 6,
    };
    let a = evaluate(&ck, &set, &cfg, EvalOptions::default()).unwrap();
    let b = evaluate(&ck, &set, &cfg, EvalOptions::default()).unwrap();
    assert_eq!(a.generations, b.generations);
    assert_eq!(a.report, b.report);

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let kv = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    for key in EvalReport::METRICS {
        assert_eq!(kv.lines().filter(|l| l.starts_with(&format!("{key}="))).count(), 1);
    }
    let gens = std::fs::read_to_string(dir.path().join("generations.jsonl")).unwrap();
    assert_eq!(gens.lines().count(), n);
    let first: serde_json::Value = serde_json::from_str(gens.lines().next().unwrap()).unwrap();
    for key in ["gold", "generated", "knowledge", "context"] {
        assert!(first.get(key).is_some());
    }
}

#[test]
fn vocabulary_mismatch_is_an_error() {
    let (ck, exs, _) = eval_fixture();
    let other = Vocabulary::from_tokens(["x", "y"]);
    let set = EvalSet::new(exs, &other, Caps::default());
    assert!(matches!(
        evaluate(&ck, &set, &DecodeConfig::default(), EvalOptions::default()),
        Err(Error::VocabMismatch { .. })
    ));
}
