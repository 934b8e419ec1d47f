use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn perchat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perchat")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(out: &Path, seed: &str) -> Output {
    let f = fixtures();
    let o = perchat(&[
        "train",
        "--train",
        f.join("train_self_original.txt").to_str().unwrap(),
        "--valid",
        f.join("valid_self_original.txt").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--hidden",
        "8",
        "--embed-dim",
        "6",
        "--lr",
        "0.01",
        "--epochs",
        "2",
        "--batch-size",
        "2",
        "--max-len",
        "6",
        "--seed",
        seed,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

/// Loss columns of the training log; wall time varies run to run.
fn loss_columns(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("train_log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = perchat(&["fly"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_and_bad_value_are_usage_errors() {
    let o = perchat(&["eval", "--checkpoint", "x", "--data", "y", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = perchat(&["train", "--train", "a", "--valid", "b", "--out", dir.path().to_str().unwrap(), "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("none.ckpt");
    let data = fixtures().join("valid_self_original.txt");
    let o = perchat(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn training_twice_with_one_seed_gives_identical_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = train_tiny(a.path(), "7");
    let ob = train_tiny(b.path(), "7");
    assert_eq!(stdout(&oa), stdout(&ob));
    assert_eq!(loss_columns(a.path()), loss_columns(b.path()));
    assert_eq!(loss_columns(a.path()).len(), 3);
    for name in ["best.ckpt", "last.ckpt", "run_manifest.json", "run_config.txt"] {
        assert!(a.path().join(name).exists(), "{name}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["seed"]["value"], "7");
    assert_eq!(manifest["config"]["seed"]["source"], "flag");
    assert_eq!(manifest["config"]["dropout"]["source"], "default");

    let c = tempfile::tempdir().unwrap();
    train_tiny(c.path(), "8");
    assert_ne!(loss_columns(a.path()), loss_columns(c.path()));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "hidden = 8\nembed_dim = 6\nepochs = 1\nseed = 1\nmax_steps = 1\n").unwrap();
    let out = dir.path().join("out");
    let f = fixtures();
    let o = perchat(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--train",
        f.join("train_self_original.txt").to_str().unwrap(),
        "--valid",
        f.join("valid_self_original.txt").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"]["value"], "4");
    assert_eq!(manifest["config"]["seed"]["source"], "flag");
    assert_eq!(manifest["config"]["hidden"]["value"], "8");
    assert!(manifest["config"]["hidden"]["source"].as_str().unwrap().starts_with("file:"));
    let resolved = std::fs::read_to_string(out.join("run_config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed=4"));
}

#[test]
fn eval_identity_fixture_prints_perfect_bleu() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "3");
    let ck = dir.path().join("best.ckpt");
    let data = fixtures().join("valid_self_original.txt");
    let report = dir.path().join("report");
    let o = perchat(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--identity",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "bleu1=1.0"), "{text}");
    assert!(text.lines().any(|l| l == "examples=2"), "{text}");
    for name in ["report.txt", "report.json", "generations.jsonl", "run_manifest.json"] {
        assert!(report.join(name).exists(), "{name}");
    }

    let o = perchat(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--beam-size", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("knowledge_f1="));
}

#[test]
fn generate_and_chat_decode_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "5");
    let ck = dir.path().join("best.ckpt");
    let input = dir.path().join("contexts.jsonl");
    std::fs::write(
        &input,
        "{\"persona_a\": [\"i like to ski .\"], \"context\": [\"hi , how are you ?\"]}\n\
         {\"persona_a\": [\"i have a dog .\"], \"persona_b\": [\"i love cats .\"], \"context\": [\"hello\", \"hi\", \"pets ?\"]}\n",
    )
    .unwrap();
    let output = dir.path().join("replies.jsonl");
    let o = perchat(&[
        "generate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&output)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["index"], 1);
    assert!(lines[0]["reply"].is_string());

    let mut child = Command::new(env!("CARGO_BIN_EXE_perchat"))
        .args(["chat", "--checkpoint", ck.to_str().unwrap(), "--persona-a", "i like to ski ."])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(b"hi\nwhat do you do ?\n:quit\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.matches("bot: ").count(), 2, "{text}");
    assert_eq!(text.matches("coverage: ").count(), 2, "{text}");

    let o = perchat(&["chat", "--checkpoint", ck.to_str().unwrap(), "--persona-a", "   "]);
    assert_eq!(o.status.code(), Some(2));
}
