//! `perchat` command dispatch. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use perchat::data::{build_vocab, load_cmudog, load_convai2, load_pretrained_embeddings, DialogueExample, EncodedExample};
use perchat::session::ChatSession;
use perchat::training::{
    evaluate, generate, read_key_values, train, Checkpoint, ContextRequest, Dataset, EvalOptions, EvalSet,
    TrainConfig, TrainOptions,
};
use perchat::Error;
use perchat_serve::{AppState, ServeConfig};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "perchat", version, about = "Persona-aware multi-turn dialogue generation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, a loss log and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Decode replies for a JSON-lines file of contexts.
    Generate(GenerateArgs),
    /// Talk to a checkpoint in the terminal.
    Chat(ChatArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

/// One flag per configuration key. Values are parsed by the config itself so
/// flags and files accept the same spellings.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    persona_mode: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    beam_size: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    no_style: bool,
    #[arg(long)]
    no_knowledge_update: bool,
    #[arg(long)]
    no_coverage: bool,
    #[arg(long)]
    k_max: Option<String>,
    #[arg(long)]
    l_c_max: Option<String>,
    #[arg(long)]
    l_p_max: Option<String>,
    #[arg(long)]
    min_freq: Option<String>,
    #[arg(long)]
    max_vocab: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    execution: Option<String>,
    #[arg(long)]
    activation: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            ("dataset", &self.dataset),
            ("persona_mode", &self.persona_mode),
            ("hidden", &self.hidden),
            ("embed_dim", &self.embed_dim),
            ("lr", &self.lr),
            ("dropout", &self.dropout),
            ("clip_norm", &self.clip),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
            ("beam_size", &self.beam_size),
            ("max_len", &self.max_len),
            ("k_max", &self.k_max),
            ("l_c_max", &self.l_c_max),
            ("l_p_max", &self.l_p_max),
            ("min_freq", &self.min_freq),
            ("max_vocab", &self.max_vocab),
            ("max_steps", &self.max_steps),
            ("execution", &self.execution),
            ("activation", &self.activation),
        ];
        let mut out: Vec<(&'static str, String)> = values
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect();
        for (k, on) in [
            ("no_style", self.no_style),
            ("no_knowledge_update", self.no_knowledge_update),
            ("no_coverage", self.no_coverage),
        ] {
            if on {
                out.push((k, "true".into()));
            }
        }
        out
    }
}

/// Decoding and data overrides for commands that start from a checkpoint.
#[derive(Args, Debug, Default)]
struct DecodeFlags {
    #[arg(long)]
    beam_size: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    execution: Option<String>,
}

impl DecodeFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        [
            ("beam_size", &self.beam_size),
            ("max_len", &self.max_len),
            ("execution", &self.execution),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus: a ConvAI2 text file or a CMUDoG directory / JSON-lines file.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained word vectors, one `token v1 .. vn` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    persona_mode: Option<String>,
    /// Writes report.txt, report.json, generations.jsonl and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score the gold responses instead of decoding.
    #[arg(long)]
    identity: bool,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON lines of `{persona_a, persona_b, context}`.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "persona-a", required = true)]
    persona_a: Vec<String>,
    #[arg(long = "persona-b")]
    persona_b: Vec<String>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Per-session transcript files; existing ones are replayed at startup.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Static files served under /ui.
    #[arg(long)]
    ui: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// Where a resolved configuration value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    Checkpoint(PathBuf),
    File(PathBuf),
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => f.write_str("default"),
            Source::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
            Source::File(p) => write!(f, "file:{}", p.display()),
            Source::Flag => f.write_str("flag"),
        }
    }
}

/// A configuration together with the source of every key.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: TrainConfig,
    pub sources: BTreeMap<&'static str, Source>,
}

fn canonical(key: &str) -> Option<&'static str> {
    let key = key.replace('-', "_");
    let key = if key == "clip" { "clip_norm".to_string() } else { key };
    TrainConfig::KEYS.iter().copied().find(|k| *k == key)
}

impl Resolved {
    fn new(config: TrainConfig, source: Source) -> Self {
        let sources = TrainConfig::KEYS.iter().map(|k| (*k, source.clone())).collect();
        Self { config, sources }
    }

    fn apply(&mut self, key: &str, value: &str, source: Source) -> Result<(), CliError> {
        let k = canonical(key).ok_or_else(|| CliError::Usage(format!("unknown configuration key {key:?}")))?;
        self.config.set(k, value).map_err(usage)?;
        self.sources.insert(k, source);
        Ok(())
    }

    /// Defaults, then the file, then flags.
    pub fn from_sources(file: Option<&Path>, flags: &[(&str, String)]) -> Result<Self, CliError> {
        let mut r = Self::new(TrainConfig::default(), Source::Default);
        if let Some(path) = file {
            let pairs = read_key_values(path).map_err(usage)?;
            for (k, v) in pairs {
                r.apply(&k, &v, Source::File(path.to_path_buf()))?;
            }
        }
        for (k, v) in flags {
            r.apply(k, v, Source::Flag)?;
        }
        r.config.validate().map_err(usage)?;
        Ok(r)
    }

    fn from_checkpoint(ck: &Checkpoint, path: &Path, flags: &[(&str, String)]) -> Result<Self, CliError> {
        let mut r = Self::new(ck.train_config.clone(), Source::Checkpoint(path.to_path_buf()));
        for (k, v) in flags {
            r.apply(k, v, Source::Flag)?;
        }
        r.config.validate().map_err(usage)?;
        Ok(r)
    }

    /// `{command, config: {key: {value, source}}}`.
    pub fn manifest(&self, command: &str) -> Value {
        let config: serde_json::Map<String, Value> = TrainConfig::KEYS
            .iter()
            .map(|k| {
                let source = self.sources.get(k).map(ToString::to_string).unwrap_or_default();
                (
                    k.to_string(),
                    json!({"value": self.config.get(k).unwrap_or_default(), "source": source}),
                )
            })
            .collect();
        json!({"command": command, "config": config})
    }

    fn write_manifest(&self, command: &str, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&self.manifest(command)).expect("manifest serializes");
        fs::write(dir.join("run_manifest.json"), text + "\n")?;
        fs::write(dir.join("run_config.txt"), self.config.to_key_values())?;
        Ok(())
    }
}

fn load_examples(cfg: &TrainConfig, path: &Path) -> Result<Vec<DialogueExample>, CliError> {
    let all = match cfg.dataset {
        Dataset::Convai2 => load_convai2(path, cfg.persona_mode)?,
        Dataset::Cmudog => load_cmudog(path)?,
    };
    let total = all.len();
    let kept: Vec<DialogueExample> = all.into_iter().filter(|e| e.validate().is_ok()).collect();
    if kept.len() < total {
        eprintln!("{}: skipped {} malformed examples", path.display(), total - kept.len());
    }
    Ok(kept)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let resolved = Resolved::from_sources(args.config.as_deref(), &args.flags.pairs())?;
    let cfg = &resolved.config;
    resolved.write_manifest("train", &args.out)?;

    let train_raw = load_examples(cfg, &args.train)?;
    let valid_raw = load_examples(cfg, &args.valid)?;
    let vocab = build_vocab(&train_raw, cfg.min_freq, cfg.max_vocab);
    let caps = cfg.caps();
    let encode = |xs: &[DialogueExample]| -> Vec<EncodedExample> {
        xs.iter().map(|e| EncodedExample::encode(e, &vocab, caps)).collect()
    };
    let (train_set, valid_set) = (encode(&train_raw), encode(&valid_raw));
    eprintln!(
        "train {} examples, valid {} examples, vocabulary {}",
        train_set.len(),
        valid_set.len(),
        vocab.len()
    );
    let embeddings = match &args.embeddings {
        Some(p) => Some(load_pretrained_embeddings(p, &vocab, cfg.embed_dim, cfg.seed)?),
        None => None,
    };
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        embeddings,
    };
    let outcome = train(cfg, &vocab, &train_set, &valid_set, &opts)?;
    for h in &outcome.history {
        println!(
            "epoch={} steps={} train_loss={} valid_loss={}",
            h.epoch, h.steps, h.train_loss, h.valid_loss
        );
    }
    outcome.last.save(args.out.join("last.ckpt"))?;
    println!("best_epoch={} best_valid_loss={}", outcome.best.epoch, outcome.best.valid_loss.unwrap_or(f64::NAN));
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let mut flags = args.decode.pairs();
    if let Some(d) = &args.dataset {
        flags.push(("dataset", d.clone()));
    }
    if let Some(m) = &args.persona_mode {
        flags.push(("persona_mode", m.clone()));
    }
    let resolved = Resolved::from_checkpoint(&ck, &args.checkpoint, &flags)?;
    let cfg = &resolved.config;
    let examples = load_examples(cfg, &args.data)?;
    let set = EvalSet::new(examples, &ck.vocab, cfg.caps());
    let opts = EvalOptions {
        gold_as_generations: args.identity,
        execution: cfg.execution,
    };
    let out = evaluate(&ck, &set, &cfg.decode_config(), opts)?;
    print!("{}", out.report.to_key_values());
    if let Some(dir) = &args.out {
        resolved.write_manifest("eval", dir)?;
        out.write(dir)?;
    }
    Ok(())
}

fn read_requests(path: &Path) -> Result<Vec<ContextRequest>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(req);
    }
    Ok(out)
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let resolved = Resolved::from_checkpoint(&ck, &args.checkpoint, &args.decode.pairs())?;
    let cfg = &resolved.config;
    let requests = read_requests(&args.input)?;
    let model = ck.model()?;
    let replies = generate(&model, &ck.vocab, &requests, cfg.caps(), &cfg.decode_config(), cfg.execution)?;
    let mut w: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for (index, reply) in replies.iter().enumerate() {
        writeln!(w, "{}", json!({"index": index, "reply": reply}))?;
    }
    w.flush()?;
    Ok(())
}

fn format_weights(ws: &[f64]) -> String {
    let parts: Vec<String> = ws.iter().map(|w| format!("{w:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Reads one user turn per line until EOF or `:quit`; `:state` prints the
/// session as JSON.
fn chat_loop(
    session: &mut ChatSession,
    model: &perchat::Model,
    vocab: &perchat::data::Vocabulary,
    input: impl BufRead,
    mut out: impl Write,
    prompt: bool,
) -> Result<(), CliError> {
    if prompt {
        write!(out, "> ")?;
        out.flush()?;
    }
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        match text {
            "" => {}
            ":quit" | ":q" => break,
            ":state" => {
                let snap = serde_json::to_string_pretty(&session.snapshot()).expect("snapshot serializes");
                writeln!(out, "{snap}")?;
            }
            _ => match session.post_message(model, vocab, text) {
                Ok(r) => {
                    writeln!(out, "bot: {}", r.reply)?;
                    writeln!(out, "coverage: {}", format_weights(&r.coverage))?;
                    writeln!(out, "attention: {}", format_weights(&r.attention))?;
                }
                Err(e) => writeln!(out, "error: {e}")?,
            },
        }
        if prompt {
            write!(out, "> ")?;
            out.flush()?;
        }
    }
    Ok(())
}

fn cmd_chat(args: &ChatArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let resolved = Resolved::from_checkpoint(&ck, &args.checkpoint, &args.decode.pairs())?;
    let cfg = &resolved.config;
    let model = ck.model()?;
    let mut session = ChatSession::new(
        &model,
        &ck.vocab,
        args.persona_a.clone(),
        args.persona_b.clone(),
        cfg.decode_config(),
        cfg.caps(),
    )
    .map_err(usage)?;
    let stdin = io::stdin();
    let prompt = stdin.is_terminal();
    chat_loop(&mut session, &model, &ck.vocab, stdin.lock(), io::stdout().lock(), prompt)
}

fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let resolved = Resolved::from_checkpoint(&ck, &args.checkpoint, &args.decode.pairs())?;
    let cfg = &resolved.config;
    let model = ck.model()?;
    let config = ServeConfig {
        caps: cfg.caps(),
        decode: cfg.decode_config(),
        transcript_dir: args.transcripts.clone(),
        ui_dir: args.ui.clone(),
    };
    let app = AppState::new(model, ck.vocab, config)?;
    perchat_serve::serve_blocking(args.addr, app)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Chat(a) => cmd_chat(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
