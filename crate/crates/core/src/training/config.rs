use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Caps, PersonaMode};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layers::Activation;
use crate::model::{Ablation, DecodeConfig, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    #[default]
    Convai2,
    Cmudog,
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convai2" => Ok(Dataset::Convai2),
            "cmudog" => Ok(Dataset::Cmudog),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Convai2 => "convai2",
            Dataset::Cmudog => "cmudog",
        })
    }
}

/// Training configuration. Dataset-dependent values (`hidden`, `epochs`, the
/// truncation caps) stay `None` until set and then resolve from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: Dataset,
    pub persona_mode: PersonaMode,
    pub hidden: Option<usize>,
    pub embed_dim: usize,
    pub lr: f64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub beam_size: usize,
    pub max_len: usize,
    pub no_style: bool,
    pub no_knowledge_update: bool,
    pub no_coverage: bool,
    pub k_max: Option<usize>,
    pub l_c_max: Option<usize>,
    pub l_p_max: Option<usize>,
    pub min_freq: usize,
    pub max_vocab: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub execution: Execution,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Convai2,
            persona_mode: PersonaMode::Original,
            hidden: None,
            embed_dim: 300,
            lr: 5e-5,
            dropout: 0.3,
            clip_norm: 5.0,
            epochs: None,
            batch_size: 32,
            seed: 0,
            beam_size: 1,
            max_len: 30,
            no_style: false,
            no_knowledge_update: false,
            no_coverage: false,
            k_max: None,
            l_c_max: None,
            l_p_max: None,
            min_freq: 1,
            max_vocab: 20_000,
            max_steps: None,
            execution: Execution::Parallel,
            activation: Activation::Logistic,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_execution(value: &str) -> Result<Execution> {
    match value {
        "parallel" => Ok(Execution::Parallel),
        "sequential" => Ok(Execution::Sequential),
        other => Err(Error::Config(format!("unknown execution mode {other:?}"))),
    }
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn read_key_values(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 23] = [
        "dataset",
        "persona_mode",
        "hidden",
        "embed_dim",
        "lr",
        "dropout",
        "clip_norm",
        "epochs",
        "batch_size",
        "seed",
        "beam_size",
        "max_len",
        "no_style",
        "no_knowledge_update",
        "no_coverage",
        "k_max",
        "l_c_max",
        "l_p_max",
        "min_freq",
        "max_vocab",
        "max_steps",
        "execution",
        "activation",
    ];

    /// Sets one field from its textual form. `clip` is accepted for `clip_norm`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        match key.as_str() {
            "dataset" => self.dataset = value.parse()?,
            "persona_mode" => self.persona_mode = value.parse()?,
            "hidden" => self.hidden = Some(parse(&key, value)?),
            "embed_dim" => self.embed_dim = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "clip_norm" | "clip" => self.clip_norm = parse(&key, value)?,
            "epochs" => self.epochs = Some(parse(&key, value)?),
            "batch_size" => self.batch_size = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "beam_size" => self.beam_size = parse(&key, value)?,
            "max_len" => self.max_len = parse(&key, value)?,
            "no_style" => self.no_style = parse_bool(&key, value)?,
            "no_knowledge_update" => self.no_knowledge_update = parse_bool(&key, value)?,
            "no_coverage" => self.no_coverage = parse_bool(&key, value)?,
            "k_max" => self.k_max = Some(parse(&key, value)?),
            "l_c_max" => self.l_c_max = Some(parse(&key, value)?),
            "l_p_max" => self.l_p_max = Some(parse(&key, value)?),
            "min_freq" => self.min_freq = parse(&key, value)?,
            "max_vocab" => self.max_vocab = parse(&key, value)?,
            "max_steps" => self.max_steps = Some(parse(&key, value)?),
            "execution" => self.execution = parse_execution(value)?,
            "activation" => self.activation = value.parse()?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "dataset" => self.dataset.to_string(),
            "persona_mode" => self.persona_mode.to_string(),
            "hidden" => self.hidden().to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "lr" => self.lr.to_string(),
            "dropout" => self.dropout.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "epochs" => self.epochs().to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "beam_size" => self.beam_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "no_style" => self.no_style.to_string(),
            "no_knowledge_update" => self.no_knowledge_update.to_string(),
            "no_coverage" => self.no_coverage.to_string(),
            "k_max" => self.caps().k_max.to_string(),
            "l_c_max" => self.caps().l_c_max.to_string(),
            "l_p_max" => self.caps().l_p_max.to_string(),
            "min_freq" => self.min_freq.to_string(),
            "max_vocab" => self.max_vocab.to_string(),
            "max_steps" => opt(self.max_steps),
            "execution" => match self.execution {
                Execution::Parallel => "parallel".into(),
                Execution::Sequential => "sequential".into(),
            },
            "activation" => self.activation.to_string(),
            _ => return None,
        };
        Some(v)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let pairs = read_key_values(path)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 || self.hidden() == 0 || self.embed_dim == 0 {
            return bad("batch_size, hidden and embed_dim must be positive");
        }
        if self.beam_size == 0 || self.max_len == 0 {
            return bad("beam_size and max_len must be positive");
        }
        let caps = self.caps();
        if caps.k_max == 0 || caps.l_c_max == 0 || caps.l_p_max == 0 {
            return bad("truncation caps must be positive");
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(match self.dataset {
            Dataset::Convai2 => 800,
            Dataset::Cmudog => 500,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.dataset {
            Dataset::Convai2 => 25,
            Dataset::Cmudog => 35,
        })
    }

    pub fn caps(&self) -> Caps {
        let base = match self.dataset {
            Dataset::Convai2 => Caps::CONVAI2,
            Dataset::Cmudog => Caps::CMUDOG,
        };
        Caps {
            k_max: self.k_max.unwrap_or(base.k_max),
            l_c_max: self.l_c_max.unwrap_or(base.l_c_max),
            l_p_max: self.l_p_max.unwrap_or(base.l_p_max),
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_style: self.no_style,
            no_knowledge_update: self.no_knowledge_update,
            no_coverage: self.no_coverage,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let d = self.hidden();
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: d,
            gru_hidden: d,
            attn_dim: d,
            dropout: self.dropout,
            activation: self.activation,
            ablation: self.ablation(),
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_len: self.max_len,
        }
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_key_values(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap_or_default()))
            .collect()
    }
}
