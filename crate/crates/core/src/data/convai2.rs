//! Loader for the ConvAI2 text format.
//!
//! Each dialogue is a run of numbered lines restarting at 1: first the
//! `your persona:` (and optionally `partner's persona:`) sentences, then one
//! `utterance<TAB>reply[<TAB>...]` line per exchange. Every reply becomes one
//! example whose context is the whole dialogue up to and including the
//! utterance it answers.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::UNK;
use super::{tokenize, DialogueExample, Sentence};
use crate::error::{Error, Result};

const YOUR_PERSONA: &str = "your persona:";
const PARTNER_PERSONA: &str = "partner's persona:";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaMode {
    #[default]
    Original,
    Revised,
}

impl FromStr for PersonaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(PersonaMode::Original),
            "revised" => Ok(PersonaMode::Revised),
            other => Err(Error::Config(format!("unknown persona mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PersonaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PersonaMode::Original => "original",
            PersonaMode::Revised => "revised",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Convai2Stats {
    pub dialogues: usize,
    pub exchanges: usize,
    /// Utterances of both speakers, i.e. two per exchange.
    pub utterances: usize,
}

#[derive(Default)]
struct RawDialogue {
    start_line: usize,
    persona_a: Vec<Sentence>,
    persona_b: Vec<Sentence>,
    exchanges: Vec<(Sentence, Sentence)>,
}

fn non_empty(tokens: Sentence) -> Sentence {
    if tokens.is_empty() {
        vec![UNK.to_string()]
    } else {
        tokens
    }
}

fn check_mode(path: &Path, mode: PersonaMode) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let other = match mode {
        PersonaMode::Original => "revised",
        PersonaMode::Revised => "original",
    };
    if name.contains(other) {
        return Err(Error::Config(format!(
            "{} holds {other} personas but {mode} was requested",
            path.display()
        )));
    }
    Ok(())
}

fn parse(path: &Path, text: &str) -> Result<Vec<RawDialogue>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut dialogues: Vec<RawDialogue> = Vec::new();
    let mut expected = 1usize;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (num, rest) = line
            .split_once(' ')
            .ok_or_else(|| err(line_no, "expected `<number> <text>`".into()))?;
        let n: usize = num
            .parse()
            .map_err(|_| err(line_no, format!("invalid line number {num:?}")))?;
        if n == 1 {
            dialogues.push(RawDialogue {
                start_line: line_no,
                ..Default::default()
            });
        } else if n != expected || dialogues.is_empty() {
            return Err(err(line_no, format!("expected line number {expected} or 1, found {n}")));
        }
        expected = n + 1;
        let d = dialogues.last_mut().expect("a dialogue was opened above");

        let persona = rest
            .strip_prefix(YOUR_PERSONA)
            .map(|s| (true, s))
            .or_else(|| rest.strip_prefix(PARTNER_PERSONA).map(|s| (false, s)));
        if let Some((mine, sentence)) = persona {
            if !d.exchanges.is_empty() {
                return Err(err(line_no, "persona line after dialogue turns".into()));
            }
            let tokens = tokenize(sentence);
            if tokens.is_empty() {
                continue;
            }
            if mine {
                d.persona_a.push(tokens);
            } else {
                d.persona_b.push(tokens);
            }
            continue;
        }

        let mut fields = rest.split('\t');
        let utterance = fields.next().unwrap_or_default();
        let reply = fields
            .next()
            .ok_or_else(|| err(line_no, "exchange line has no reply field".into()))?;
        d.exchanges
            .push((non_empty(tokenize(utterance)), non_empty(tokenize(reply))));
    }
    for d in &dialogues {
        if d.persona_a.is_empty() && !d.exchanges.is_empty() {
            return Err(err(d.start_line, "dialogue has no `your persona:` block".into()));
        }
    }
    Ok(dialogues)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One example per reply. When the file carries no partner persona, the
/// speaker's own persona stands in for it.
pub fn load_convai2(path: impl AsRef<Path>, mode: PersonaMode) -> Result<Vec<DialogueExample>> {
    let path = path.as_ref();
    check_mode(path, mode)?;
    let dialogues = parse(path, &read(path)?)?;
    let mut out = Vec::new();
    for d in dialogues {
        let persona_b = if d.persona_b.is_empty() {
            d.persona_a.clone()
        } else {
            d.persona_b.clone()
        };
        let mut context: Vec<Sentence> = Vec::new();
        for (utterance, reply) in d.exchanges {
            context.push(utterance);
            out.push(DialogueExample {
                persona_a: d.persona_a.clone(),
                persona_b: persona_b.clone(),
                context: context.clone(),
                response: reply.clone(),
            });
            context.push(reply);
        }
    }
    Ok(out)
}

pub fn convai2_stats(path: impl AsRef<Path>) -> Result<Convai2Stats> {
    let path = path.as_ref();
    let dialogues = parse(path, &read(path)?)?;
    let exchanges: usize = dialogues.iter().map(|d| d.exchanges.len()).sum();
    Ok(Convai2Stats {
        dialogues: dialogues.len(),
        exchanges,
        utterances: 2 * exchanges,
    })
}
