//! Loader for document-grounded movie conversations.
//!
//! Two layouts are accepted:
//!
//! * a directory in the published layout, with conversation records under
//!   `Conversations/` and the grounding documents under `WikiData/`, linked
//!   through `wikiDocumentIdx`;
//! * a JSON-lines file with one conversation per line, the grounding document
//!   embedded under a `document` key.
//!
//! Documents are objects keyed by section index (`"0"`, `"1"`, ...). Every
//! turn yields one example whose knowledge list is the sentence split of the
//! section that turn was grounded on (`docIdx`). Both speakers get the same
//! knowledge list.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{Map, Value};

use super::vocab::{SOS, UNK};
use super::{split_sentences, tokenize, DialogueExample, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct Turn {
    #[serde(rename = "docIdx", default)]
    doc_idx: usize,
    text: String,
}

#[derive(Debug, Deserialize)]
struct Conversation {
    history: Vec<Turn>,
    #[serde(rename = "wikiDocumentIdx", default)]
    wiki_document_idx: Option<u64>,
    #[serde(default)]
    document: Option<Map<String, Value>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CmudogStats {
    pub conversations: usize,
    pub turns: usize,
    pub mean_turns: f64,
}

struct Source {
    path: PathBuf,
    conversations: Vec<(PathBuf, usize, Value)>,
    documents: HashMap<u64, Map<String, Value>>,
}

fn json_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            json_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    Ok(())
}

fn read_json(path: &Path, index: usize) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        index,
        message: e.to_string(),
    })
}

fn open(path: &Path) -> Result<Source> {
    let mut conversations = Vec::new();
    let mut documents = HashMap::new();
    if path.is_dir() {
        let conv_dir = path.join("Conversations");
        let wiki_dir = path.join("WikiData");
        let mut files = Vec::new();
        if conv_dir.is_dir() {
            json_files(&conv_dir, &mut files)?;
        } else {
            json_files(path, &mut files)?;
            files.retain(|f| !f.starts_with(&wiki_dir));
        }
        files.sort();
        for (i, f) in files.into_iter().enumerate() {
            let v = read_json(&f, i)?;
            conversations.push((f, i, v));
        }
        if wiki_dir.is_dir() {
            let mut docs = Vec::new();
            json_files(&wiki_dir, &mut docs)?;
            docs.sort();
            for (i, f) in docs.into_iter().enumerate() {
                let Value::Object(doc) = read_json(&f, i)? else {
                    return Err(Error::Record {
                        path: f,
                        index: i,
                        message: "document is not an object".into(),
                    });
                };
                if let Some(idx) = doc.get("wikiDocumentIdx").and_then(Value::as_u64) {
                    documents.insert(idx, doc);
                }
            }
        }
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index = 0;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let v = serde_json::from_str(line).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                index,
                message: e.to_string(),
            })?;
            conversations.push((path.to_path_buf(), index, v));
            index += 1;
        }
    }
    Ok(Source {
        path: path.to_path_buf(),
        conversations,
        documents,
    })
}

fn section_sentences(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::String(s) => out.extend(split_sentences(s)),
        Value::Number(n) => out.push(n.to_string()),
        Value::Array(items) => items.iter().for_each(|v| section_sentences(v, out)),
        Value::Object(map) => map.values().for_each(|v| section_sentences(v, out)),
        Value::Bool(_) | Value::Null => {}
    }
}

fn knowledge(doc: &Map<String, Value>, section: usize) -> Vec<Sentence> {
    let mut sentences = Vec::new();
    match doc.get(&section.to_string()) {
        Some(v) => section_sentences(v, &mut sentences),
        None => doc
            .iter()
            .filter(|(k, _)| k.parse::<usize>().is_ok())
            .for_each(|(_, v)| section_sentences(v, &mut sentences)),
    }
    let out: Vec<Sentence> = sentences
        .iter()
        .map(|s| tokenize(s))
        .filter(|t| !t.is_empty())
        .collect();
    if out.is_empty() {
        vec![vec![UNK.to_string()]]
    } else {
        out
    }
}

impl Source {
    fn parse(&self) -> Result<Vec<(Conversation, Map<String, Value>)>> {
        let mut out = Vec::with_capacity(self.conversations.len());
        for (path, index, value) in &self.conversations {
            let record_err = |message: String| Error::Record {
                path: path.clone(),
                index: *index,
                message,
            };
            let conv: Conversation =
                serde_json::from_value(value.clone()).map_err(|e| record_err(e.to_string()))?;
            let doc = match (&conv.document, conv.wiki_document_idx) {
                (Some(doc), _) => doc.clone(),
                (None, Some(idx)) => self
                    .documents
                    .get(&idx)
                    .cloned()
                    .ok_or_else(|| record_err(format!("unknown wikiDocumentIdx {idx}")))?,
                (None, None) => return Err(record_err("record has no grounding document".into())),
            };
            out.push((conv, doc));
        }
        Ok(out)
    }
}

/// One example per turn. The first turn of a conversation has no prior
/// context, so its context is a single start-of-sequence marker turn.
pub fn load_cmudog(path: impl AsRef<Path>) -> Result<Vec<DialogueExample>> {
    let source = open(path.as_ref())?;
    let mut out = Vec::new();
    for (conv, doc) in source.parse()? {
        let turns: Vec<(Sentence, usize)> = conv
            .history
            .iter()
            .map(|t| (tokenize(&t.text), t.doc_idx))
            .filter(|(tokens, _)| !tokens.is_empty())
            .collect();
        for (i, (response, section)) in turns.iter().enumerate() {
            let context = if i == 0 {
                vec![vec![SOS.to_string()]]
            } else {
                turns[..i].iter().map(|(t, _)| t.clone()).collect()
            };
            let know = knowledge(&doc, *section);
            out.push(DialogueExample {
                persona_a: know.clone(),
                persona_b: know,
                context,
                response: response.clone(),
            });
        }
    }
    Ok(out)
}

pub fn cmudog_stats(path: impl AsRef<Path>) -> Result<CmudogStats> {
    let source = open(path.as_ref())?;
    let mut conversations = 0;
    let mut turns = 0;
    for (index, (_, _, value)) in source.conversations.iter().enumerate() {
        let history = value
            .get("history")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Record {
                path: source.path.clone(),
                index,
                message: "missing history list".into(),
            })?;
        conversations += 1;
        turns += history.len();
    }
    Ok(CmudogStats {
        conversations,
        turns,
        mean_turns: if conversations == 0 {
            0.0
        } else {
            turns as f64 / conversations as f64
        },
    })
}
