//! Single-file checkpoint: magic, a JSON header describing every array, then
//! the raw little-endian `f64` payload (parameters, then optimizer moments).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Param, ParamStore};

const MAGIC: &[u8; 8] = b"PERCHAT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub step: u64,
    pub valid_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamSpec {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    train_config: TrainConfig,
    model_config: ModelConfig,
    vocab: Vocabulary,
    epoch: usize,
    step: u64,
    valid_loss: Option<f64>,
    arrays: Vec<ArraySpec>,
    optimizer: Option<AdamSpec>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn new(model: &Model, train_config: &TrainConfig, vocab: &Vocabulary) -> Self {
        Self {
            train_config: train_config.clone(),
            model_config: model.config.clone(),
            vocab: vocab.clone(),
            params: model.params.clone(),
            optimizer: None,
            epoch: 0,
            step: 0,
            valid_loss: None,
        }
    }

    pub fn model(&self) -> Result<Model> {
        if self.model_config.vocab_size != self.vocab.len() {
            return Err(bad(format!(
                "model expects {} tokens, vocabulary has {}",
                self.model_config.vocab_size,
                self.vocab.len()
            )));
        }
        Model::with_params(self.model_config.clone(), self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            train_config: self.train_config.clone(),
            model_config: self.model_config.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            step: self.step,
            valid_loss: self.valid_loss,
            arrays: self
                .params
                .iter()
                .map(|(_, p)| ArraySpec {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| AdamSpec {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
            }),
        };
        let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for (_, p) in self.params.iter() {
                write_f64s(&mut w, &p.data)?;
            }
            if let Some(a) = &self.optimizer {
                for m in &a.m {
                    write_f64s(&mut w, m)?;
                }
                for v in &a.v {
                    write_f64s(&mut w, v)?;
                }
            }
            w.flush()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad(format!("{} is not a checkpoint file", path.display())));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(io)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;

        let mut params = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let data = read_f64s(&mut r, a.rows * a.cols).map_err(io)?;
            params.push(Param {
                name: a.name.clone(),
                rows: a.rows,
                cols: a.cols,
                data,
            });
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(spec) => {
                let mut read_all = || -> std::io::Result<Vec<Vec<f64>>> {
                    header
                        .arrays
                        .iter()
                        .map(|a| read_f64s(&mut r, a.rows * a.cols))
                        .collect()
                };
                let m = read_all().map_err(io)?;
                let v = read_all().map_err(io)?;
                Some(Adam {
                    lr: spec.lr,
                    beta1: spec.beta1,
                    beta2: spec.beta2,
                    eps: spec.eps,
                    t: spec.t,
                    m,
                    v,
                })
            }
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes after payload", rest.len())));
        }
        Ok(Self {
            train_config: header.train_config,
            model_config: header.model_config,
            vocab: header.vocab,
            params: ParamStore::from_params(params),
            optimizer,
            epoch: header.epoch,
            step: header.step,
            valid_loss: header.valid_loss,
        })
    }
}
