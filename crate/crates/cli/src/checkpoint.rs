//! Binary checkpoints.
//!
//! ```text
//! magic "VARMAECK" | u32 format | sha256(body) [32 bytes] | body
//! body = u64 header length | header JSON | f64 payload (little endian)
//! ```
//! The header carries configs, the vocabulary and tensor shapes; every float
//! of the model (parameters, batch-norm statistics) lives in the payload, in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use varmae::corpus::Vocabulary;
use varmae::cul::CulConfig;
use varmae::diffcore::{ParamStore, RunningStats, Tensor};
use varmae::downstream::{Representation, TaskModel, TaskSpec};
use varmae::encoder::EncoderConfig;
use varmae::{Model, ModelConfig, Objective};

use crate::error::{CliError, CliResult};
use crate::fsio::{read_input_bytes, write_atomic};

pub const MAGIC: &[u8; 8] = b"VARMAECK";
pub const FORMAT: u32 = 1;

#[derive(Clone, Debug)]
pub enum Body {
    Pretrained { model: Model, objective: Objective },
    Task { model: TaskModel, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub body: Body,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TaskHeader {
    spec: TaskSpec,
    encoder: EncoderConfig,
    cul: CulConfig,
    representation: Representation,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab: String,
    vocab_sha256: String,
    objective: Option<Objective>,
    model: Option<ModelConfig>,
    task: Option<TaskHeader>,
    tensors: Vec<TensorEntry>,
    bn_dim: usize,
    bn_updates: u64,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("checkpoint {}: {msg}", path.display()))
}

impl Checkpoint {
    pub fn pretrained(model: &Model, objective: Objective, vocab: &Vocabulary) -> Self {
        Checkpoint {
            vocab: vocab.clone(),
            body: Body::Pretrained {
                model: model.clone(),
                objective,
            },
        }
    }

    pub fn task(model: &TaskModel, seed: u64, vocab: &Vocabulary) -> Self {
        Checkpoint {
            vocab: vocab.clone(),
            body: Body::Task {
                model: model.clone(),
                seed,
            },
        }
    }

    fn parts(&self) -> (&ParamStore, &RunningStats) {
        match &self.body {
            Body::Pretrained { model, .. } => (&model.params, &model.bn),
            Body::Task { model, .. } => (&model.params, &model.bn),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (params, bn) = self.parts();
        let (objective, model, task) = match &self.body {
            Body::Pretrained { model, objective } => (Some(*objective), Some(model.config.clone()), None),
            Body::Task { model, seed } => (
                None,
                None,
                Some(TaskHeader {
                    spec: model.spec.clone(),
                    encoder: model.encoder.clone(),
                    cul: model.cul.clone(),
                    representation: model.representation,
                    seed: *seed,
                }),
            ),
        };
        let header = Header {
            vocab: self.vocab.to_file_string(),
            vocab_sha256: self.vocab.hash(),
            objective,
            model,
            task,
            tensors: params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.to_string(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            bn_dim: bn.mean.len(),
            bn_updates: bn.updates,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut body = Vec::with_capacity(8 + header.len() + 8 * (params.num_elements() + 2 * bn.mean.len()));
        body.extend_from_slice(&(header.len() as u64).to_le_bytes());
        body.extend_from_slice(&header);
        let floats = params
            .iter()
            .flat_map(|(_, p)| p.tensor.data().iter())
            .chain(&bn.mean)
            .chain(&bn.var);
        for v in floats {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(44 + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        if bytes.len() < 44 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "bad magic header (not a varmae checkpoint)"));
        }
        let format = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if format != FORMAT {
            return Err(corrupt(path, format!("unsupported format {format}")));
        }
        let body = &bytes[44..];
        if Sha256::digest(body).as_slice() != &bytes[12..44] {
            return Err(corrupt(path, "checksum mismatch (truncated or modified)"));
        }
        let hlen = u64::from_le_bytes(body[..8].try_into().map_err(|_| corrupt(path, "truncated"))?) as usize;
        let header_end = 8usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&body[8..header_end]).map_err(|e| corrupt(path, format!("header: {e}")))?;
        let payload = &body[header_end..];
        if !payload.len().is_multiple_of(8) {
            return Err(corrupt(path, "payload is not a whole number of floats"));
        }
        let mut floats = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> CliResult<Vec<f64>> {
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() != n {
                return Err(corrupt(path, "payload shorter than the header says"));
            }
            Ok(v)
        };
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let data = take(t.shape.iter().product())?;
            let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| corrupt(path, e))?;
            params.insert(t.name.clone(), tensor);
        }
        let bn = RunningStats {
            mean: take(header.bn_dim)?,
            var: take(header.bn_dim)?,
            updates: header.bn_updates,
        };
        if floats.next().is_some() {
            return Err(corrupt(path, "payload longer than the header says"));
        }
        let vocab = Vocabulary::from_file_string(&header.vocab).map_err(|e| corrupt(path, format!("vocabulary: {e}")))?;
        if vocab.hash() != header.vocab_sha256 {
            return Err(corrupt(path, "vocabulary hash mismatch"));
        }
        let body = match (header.objective, header.model, header.task) {
            (Some(objective), Some(config), None) => {
                config.validate().map_err(|e| corrupt(path, e))?;
                Body::Pretrained {
                    model: Model { config, params, bn },
                    objective,
                }
            }
            (None, None, Some(t)) => Body::Task {
                model: TaskModel {
                    spec: t.spec,
                    encoder: t.encoder,
                    cul: t.cul,
                    representation: t.representation,
                    params,
                    bn,
                },
                seed: t.seed,
            },
            _ => return Err(corrupt(path, "header is neither a pretrained nor a task checkpoint")),
        };
        Ok(Checkpoint { vocab, body })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_bytes(&read_input_bytes(path, "checkpoint")?, path)
    }
}
