//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `FIBRCKPT` |
//! | 4 | format version (u32) |
//! | 8 | header length `h` (u64) |
//! | h | UTF-8 JSON header |
//! | rest | payload of `f64` values |
//!
//! The header holds the run configuration text, the stage tag, the chain of
//! stages this checkpoint descends from, the step counter, and a manifest
//! with one entry per tensor: name, dtype (`f64`), shape, byte offset into
//! the payload and optimizer group. Optimizer moments are stored as tensors
//! named `optim.m.<param>` and `optim.v.<param>`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fiber_tensor::Tensor;

use crate::config::{Config, Stage, Task};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::{Group, ParamStore};

pub const MAGIC: &[u8; 8] = b"FIBRCKPT";
pub const VERSION: u32 = 1;
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// What produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointStage {
    Pretrain(Stage),
    Finetune(Task),
}

impl fmt::Display for CheckpointStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointStage::Pretrain(s) => f.write_str(s.as_str()),
            CheckpointStage::Finetune(t) => write!(f, "finetune.{t}"),
        }
    }
}

impl FromStr for CheckpointStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("finetune.") {
            Some(t) => Ok(CheckpointStage::Finetune(t.parse()?)),
            None => Ok(CheckpointStage::Pretrain(s.parse()?)),
        }
    }
}

fn group_str(g: Group) -> &'static str {
    match g {
        Group::Backbone => "backbone",
        Group::CrossModal => "cross_modal",
        Group::Head => "head",
    }
}

fn parse_group(s: &str) -> Result<Group> {
    match s {
        "backbone" => Ok(Group::Backbone),
        "cross_modal" => Ok(Group::CrossModal),
        "head" => Ok(Group::Head),
        _ => Err(Error::Checkpoint(format!("unknown parameter group `{s}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub group: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    stage: String,
    provenance: Vec<String>,
    step: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

/// Optimizer moments, aligned with [`Checkpoint::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub stage: CheckpointStage,
    /// Stages of the checkpoints this one was initialized from, oldest first.
    pub provenance: Vec<String>,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

/// Outcome of loading a checkpoint into a parameter store.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadReport {
    /// Store parameters overwritten from the checkpoint.
    pub loaded: Vec<String>,
    /// Store parameters absent from the checkpoint (left at their initial value).
    pub fresh: Vec<String>,
    /// Checkpoint tensors the store has no slot for.
    pub unused: Vec<String>,
}

impl Checkpoint {
    pub fn from_store(config: &Config, stage: CheckpointStage, provenance: Vec<String>, step: u64, store: &ParamStore, optimizer: Option<&AdamW>) -> Self {
        Self {
            config: config.clone(),
            stage,
            provenance,
            step,
            params: store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.value.clone(),
                })
                .collect(),
            optimizer: optimizer.map(|o| OptimizerState {
                step: o.step,
                m: o.m.clone(),
                v: o.v.clone(),
            }),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Copies every parameter whose name the store knows. A shape mismatch
    /// is an error and leaves the store untouched.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut updates = Vec::new();
        for p in &self.params {
            match store.id(&p.name) {
                Some(id) => {
                    let want = store.value(id).shape();
                    if want != p.tensor.shape() {
                        return Err(Error::Checkpoint(format!(
                            "parameter `{}` has shape {:?} in the checkpoint but {want:?} in the model",
                            p.name,
                            p.tensor.shape()
                        )));
                    }
                    updates.push((id, p.tensor.clone()));
                    report.loaded.push(p.name.clone());
                }
                None => report.unused.push(p.name.clone()),
            }
        }
        for (id, t) in updates {
            store.set(id, t);
        }
        report.fresh = store.names().into_iter().filter(|n| self.get(n).is_none()).collect();
        Ok(report)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, group: Group, t: &Tensor| {
            tensors.push(ManifestEntry {
                name,
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                group: group_str(group).into(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            push(p.name.clone(), p.group, &p.tensor);
        }
        if let Some(o) = &self.optimizer {
            for (p, m) in self.params.iter().zip(&o.m) {
                push(format!("{M_PREFIX}{}", p.name), p.group, m);
            }
            for (p, v) in self.params.iter().zip(&o.v) {
                push(format!("{V_PREFIX}{}", p.name), p.group, v);
            }
        }
        let header = Header {
            config: self.config.to_text(),
            stage: self.stage.to_string(),
            provenance: self.provenance.clone(),
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload = &bytes[payload_start..];
        let config = Config::parse(&header.config)?;
        let stage = header.stage.parse()?;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n = fiber_tensor::numel_of(&e.shape);
            let start = e.offset as usize;
            let end = start.checked_add(n * 8).filter(|&x| x <= payload.len()).ok_or_else(|| bad("tensor extends past the payload"))?;
            let data = payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let tensor = Tensor::new(e.shape.clone(), data)?;
            if e.name.starts_with(M_PREFIX) {
                m.push(tensor);
            } else if e.name.starts_with(V_PREFIX) {
                v.push(tensor);
            } else {
                params.push(NamedTensor {
                    name: e.name.clone(),
                    group: parse_group(&e.group)?,
                    tensor,
                });
            }
        }
        let optimizer = match header.optimizer_step {
            Some(step) if m.len() == params.len() && v.len() == params.len() => Some(OptimizerState { step, m, v }),
            Some(_) => return Err(bad("optimizer state does not cover every parameter")),
            None => None,
        };
        Ok(Self {
            config,
            stage,
            provenance: header.provenance,
            step: header.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Manifest entries in payload order.
    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        let bytes = self.to_bytes()?;
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(&bytes[20..20 + hlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(header.tensors)
    }

    /// Fails unless this checkpoint can initialize `task`.
    pub fn require_for_task(&self, task: Task) -> Result<()> {
        let need = task.required_stage();
        match self.stage {
            CheckpointStage::Pretrain(s) if s == need => Ok(()),
            CheckpointStage::Finetune(t) if t == task => Ok(()),
            other => Err(Error::Stage(format!(
                "task `{task}` starts from a {} pre-training checkpoint, but this checkpoint is `{other}`; run `pretrain-{}` first and pass its checkpoint with --init",
                need.as_str(),
                need.as_str()
            ))),
        }
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
