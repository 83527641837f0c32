//! Versioned checkpoint container: a JSON header followed by the raw
//! little-endian `f64` data of every parameter.
//!
//! ```text
//! "COMVECKPT\n" | u64 LE header length | header JSON | tensor data...
//! ```

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ComveModel, ModelConfig, Task};
use crate::param::{ParamEntry, ParamGroup};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"COMVECKPT\n";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub dev_accuracy: Option<f64>,
}

/// A model's full parameter set with everything needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
    pub params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    task: Task,
    config: ModelConfig,
    vocab: String,
    merges: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorHeader>,
}

impl Checkpoint {
    pub fn from_model(model: &ComveModel, meta: CheckpointMeta) -> Self {
        Self {
            task: model.task,
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            meta,
            params: model.store.entries().to_vec(),
        }
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = &ParamEntry> {
        self.params.iter().filter(move |e| e.group == group)
    }

    /// Rebuilds the model, checking every tensor against the shapes its
    /// config implies.
    pub fn to_model(&self) -> Result<ComveModel> {
        let mut model = ComveModel::init(self.task, &self.config, self.vocab.clone(), 0)?;
        let expected: Vec<&str> = model.store.entries().iter().map(|e| e.name.as_str()).collect();
        let found: Vec<&str> = self.params.iter().map(|e| e.name.as_str()).collect();
        if expected != found {
            return Err(Error::Format(format!(
                "parameter names do not match the config: expected {expected:?}, found {found:?}"
            )));
        }
        let mut bad = BTreeSet::new();
        for (id, entry) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            let slot = model.store.entry(id);
            if slot.group != entry.group || slot.value.shape() != entry.value.shape() {
                bad.insert(group_name(slot.group));
            }
        }
        if !bad.is_empty() {
            return Err(Error::GroupShapes(bad.into_iter().map(String::from).collect()));
        }
        for (id, entry) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            model.store.set(id, entry.value.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            task: self.task,
            config: self.config.clone(),
            vocab: self.vocab.to_vocab_text(),
            merges: self.vocab.to_merges_text(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|e| TensorHeader {
                    name: e.name.clone(),
                    group: e.group,
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let floats: usize = self.params.iter().map(|e| e.value.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.params {
            for x in e.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Format("missing checkpoint magic".into()))?;
        if rest.len() < 8 {
            return Err(Error::Format("truncated header length".into()));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(Error::Format("truncated header".into()));
        }
        let (json, mut data) = rest.split_at(len);
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let vocab = Vocab::from_texts(&header.vocab, &header.merges)?;
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if data.len() < 8 * n {
                return Err(Error::Format(format!("tensor {} is truncated", t.name)));
            }
            let (chunk, tail) = data.split_at(8 * n);
            data = tail;
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.push(ParamEntry {
                name: t.name,
                group: t.group,
                value: Tensor::new(t.shape, values)?,
            });
        }
        if !data.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            task: header.task,
            config: header.config,
            vocab,
            meta: header.meta,
            params,
        })
    }
}

pub fn group_name(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Embeddings => "embeddings",
        ParamGroup::Blocks => "blocks",
        ParamGroup::Fusion => "fusion",
        ParamGroup::Head => "head",
    }
}
