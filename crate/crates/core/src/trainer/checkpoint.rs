use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig};
use crate::backbone::ModelConfig;
use crate::data::{BandStats, SplitSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompts::{Arm, PromptBank, PromptConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VPHYCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    /// Optimizer steps taken; with `train_config.seed` this fixes every
    /// subsequent batch order and DropPath draw.
    pub step: u64,
    pub train_config: TrainConfig,
    pub split: SplitSpec,
    pub arm: Arm,
    pub band_stats: BandStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Length in bytes.
    length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    algorithm: String,
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    version: u32,
    model_config: ModelConfig,
    prompt_config: PromptConfig,
    train_config: TrainConfig,
    split: SplitSpec,
    arm: Arm,
    band_stats: BandStats,
    task_names: Vec<String>,
    step: u64,
    adam_t: u64,
    rng: RngState,
    tensors: BTreeMap<String, TensorEntry>,
}

struct BlobWriter {
    blob: Vec<u8>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl BlobWriter {
    fn put(&mut self, name: String, shape: &[usize], data: &[f64]) {
        let offset = self.blob.len();
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.insert(
            name,
            TensorEntry {
                dtype: "f64".into(),
                shape: shape.to_vec(),
                offset,
                length: data.len() * 8,
            },
        );
    }
}

/// Top-level keys whose values differ between two JSON objects.
pub fn config_diff(a: &Value, b: &Value) -> Vec<String> {
    let empty = serde_json::Map::new();
    let (ma, mb) = (a.as_object().unwrap_or(&empty), b.as_object().unwrap_or(&empty));
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| ma.get(*k) != mb.get(*k)).cloned().collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BlobWriter {
            blob: Vec::new(),
            tensors: BTreeMap::new(),
        };
        for (id, p) in self.model.params.iter() {
            w.put(format!("param/{}", p.name), p.value.shape(), p.value.data());
            if let Some(m) = &self.optimizer.m[id.0] {
                w.put(format!("adam_m/{}", p.name), m.shape(), m.data());
            }
            if let Some(v) = &self.optimizer.v[id.0] {
                w.put(format!("adam_v/{}", p.name), v.shape(), v.data());
            }
        }
        for (name, st) in self.model.params.bn_states() {
            if let Some(m) = &st.running_mean {
                w.put(format!("bn/{name}/running_mean"), &[m.len()], m);
            }
            if let Some(v) = &st.running_var {
                w.put(format!("bn/{name}/running_var"), &[v.len()], v);
            }
        }
        let bank = self.model.bank.embeddings();
        w.put("bank/embeddings".into(), bank.shape(), bank.data());

        let index = Index {
            version: CHECKPOINT_VERSION,
            model_config: self.model.config().clone(),
            prompt_config: self.model.prompt_config().clone(),
            train_config: self.train_config.clone(),
            split: self.split.clone(),
            arm: self.arm,
            band_stats: self.band_stats.clone(),
            task_names: self.model.bank.task_names().to_vec(),
            step: self.step,
            adam_t: self.optimizer.t,
            rng: RngState {
                algorithm: "chacha8".into(),
                seed: self.train_config.seed,
                step: self.step,
            },
            tensors: w.tensors,
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(HEADER + json.len() + w.blob.len() + DIGEST);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < HEADER + DIGEST || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file (bad magic or truncated)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("digest mismatch: file is corrupted".into()));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(HEADER..HEADER.saturating_add(json_len))
            .ok_or_else(|| err(format!("index length {json_len} exceeds file")))?;
        let index: Index = serde_json::from_slice(json).map_err(|e| err(format!("index: {e}")))?;
        if index.version != version {
            return Err(err(format!("index version {} disagrees with header {version}", index.version)));
        }
        let blob = &body[HEADER + json_len..];

        let take = |name: &str| -> Result<Option<Tensor>> {
            let Some(e) = index.tensors.get(name) else {
                return Ok(None);
            };
            let numel: usize = e.shape.iter().product();
            if e.dtype != "f64" || e.length != numel * 8 {
                return Err(err(format!("{name}: bad entry {e:?}")));
            }
            let raw = blob
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| err(format!("{name}: range {}+{} outside blob", e.offset, e.length)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Ok(Some(Tensor::new(e.shape.clone(), data)?))
        };

        let bank_rows = take("bank/embeddings")?.ok_or_else(|| err("missing bank/embeddings".into()))?;
        let bank = PromptBank::new(bank_rows, index.task_names.clone())?;
        let mut model = Model::new(&index.model_config, &index.prompt_config, bank, 0)?;
        let mut optimizer = AdamW::new(model.params.len());
        optimizer.t = index.adam_t;
        let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let value = take(&format!("param/{name}"))?.ok_or_else(|| err(format!("missing parameter {name}")))?;
            let p = model.params.get_mut(id);
            if value.shape() != p.value.shape() {
                return Err(err(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
            optimizer.m[id.0] = take(&format!("adam_m/{name}"))?;
            optimizer.v[id.0] = take(&format!("adam_v/{name}"))?;
        }
        for (name, st) in model.params.bn_states_mut() {
            st.running_mean = take(&format!("bn/{name}/running_mean"))?.map(Tensor::into_data);
            st.running_var = take(&format!("bn/{name}/running_var"))?.map(Tensor::into_data);
        }
        let params_stored = index.tensors.keys().filter(|k| k.starts_with("param/")).count();
        if params_stored != model.params.len() {
            return Err(err(format!(
                "checkpoint holds {params_stored} parameters, model has {}",
                model.params.len()
            )));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            step: index.step,
            train_config: index.train_config,
            split: index.split,
            arm: index.arm,
            band_stats: index.band_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored model matches `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let diff = config_diff(&serde_json::to_value(ck.model.config())?, &serde_json::to_value(expected)?);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint model config differs in: {}",
                diff.join(", ")
            )));
        }
        Ok(ck)
    }
}
