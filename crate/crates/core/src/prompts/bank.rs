use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 512;
pub const META_FILE: &str = "prompts.meta.json";
pub const DATA_FILE: &str = "prompts.f32";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankMeta {
    #[serde(rename = "T")]
    t: usize,
    dim: usize,
    task_names: Vec<String>,
}

/// Frozen text embeddings `E_clip`, one 512-wide row per task.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    embeddings: Tensor,
    task_names: Vec<String>,
}

impl PromptBank {
    pub fn new(embeddings: Tensor, task_names: Vec<String>) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || s[1] != EMBED_DIM {
            return Err(Error::Format(format!("prompt bank must be [T, {EMBED_DIM}], got {s:?}")));
        }
        if s[0] != task_names.len() {
            return Err(Error::Format(format!(
                "prompt bank has {} rows but {} task names",
                s[0],
                task_names.len()
            )));
        }
        if let Some(i) = embeddings.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite embedding value at row {}, column {} (byte offset {})",
                i / EMBED_DIM,
                i % EMBED_DIM,
                4 * i
            )));
        }
        Ok(PromptBank {
            embeddings,
            task_names,
        })
    }

    /// Unit-norm random rows; a stand-in when no precomputed bank is supplied.
    pub fn synthetic(tasks: usize, seed: u64) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Format("prompt bank needs at least one task".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Tensor::randn(vec![tasks, EMBED_DIM], 1.0, &mut rng);
        for row in e.data_mut().chunks_mut(EMBED_DIM) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        // Rounded through f32 so the bank survives the on-disk format unchanged.
        e.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        PromptBank::new(e, (0..tasks).map(|i| format!("task_{i}")).collect())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BankMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        if meta.t == 0 {
            return Err(Error::Format("prompt bank header declares T = 0".into()));
        }
        if meta.dim != EMBED_DIM {
            return Err(Error::Format(format!("prompt bank dim {} (expected {EMBED_DIM})", meta.dim)));
        }
        if meta.task_names.len() != meta.t {
            return Err(Error::Format(format!(
                "header declares T = {} but lists {} task names",
                meta.t,
                meta.task_names.len()
            )));
        }
        let data_path = dir.join(DATA_FILE);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let expected = meta.t * EMBED_DIM * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{}: expected {expected} bytes for T = {}, found {}",
                DATA_FILE,
                meta.t,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        PromptBank::new(Tensor::new(vec![meta.t, EMBED_DIM], data)?, meta.task_names)
    }

    /// Writes both files; values are narrowed to f32.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = BankMeta {
            t: self.num_tasks(),
            dim: EMBED_DIM,
            task_names: self.task_names.clone(),
        };
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        let bytes: Vec<u8> = self
            .embeddings
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// One-hot selection: row `t` of the bank for every task id, stacked `[B, 512]`.
    pub fn select(&self, task_ids: &[usize]) -> Result<Tensor> {
        let tasks = self.num_tasks();
        let mut data = Vec::with_capacity(task_ids.len() * EMBED_DIM);
        for &id in task_ids {
            if id >= tasks {
                return Err(Error::TaskId { id, tasks });
            }
            data.extend_from_slice(&self.embeddings.data()[id * EMBED_DIM..][..EMBED_DIM]);
        }
        Tensor::new(vec![task_ids.len(), EMBED_DIM], data)
    }

    /// Weighted combination `Σ_i w[:, i] · E[i]` for a `[B, T]` weight matrix.
    pub fn select_soft(&self, weights: &Tensor) -> Result<Tensor> {
        let s = weights.shape();
        if s.len() != 2 || s[1] != self.num_tasks() {
            return Err(Error::shape("select_soft", s, self.embeddings.shape()));
        }
        let mut out = vec![0.0; s[0] * EMBED_DIM];
        for (b, row) in weights.data().chunks(s[1]).enumerate() {
            let dst = &mut out[b * EMBED_DIM..][..EMBED_DIM];
            for (i, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &self.embeddings.data()[i * EMBED_DIM..][..EMBED_DIM];
                for (d, &e) in dst.iter_mut().zip(src) {
                    *d += w * e;
                }
            }
        }
        Tensor::new(vec![s[0], EMBED_DIM], out)
    }
}
