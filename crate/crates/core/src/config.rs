//! The single JSON document that describes a run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::{make_synthetic_scene, stratified_split, HsiScene, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompts::{Arm, PromptBank, PromptConfig};
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Where the scene and prompt bank come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scene directory (see `HsiScene::load`).
    pub scene: Option<PathBuf>,
    /// Generate the scene in memory instead of loading one.
    pub synthetic: Option<SynthSpec>,
    /// Prompt bank directory; without one a single-task random bank is used.
    pub prompt_bank: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub prompts: PromptConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub data: DataConfig,
    /// Output directory; the `--out` flag takes precedence.
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Config(format!("not found: {}", path.display())))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut cfg = Self::from_json(&text)?;
        // relative data paths are taken relative to the config file and made
        // absolute, so the echoed config can be rerun from any directory
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).map_err(|e| Error::io(path, e))?;
        for p in [&mut cfg.data.scene, &mut cfg.data.prompt_bank, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Pretty-printed document with every default filled in.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(&serde_json::to_value(self).expect("serializable")).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prompts.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        match (&self.data.scene, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config("data.scene and data.synthetic are mutually exclusive".into())),
            (None, None) => Err(Error::Config("one of data.scene or data.synthetic is required".into())),
            _ => Ok(()),
        }
    }

    pub fn scene(&self) -> Result<HsiScene> {
        match (&self.data.scene, &self.data.synthetic) {
            (Some(dir), None) => HsiScene::load(dir),
            (None, Some(spec)) => make_synthetic_scene(spec),
            _ => {
                self.validate()?;
                Err(Error::Config("no data source".into()))
            }
        }
    }

    pub fn bank(&self) -> Result<PromptBank> {
        match &self.data.prompt_bank {
            Some(dir) => PromptBank::load(dir),
            None => PromptBank::synthetic(1, 0),
        }
    }

    /// Freshly initialized model; initialization shares the training seed.
    pub fn build_model(&self) -> Result<Model> {
        Model::new(&self.model, &self.prompts, self.bank()?, self.train.seed)
    }

    /// Loads the data, splits it and trains under `arm`.
    pub fn run(&self, arm: Arm, sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        self.validate()?;
        let scene = self.scene()?;
        let split = stratified_split(&scene, &self.split)?;
        train(self.build_model()?, &scene, &split, &self.split, &self.train, arm, sink)
    }
}
