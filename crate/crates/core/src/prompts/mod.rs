//! Visual and textual prompting: the embedding bank, the TCSP generator, and
//! the feature fusion applied at selected backbone levels.

mod bank;
mod fusion;
mod tcsp;

pub use bank::{PromptBank, DATA_FILE, EMBED_DIM, META_FILE};
pub use fusion::{PromptFusion, FUSION_HEADS, FUSION_MLP_RATIO};
pub use tcsp::{Tcsp, TcspOutput, VISUAL_PROMPT_INIT};

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Fwd, ParamGroup, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub enabled: bool,
    pub visual_enabled: bool,
    pub text_enabled: bool,
    pub inject_levels: Vec<usize>,
    /// Prompt width; `None` means the channel width of the first injection level.
    pub d_p: Option<usize>,
    pub s_p: usize,
    /// Row of the prompt bank used for every sample.
    pub task_id: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            enabled: true,
            visual_enabled: true,
            text_enabled: true,
            inject_levels: vec![1, 2],
            d_p: None,
            s_p: 16,
            task_id: 0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(&l) = self.inject_levels.iter().find(|&&l| l >= LEVELS) {
            return Err(Error::Config(format!("inject level {l} outside 0..{LEVELS}")));
        }
        let mut sorted = self.inject_levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.inject_levels.len() {
            return Err(Error::Config("inject_levels contains duplicates".into()));
        }
        if self.s_p == 0 || self.d_p == Some(0) {
            return Err(Error::Config("s_p and d_p must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_d_p(&self, model: &ModelConfig) -> usize {
        self.d_p.unwrap_or_else(|| {
            let first = self.inject_levels.iter().min().copied().unwrap_or(0);
            model.dim(first)
        })
    }

    /// Whether the hook changes features at `level`.
    pub fn active_at(&self, level: usize) -> bool {
        self.enabled && self.inject_levels.contains(&level)
    }

    /// Whether parameters of `group` are trained under this configuration.
    pub fn trains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone | ParamGroup::Head => true,
            ParamGroup::PromptShared => self.enabled,
            ParamGroup::PromptText => self.enabled && self.text_enabled,
            ParamGroup::PromptVisual => self.enabled && self.visual_enabled,
        }
    }
}

/// Ablation arms: which prompt modalities are live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    VisualOnly,
    TextOnly,
    NoPrompt,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::VisualOnly, Arm::TextOnly, Arm::NoPrompt];

    pub fn apply(self, base: &PromptConfig) -> PromptConfig {
        let (enabled, visual, text) = match self {
            Arm::Full => (true, true, true),
            Arm::VisualOnly => (true, true, false),
            Arm::TextOnly => (true, false, true),
            Arm::NoPrompt => (false, false, false),
        };
        PromptConfig {
            enabled,
            visual_enabled: visual,
            text_enabled: text,
            ..base.clone()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::VisualOnly => "visual_only",
            Arm::TextOnly => "text_only",
            Arm::NoPrompt => "no_prompt",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?} (full|visual_only|text_only|no_prompt)")))
    }
}

#[derive(Clone, Debug)]
pub struct LevelPrompt {
    pub level: usize,
    pub tcsp: Tcsp,
    pub fusion: PromptFusion,
}

/// One TCSP generator and fusion block per injection level.
#[derive(Clone, Debug)]
pub struct Prompts {
    pub config: PromptConfig,
    pub levels: Vec<LevelPrompt>,
}

impl Prompts {
    /// Instantiated for every configured level regardless of the enable
    /// switches, so all arms share one parameter layout.
    pub fn new(store: &mut ParamStore, model: &ModelConfig, config: &PromptConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d_p = config.resolved_d_p(model);
        let mut levels: Vec<usize> = config.inject_levels.clone();
        levels.sort_unstable();
        let levels = levels
            .into_iter()
            .map(|l| {
                let c_f = model.dim(l);
                let name = format!("prompts.{l}");
                Ok(LevelPrompt {
                    level: l,
                    tcsp: Tcsp::new(store, &format!("{name}.tcsp"), d_p, config.s_p, c_f, rng),
                    fusion: PromptFusion::new(store, &format!("{name}.fusion"), c_f, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Prompts {
            config: config.clone(),
            levels,
        })
    }

    /// The backbone hook: identity unless prompting is active at `level`.
    pub fn hook(&self, f: &mut Fwd, level: usize, feat: Var, e_t: Var) -> Result<Var> {
        if !self.config.active_at(level) {
            return Ok(feat);
        }
        let Some(lp) = self.levels.iter().find(|lp| lp.level == level) else {
            return Ok(feat);
        };
        let s = f.tape.shape(feat).to_vec();
        let out = lp.tcsp.forward(
            f,
            e_t,
            (s[2], s[3]),
            self.config.text_enabled,
            self.config.visual_enabled,
        )?;
        lp.fusion.forward(f, feat, out.prompt)
    }
}
