use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{no_hook, Backbone, ModelConfig, PadPlan};
use crate::error::{Error, Result};
use crate::head::ClassifierHead;
use crate::nn::{Fwd, Param, ParamGroup, ParamKind, ParamStore};
use crate::prompts::{Arm, PromptBank, PromptConfig, Prompts};
use crate::tensor::{Tape, Tensor, Var};

/// RNG streams for initialization; prompts draw from their own stream so the
/// backbone and head weights do not depend on the prompt configuration.
const BACKBONE_STREAM: u64 = 0;
const HEAD_STREAM: u64 = 1;
const PROMPT_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The network definition, without parameter values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: Backbone,
    pub prompts: Prompts,
    pub head: ClassifierHead,
}

impl Architecture {
    /// Logits `[B, N]`. `e_t` is the `[B, 512]` text embedding.
    pub fn forward(&self, f: &mut Fwd, images: Var, e_t: Var) -> Result<Var> {
        let prompts = &self.prompts;
        let mut hook = |f: &mut Fwd, level: usize, x: Var| prompts.hook(f, level, x, e_t);
        let (feat, plan) = self.backbone.forward(f, images, &mut hook)?;
        self.head.forward(f, feat, plan.valid_final)
    }

    /// Same network with the prompt hook replaced by the identity.
    pub fn forward_backbone_only(&self, f: &mut Fwd, images: Var) -> Result<Var> {
        let (feat, plan) = self.backbone.forward(f, images, &mut no_hook)?;
        self.head.forward(f, feat, plan.valid_final)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
    pub bank: PromptBank,
}

impl Model {
    pub fn new(config: &ModelConfig, prompt_config: &PromptConfig, bank: PromptBank, seed: u64) -> Result<Self> {
        if prompt_config.task_id >= bank.num_tasks() {
            return Err(Error::TaskId {
                id: prompt_config.task_id,
                tasks: bank.num_tasks(),
            });
        }
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, config, &mut stream(seed, BACKBONE_STREAM))?;
        let head = ClassifierHead::new(
            &mut params,
            config.dim(crate::backbone::LEVELS - 1),
            config.num_classes,
            &mut stream(seed, HEAD_STREAM),
        );
        let prompts = Prompts::new(&mut params, config, prompt_config, &mut stream(seed, PROMPT_STREAM))?;
        Ok(Model {
            arch: Architecture { backbone, prompts, head },
            params,
            bank,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.backbone.config
    }

    pub fn prompt_config(&self) -> &PromptConfig {
        &self.arch.prompts.config
    }

    pub fn set_arm(&mut self, arm: Arm) {
        self.arch.prompts.config = arm.apply(&self.arch.prompts.config);
    }

    /// Whether `p` is updated by the optimizer under the current prompt switches.
    pub fn trains(&self, p: &Param) -> bool {
        p.kind == ParamKind::Learnable && self.prompt_config().trains(p.group)
    }

    /// Number of scalars the optimizer updates under the current prompt switches.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|(_, p)| self.trains(p)).map(|(_, p)| p.value.numel()).sum()
    }

    /// Learnable scalar count per group plus `"total"`.
    pub fn param_counts(&self) -> BTreeMap<String, usize> {
        let groups = [
            ("backbone", ParamGroup::Backbone),
            ("head", ParamGroup::Head),
            ("prompt_shared", ParamGroup::PromptShared),
            ("prompt_text", ParamGroup::PromptText),
            ("prompt_visual", ParamGroup::PromptVisual),
        ];
        let mut out: BTreeMap<String, usize> =
            groups.iter().map(|&(n, g)| (n.to_string(), self.params.count(Some(g)))).collect();
        out.insert("total".into(), self.params.count(None));
        out
    }

    /// Text embedding for a batch of `b` samples under the configured task id.
    pub fn text_embedding(&self, b: usize) -> Result<Tensor> {
        self.bank.select(&vec![self.prompt_config().task_id; b])
    }

    pub fn pad_plan(&self, h: usize, w: usize) -> Result<PadPlan> {
        PadPlan::new(self.config(), h, w)
    }

    /// Inference logits `[B, N]` using running BatchNorm statistics.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let e = self.text_embedding(images.shape()[0])?;
        let x = tape.constant(images.clone());
        let e_t = tape.constant(e);
        let mut f = Fwd::eval(&mut tape, vars, self.params.bn_states());
        let logits = self.arch.forward(&mut f, x, e_t)?;
        Ok(tape.value(logits).clone())
    }

    /// Like [`Model::predict`] with the prompt hook disabled.
    pub fn predict_backbone_only(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(images.clone());
        let mut f = Fwd::eval(&mut tape, vars, self.params.bn_states());
        let logits = self.arch.forward_backbone_only(&mut f, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Predicted class per sample.
    pub fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict(images)?;
        let n = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(n)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}
