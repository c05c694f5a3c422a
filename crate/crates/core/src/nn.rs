//! Parameter storage, the forward-pass context, and the small layers shared by
//! the backbone, the prompt modules and the head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BnId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Learnable,
    /// Fixed data carried with the model (the text-embedding bank).
    Frozen,
}

/// Coarse ownership of a parameter, used to decide what an ablation arm trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
    PromptShared,
    PromptText,
    PromptVisual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub group: ParamGroup,
    /// Whether AdamW weight decay applies (false for norms, biases, layer scales).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    bn: Vec<(String, BatchNormState)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup, decay: bool) -> ParamId {
        self.push(name.into(), value, ParamKind::Learnable, group, decay)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name.into(), value, ParamKind::Frozen, group, false)
    }

    fn push(&mut self, name: String, value: Tensor, kind: ParamKind, group: ParamGroup, decay: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            kind,
            group,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.bn.push((name.into(), BatchNormState::new(channels)));
        BnId(self.bn.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn bn_states(&self) -> &[(String, BatchNormState)] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [(String, BatchNormState)] {
        &mut self.bn
    }

    /// Number of learnable scalars, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Learnable && group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`; `track` selects the differentiable ones.
    pub fn bind(&self, tape: &mut Tape, track: impl Fn(&Param) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.kind == ParamKind::Learnable && track(p) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Like [`ParamStore::bind`] with every parameter constant except `overrides`.
    pub fn bind_with(&self, tape: &mut Tape, overrides: &[(ParamId, Var)]) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| match overrides.iter().find(|(id, _)| id.0 == i) {
                Some(&(_, v)) => v,
                None => tape.constant(p.value.clone()),
            })
            .collect()
    }
}

pub enum BnMode<'a> {
    /// Batch statistics; running statistics are updated in place.
    Train(&'a mut [(String, BatchNormState)]),
    Eval(&'a [(String, BatchNormState)]),
}

/// Everything a forward pass needs besides its input.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    vars: Vec<Var>,
    bn: BnMode<'a>,
    drop_rng: Option<ChaCha8Rng>,
}

impl<'a> Fwd<'a> {
    /// Inference: running BN statistics, no DropPath.
    pub fn eval(tape: &'a mut Tape, vars: Vec<Var>, bn: &'a [(String, BatchNormState)]) -> Self {
        Fwd {
            tape,
            vars,
            bn: BnMode::Eval(bn),
            drop_rng: None,
        }
    }

    /// Training: batch BN statistics and DropPath drawn from `rng`.
    pub fn train(tape: &'a mut Tape, vars: Vec<Var>, bn: &'a mut [(String, BatchNormState)], rng: ChaCha8Rng) -> Self {
        Fwd {
            tape,
            vars,
            bn: BnMode::Train(bn),
            drop_rng: Some(rng),
        }
    }

    pub fn training(&self) -> bool {
        matches!(self.bn, BnMode::Train(_))
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn batchnorm(&mut self, id: BnId, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        match &mut self.bn {
            BnMode::Train(states) => self.tape.batchnorm2d(x, gamma, beta, &mut states[id.0].1, true),
            BnMode::Eval(states) => {
                let (name, st) = &states[id.0];
                match (&st.running_mean, &st.running_var) {
                    (Some(m), Some(v)) => self.tape.batch_norm_eval(x, gamma, beta, m, v, st.eps),
                    _ => Err(Error::State(format!("batchnorm {name} has no running statistics"))),
                }
            }
        }
    }

    /// Per-sample keep mask for DropPath, or `None` when the branch is kept as is.
    pub fn drop_path_mask(&mut self, p: f64, samples: usize) -> Option<Vec<f64>> {
        if p <= 0.0 || !self.training() {
            return None;
        }
        let rng = self.drop_rng.as_mut()?;
        if p >= 1.0 {
            return Some(vec![0.0; samples]);
        }
        let keep = 1.0 / (1.0 - p);
        Some(
            (0..samples)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect(),
        )
    }
}

// ── initialization ──────────────────────────────────────────────────────────

/// He-normal initialization, `std = √(2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng)
}

pub const LINEAR_STD: f64 = 0.02;

// ── layers ──────────────────────────────────────────────────────────────────

/// `y = x·W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, group: ParamGroup, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![d_in, d_out], LINEAR_STD, rng),
            group,
            true,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]), group, false));
        Linear { w, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let y = f.tape.matmul(x, f.var(self.w))?;
        match self.b {
            Some(b) => {
                let axis = f.tape.shape(y).len() - 1;
                f.tape.add_along(y, f.var(b), axis)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(vec![d]), group, false),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(vec![d]), group, false),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        f.tape.layer_norm(x, f.var(self.gamma), f.var(self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in / groups * k * k;
        let w = store.add(
            format!("{name}.weight"),
            he_normal(&[c_out, c_in / groups, k, k], fan_in, rng),
            group,
            true,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]), group, false));
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
            groups,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let b = self.b.map(|b| f.var(b));
        f.tape.conv2d(x, f.var(self.w), b, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, group: ParamGroup) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(vec![c]), group, false),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(vec![c]), group, false),
            state: store.add_bn(name, c),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (g, b) = (f.var(self.gamma), f.var(self.beta));
        f.batchnorm(self.state, x, g, b)
    }
}

/// Two-layer GELU perceptron over the last axis.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, group: ParamGroup, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, group, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, group, rng),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.tape.gelu(h);
        self.fc2.forward(f, h)
    }
}
