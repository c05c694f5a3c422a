//! Hierarchical hybrid Mamba/attention feature extractor.

mod attention;
mod block;
mod mamba;
mod window;

pub use attention::WindowAttention;
pub use block::{HybridBlock, Mixer};
pub use mamba::MambaMixer;
pub use window::{window_partition, window_reverse};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Fwd, ParamGroup, ParamStore};
use crate::tensor::Var;

pub const LEVELS: usize = 4;
/// Total spatial reduction: 4 in the patch embedding, then 2 per downsample.
pub const REDUCTION: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Mamba,
    Attention,
}

/// Mamba for the first `⌊depth/2⌋` blocks of a level, attention after.
pub fn mixer_kind(level_depth: usize, block_index: usize) -> MixerKind {
    if block_index < level_depth / 2 {
        MixerKind::Mamba
    } else {
        MixerKind::Attention
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub num_classes: usize,
    pub base_dim: usize,
    pub depths: [usize; LEVELS],
    pub window_sizes: [usize; LEVELS],
    pub num_heads: [usize; LEVELS],
    pub mlp_ratio: f64,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: f64,
    pub layer_scale_init: f64,
    pub drop_path_max: f64,
    pub qk_norm: bool,
}

impl Default for ModelConfig {
    /// MambaVision-T widths and depths.
    fn default() -> Self {
        ModelConfig {
            in_bands: 224,
            num_classes: 16,
            base_dim: 80,
            depths: [1, 3, 8, 4],
            window_sizes: [8, 8, 14, 7],
            num_heads: [2, 4, 8, 16],
            mlp_ratio: 4.0,
            d_state: 16,
            d_conv: 3,
            expand: 1.0,
            layer_scale_init: 1.0,
            drop_path_max: 0.1,
            qk_norm: true,
        }
    }
}

impl ModelConfig {
    /// A desk-scale configuration used by tests and the smoke runs.
    pub fn tiny(in_bands: usize, num_classes: usize) -> Self {
        ModelConfig {
            in_bands,
            num_classes,
            base_dim: 8,
            depths: [1, 1, 1, 1],
            window_sizes: [8, 8, 8, 8],
            num_heads: [1, 2, 2, 4],
            mlp_ratio: 2.0,
            d_state: 4,
            ..ModelConfig::default()
        }
    }

    pub fn dim(&self, level: usize) -> usize {
        self.base_dim << level
    }

    pub fn d_inner(&self, level: usize) -> usize {
        (self.expand * self.dim(level) as f64).round() as usize
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_bands == 0 || self.num_classes == 0 || self.base_dim == 0 {
            return bad("in_bands, num_classes and base_dim must be positive".into());
        }
        if self.d_state == 0 || self.d_conv == 0 {
            return bad("d_state and d_conv must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || !(self.expand > 0.0) {
            return bad("mlp_ratio and expand must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return bad(format!("drop_path_max {} must lie in [0, 1)", self.drop_path_max));
        }
        for l in 0..LEVELS {
            if self.depths[l] == 0 || self.window_sizes[l] == 0 {
                return bad(format!("level {l}: depth and window size must be positive"));
            }
            let heads = self.num_heads[l];
            if heads == 0 || !self.dim(l).is_multiple_of(heads) {
                return bad(format!("level {l}: dim {} not divisible by {heads} heads", self.dim(l)));
            }
            let d_in = self.d_inner(l);
            if d_in == 0 || !d_in.is_multiple_of(2) {
                return bad(format!("level {l}: expand·d = {d_in} must be even"));
            }
        }
        Ok(())
    }
}

/// Padding and effective windows for one input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadPlan {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// Window actually used per level: `min(w_l, H_l, W_l)`.
    pub windows: [usize; LEVELS],
    /// Rows and columns of the last level that cover real (unpadded) pixels.
    pub valid_final: (usize, usize),
}

impl PadPlan {
    /// Smallest multiples of 32 (searched upwards) at which every level tiles
    /// exactly into its effective window.
    pub fn new(cfg: &ModelConfig, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("empty input image".into()));
        }
        let mut ph = height.div_ceil(REDUCTION) * REDUCTION;
        let mut pw = width.div_ceil(REDUCTION) * REDUCTION;
        for _ in 0..4096 {
            let mut windows = [0; LEVELS];
            let (mut grow_h, mut grow_w) = (false, false);
            for (l, win) in windows.iter_mut().enumerate() {
                let (hl, wl) = (ph >> (l + 2), pw >> (l + 2));
                *win = cfg.window_sizes[l].min(hl).min(wl);
                grow_h |= hl % *win != 0;
                grow_w |= wl % *win != 0;
            }
            if !grow_h && !grow_w {
                return Ok(PadPlan {
                    height,
                    width,
                    padded_height: ph,
                    padded_width: pw,
                    windows,
                    valid_final: (height.div_ceil(REDUCTION), width.div_ceil(REDUCTION)),
                });
            }
            ph += if grow_h { REDUCTION } else { 0 };
            pw += if grow_w { REDUCTION } else { 0 };
        }
        Err(Error::Config(format!(
            "no padding makes windows {:?} tile a {height}x{width} input",
            cfg.window_sizes
        )))
    }
}

/// Two strided 3×3 convolutions, each followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub in_bands: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, d, g) = (cfg.in_bands, cfg.base_dim, ParamGroup::Backbone);
        PatchEmbed {
            conv1: Conv2d::new(store, "patch_embed.conv1", c, d, 3, 2, 1, true, g, rng),
            bn1: BatchNorm2d::new(store, "patch_embed.bn1", d, g),
            conv2: Conv2d::new(store, "patch_embed.conv2", d, d, 3, 2, 1, true, g, rng),
            bn2: BatchNorm2d::new(store, "patch_embed.bn2", d, g),
            in_bands: c,
        }
    }

    /// `[B, C, H, W] → [B, d, ⌈H/4⌉, ⌈W/4⌉]`, reflect-padding to multiples of 4 first.
    pub fn forward(&self, f: &mut Fwd, image: Var) -> Result<Var> {
        let s = f.tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != self.in_bands {
            return Err(Error::Config(format!(
                "patch embedding expects [B, {}, H, W], got {s:?}",
                self.in_bands
            )));
        }
        if s[2] < 4 || s[3] < 4 {
            return Err(Error::Dimension(format!("input {}x{} smaller than 4x4", s[2], s[3])));
        }
        let (ph, pw) = (s[2].next_multiple_of(4) - s[2], s[3].next_multiple_of(4) - s[3]);
        let mut x = image;
        if ph + pw > 0 {
            x = f.tape.reflect_pad2d(x, 0, ph, 0, pw)?;
        }
        let x = self.conv1.forward(f, x)?;
        let x = self.bn1.forward(f, x)?;
        let x = f.tape.relu(x);
        let x = self.conv2.forward(f, x)?;
        let x = self.bn2.forward(f, x)?;
        Ok(f.tape.relu(x))
    }
}

/// Strided 3×3 convolution doubling the channels, then batch norm.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Backbone;
        Downsample {
            conv: Conv2d::new(store, &format!("{name}.conv"), dim, 2 * dim, 3, 2, 1, false, g, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), 2 * dim, g),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let s = f.tape.shape(x);
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Dimension(format!("downsample needs even spatial dims, got {s:?}")));
        }
        let x = self.conv.forward(f, x)?;
        self.bn.forward(f, x)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<HybridBlock>,
    pub downsample: Option<Downsample>,
}

/// Callback run on the `[B, d_l, H_l, W_l]` features after each level's blocks.
pub type Hook<'h> = dyn FnMut(&mut Fwd, usize, Var) -> Result<Var> + 'h;

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = PatchEmbed::new(store, cfg, rng);
        let total = cfg.total_blocks();
        let mut global = 0;
        let mut stages = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let mut blocks = Vec::with_capacity(cfg.depths[l]);
            for i in 0..cfg.depths[l] {
                let p = if total > 1 {
                    cfg.drop_path_max * global as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                let kind = mixer_kind(cfg.depths[l], i);
                blocks.push(HybridBlock::new(store, &format!("levels.{l}.blocks.{i}"), cfg, l, kind, p, rng)?);
                global += 1;
            }
            let downsample = (l + 1 < LEVELS).then(|| Downsample::new(store, &format!("levels.{l}.downsample"), cfg.dim(l), rng));
            stages.push(Stage { blocks, downsample });
        }
        Ok(Backbone {
            config: cfg.clone(),
            patch_embed,
            stages,
        })
    }

    /// Runs every level on an image that already follows `plan`'s padded size.
    ///
    /// Returns the last-level features `[B, 8d, H'/32, W'/32]`.
    pub fn forward_padded(&self, f: &mut Fwd, image: Var, plan: &PadPlan, hook: &mut Hook) -> Result<Var> {
        let b = f.tape.shape(image)[0];
        let mut x = self.patch_embed.forward(f, image)?;
        for (l, stage) in self.stages.iter().enumerate() {
            let s = f.tape.shape(x).to_vec();
            let (h, w) = (s[2], s[3]);
            let win = plan.windows[l];
            let mut u = window_partition(f.tape, x, win)?;
            for block in &stage.blocks {
                u = block.forward(f, u, b)?;
            }
            x = window_reverse(f.tape, u, win, b, h, w)?;
            x = hook(f, l, x)?;
            if let Some(ds) = &stage.downsample {
                x = ds.forward(f, x)?;
            }
        }
        Ok(x)
    }

    /// Pads `image` per [`PadPlan`] and runs [`Backbone::forward_padded`].
    pub fn forward(&self, f: &mut Fwd, image: Var, hook: &mut Hook) -> Result<(Var, PadPlan)> {
        let s = f.tape.shape(image).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("image must be [B,C,H,W], got {s:?}")));
        }
        let plan = PadPlan::new(&self.config, s[2], s[3])?;
        let (ph, pw) = (plan.padded_height - s[2], plan.padded_width - s[3]);
        let padded = if ph + pw > 0 {
            f.tape.reflect_pad2d(image, 0, ph, 0, pw)?
        } else {
            image
        };
        let out = self.forward_padded(f, padded, &plan, hook)?;
        Ok((out, plan))
    }
}

/// Hook that leaves the features untouched.
pub fn no_hook(_: &mut Fwd, _: usize, x: Var) -> Result<Var> {
    Ok(x)
}
