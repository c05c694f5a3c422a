use rand_chacha::ChaCha8Rng;

use crate::backbone::WindowAttention;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd, LayerNorm, Mlp, ParamGroup, ParamStore};
use crate::tensor::Var;

pub const FUSION_HEADS: usize = 4;
pub const FUSION_MLP_RATIO: usize = 2;

/// Concatenates features with a prompt map, mixes the `2·C_f` channel tokens
/// with one transformer block, and projects back to `C_f` channels.
#[derive(Clone, Debug)]
pub struct PromptFusion {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub proj: Conv2d,
    pub channels: usize,
}

impl PromptFusion {
    pub fn new(store: &mut ParamStore, name: &str, c_f: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, g) = (2 * c_f, ParamGroup::PromptShared);
        if d % FUSION_HEADS != 0 {
            return Err(Error::Config(format!(
                "{name}: fusion width {d} not divisible by {FUSION_HEADS} heads"
            )));
        }
        Ok(PromptFusion {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g),
            attn: WindowAttention::new(store, &format!("{name}.attn"), d, FUSION_HEADS, false, g, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, FUSION_MLP_RATIO * d, g, rng),
            proj: Conv2d::new(store, &format!("{name}.proj"), d, c_f, 1, 1, 1, true, g, rng),
            channels: c_f,
        })
    }

    pub fn forward(&self, f: &mut Fwd, feat: Var, prompt: Var) -> Result<Var> {
        let s = f.tape.shape(feat).to_vec();
        if f.tape.shape(prompt) != s.as_slice() {
            return Err(Error::shape("fuse_prompt", &s, f.tape.shape(prompt)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = f.tape.concat(&[feat, prompt], 1)?;
        let x = f.tape.reshape(x, &[b, 2 * c, h * w])?;
        let u = f.tape.transpose(x)?; // [B, HW, 2C]
        let a = self.norm1.forward(f, u)?;
        let a = self.attn.forward(f, a)?;
        let u = f.tape.add(u, a)?;
        let m = self.norm2.forward(f, u)?;
        let m = self.mlp.forward(f, m)?;
        let u = f.tape.add(u, m)?;
        let x = f.tape.transpose(u)?;
        let x = f.tape.reshape(x, &[b, 2 * c, h, w])?;
        self.proj.forward(f, x)
    }
}
