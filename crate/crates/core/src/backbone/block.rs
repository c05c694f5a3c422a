use rand_chacha::ChaCha8Rng;

use super::attention::WindowAttention;
use super::mamba::MambaMixer;
use super::{MixerKind, ModelConfig};
use crate::error::Result;
use crate::nn::{Fwd, LayerNorm, Mlp, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub enum Mixer {
    Mamba(MambaMixer),
    Attention(WindowAttention),
}

impl Mixer {
    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Mamba(_) => MixerKind::Mamba,
            Mixer::Attention(_) => MixerKind::Attention,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        match self {
            Mixer::Mamba(m) => m.forward(f, x),
            Mixer::Attention(a) => a.forward(f, x),
        }
    }
}

/// Pre-norm residual block: a token mixer then an MLP, each with layer scale
/// and DropPath.
#[derive(Clone, Debug)]
pub struct HybridBlock {
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    pub gamma1: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub gamma2: ParamId,
    pub drop_path: f64,
}

impl HybridBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        level: usize,
        kind: MixerKind,
        drop_path: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let dim = cfg.dim(level);
        let g = ParamGroup::Backbone;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim, g);
        let mixer = match kind {
            MixerKind::Mamba => Mixer::Mamba(MambaMixer::new(
                store,
                &format!("{name}.mixer"),
                dim,
                cfg.d_inner(level),
                cfg.d_state,
                cfg.d_conv,
                rng,
            )?),
            MixerKind::Attention => Mixer::Attention(WindowAttention::new(
                store,
                &format!("{name}.mixer"),
                dim,
                cfg.num_heads[level],
                cfg.qk_norm,
                g,
                rng,
            )?),
        };
        let gamma1 = store.add(format!("{name}.gamma1"), Tensor::full(vec![dim], cfg.layer_scale_init), g, false);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim, g);
        let hidden = ((dim as f64) * cfg.mlp_ratio).round().max(1.0) as usize;
        let mlp = Mlp::new(store, &format!("{name}.mlp"), dim, hidden, g, rng);
        let gamma2 = store.add(format!("{name}.gamma2"), Tensor::full(vec![dim], cfg.layer_scale_init), g, false);
        Ok(HybridBlock {
            norm1,
            mixer,
            gamma1,
            norm2,
            mlp,
            gamma2,
            drop_path,
        })
    }

    /// `u` is `[M, L, d]` where the `M` sequences come from `images` images in
    /// order; DropPath decides per image.
    pub fn forward(&self, f: &mut Fwd, u: Var, images: usize) -> Result<Var> {
        let h = self.norm1.forward(f, u)?;
        let h = self.mixer.forward(f, h)?;
        let u = self.residual(f, u, h, self.gamma1, images)?;
        let h = self.norm2.forward(f, u)?;
        let h = self.mlp.forward(f, h)?;
        self.residual(f, u, h, self.gamma2, images)
    }

    fn residual(&self, f: &mut Fwd, u: Var, branch: Var, gamma: ParamId, images: usize) -> Result<Var> {
        let axis = f.tape.shape(branch).len() - 1;
        let mut branch = f.tape.mul_along(branch, f.var(gamma), axis)?;
        let m = f.tape.shape(u)[0];
        if let Some(mask) = f.drop_path_mask(self.drop_path, images) {
            let per_seq = m / images;
            let mask: Vec<f64> = (0..m).map(|i| mask[i / per_seq]).collect();
            let mask = f.tape.constant(Tensor::from_vec(mask));
            branch = f.tape.mul_along(branch, mask, 0)?;
        }
        f.tape.add(u, branch)
    }
}
