use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Fwd, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::tensor::Var;

/// Multi-head self-attention over `[M, L, d]` without positional encoding.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub q_norm: Option<LayerNorm>,
    pub k_norm: Option<LayerNorm>,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        qk_norm: bool,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        let dh = dim / heads;
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, group, rng);
        let (q_norm, k_norm) = if qk_norm {
            (
                Some(LayerNorm::new(store, &format!("{name}.q_norm"), dh, group)),
                Some(LayerNorm::new(store, &format!("{name}.k_norm"), dh, group)),
            )
        } else {
            (None, None)
        };
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, true, group, rng);
        Ok(WindowAttention {
            qkv,
            q_norm,
            k_norm,
            proj,
            heads,
            dim,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        let (m, l) = (s[0], s[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(f, x)?;
        let qkv = f.tape.reshape(qkv, &[m, l, 3, h, dh])?;
        let qkv = f.tape.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, M, H, L, dh]
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let n = f.tape.narrow(qkv, 0, i, 1)?;
            *p = f.tape.reshape(n, &[m, h, l, dh])?;
        }
        let [mut q, mut k, v] = parts;
        if let (Some(qn), Some(kn)) = (&self.q_norm, &self.k_norm) {
            q = qn.forward(f, q)?;
            k = kn.forward(f, k)?;
        }
        let t = &mut *f.tape;
        let q = t.scale(q, 1.0 / (dh as f64).sqrt());
        let kt = t.transpose(k)?;
        let scores = t.matmul(q, kt)?;
        let attn = t.softmax(scores, 3)?;
        let out = t.matmul(attn, v)?;
        let out = t.permute(out, &[0, 2, 1, 3])?;
        let out = t.reshape(out, &[m, l, self.dim])?;
        self.proj.forward(f, out)
    }
}
