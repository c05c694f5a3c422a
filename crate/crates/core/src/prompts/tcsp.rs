use rand_chacha::ChaCha8Rng;

use super::bank::EMBED_DIM;
use crate::error::Result;
use crate::nn::{Conv2d, Fwd, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{InterpMode, Tensor, Var};

/// Scale applied to the normal draw that initializes the visual prompt.
pub const VISUAL_PROMPT_INIT: f64 = 0.001;

/// Text-conditioned spatial prompt generator for one injection level.
#[derive(Clone, Debug)]
pub struct Tcsp {
    pub w_clip: Linear,
    pub p_v: ParamId,
    pub log_tau: ParamId,
    pub proj_q: Conv2d,
    pub proj_k: Conv2d,
    pub proj_v: Conv2d,
    pub ffn_in: Conv2d,
    pub ffn_dw: Conv2d,
    pub ffn_out: Conv2d,
    pub out: Conv2d,
    pub d_p: usize,
    pub s_p: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TcspOutput {
    /// `[B, C_f, H_f, W_f]`
    pub prompt: Var,
    /// Attention weights `[B, S_p², S_p²]`; every row sums to one.
    pub attention: Var,
    /// Attention output before the gated FFN, `[B, d_p, S_p, S_p]`.
    pub attended: Var,
}

impl Tcsp {
    pub fn new(store: &mut ParamStore, name: &str, d_p: usize, s_p: usize, c_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let sh = ParamGroup::PromptShared;
        let dw = |store: &mut ParamStore, n: &str, rng: &mut ChaCha8Rng| {
            Conv2d::new(store, &format!("{name}.{n}"), d_p, d_p, 3, 1, d_p, true, sh, rng)
        };
        let w_clip = Linear::new(store, &format!("{name}.w_clip"), EMBED_DIM, d_p, false, ParamGroup::PromptText, rng);
        let p_v = store.add(
            format!("{name}.p_v"),
            Tensor::randn(vec![1, d_p, s_p, s_p], VISUAL_PROMPT_INIT, rng),
            ParamGroup::PromptVisual,
            false,
        );
        let log_tau = store.add(format!("{name}.log_tau"), Tensor::zeros(vec![1]), sh, false);
        let proj_q = dw(store, "proj_q", rng);
        let proj_k = dw(store, "proj_k", rng);
        let proj_v = dw(store, "proj_v", rng);
        let ffn_in = Conv2d::new(store, &format!("{name}.ffn_in"), d_p, 2 * d_p, 1, 1, 1, true, sh, rng);
        let ffn_dw = Conv2d::new(store, &format!("{name}.ffn_dw"), 2 * d_p, 2 * d_p, 3, 1, 2 * d_p, true, sh, rng);
        let ffn_out = Conv2d::new(store, &format!("{name}.ffn_out"), d_p, d_p, 1, 1, 1, true, sh, rng);
        let out = Conv2d::new(store, &format!("{name}.out"), d_p, c_f, 3, 1, 1, true, sh, rng);
        Tcsp {
            w_clip,
            p_v,
            log_tau,
            proj_q,
            proj_k,
            proj_v,
            ffn_in,
            ffn_dw,
            ffn_out,
            out,
            d_p,
            s_p,
        }
    }

    /// `e_t` is `[B, 512]`. With `text` off the projected text vector is a
    /// constant ones vector; with `visual` off the visual prompt is all zeros.
    pub fn forward(&self, f: &mut Fwd, e_t: Var, out_hw: (usize, usize), text: bool, visual: bool) -> Result<TcspOutput> {
        let b = f.tape.shape(e_t)[0];
        let (d_p, s_p) = (self.d_p, self.s_p);
        let e = if text {
            self.w_clip.forward(f, e_t)?
        } else {
            f.tape.constant(Tensor::ones(vec![b, d_p]))
        };
        let e = f.tape.reshape(e, &[b, d_p, 1, 1])?;
        let text_map = f.tape.interpolate(e, s_p, s_p, InterpMode::Bilinear)?;
        let p_v = if visual {
            f.var(self.p_v)
        } else {
            f.tape.constant(Tensor::zeros(vec![1, d_p, s_p, s_p]))
        };

        let q = self.proj_q.forward(f, text_map)?;
        let k = self.proj_k.forward(f, p_v)?;
        let v = self.proj_v.forward(f, p_v)?;
        let log_tau = f.var(self.log_tau);
        let t = &mut *f.tape;
        let tokens = s_p * s_p;
        let q = t.reshape(q, &[b, d_p, tokens])?;
        let q = t.transpose(q)?; // [B, S², d_p]
        let k = t.reshape(k, &[1, d_p, tokens])?; // already Kᵀ per sample
        let v = t.reshape(v, &[1, d_p, tokens])?;
        let v = t.transpose(v)?;
        let scores = t.matmul(q, k)?;
        let scores = t.scale(scores, 1.0 / (d_p as f64).sqrt());
        let neg = t.scale(log_tau, -1.0);
        let inv_tau = t.exp(neg);
        let scores = t.mul_scalar(scores, inv_tau)?;
        let attention = t.softmax(scores, 2)?;
        let u = t.matmul(attention, v)?; // [B, S², d_p]
        let u = t.transpose(u)?;
        let attended = t.reshape(u, &[b, d_p, s_p, s_p])?;

        let h = self.ffn_in.forward(f, attended)?;
        let h = self.ffn_dw.forward(f, h)?;
        let gate = f.tape.narrow(h, 1, 0, d_p)?;
        let val = f.tape.narrow(h, 1, d_p, d_p)?;
        let gate = f.tape.gelu(gate);
        let h = f.tape.mul(gate, val)?;
        let fused = self.ffn_out.forward(f, h)?;

        let resized = f.tape.interpolate(fused, out_hw.0, out_hw.1, InterpMode::Bilinear)?;
        let prompt = self.out.forward(f, resized)?;
        Ok(TcspOutput {
            prompt,
            attention,
            attended,
        })
    }
}
