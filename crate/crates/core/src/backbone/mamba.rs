use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{he_normal, Fwd, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Selective-scan token mixer over `[M, L, d]` sequences.
///
/// `W_in` lifts to `d_in`, which splits into a scan branch and a gate branch.
/// Both pass through a causal depthwise convolution and SiLU; the scan branch
/// also produces the input-dependent `Δ`, `B`, `C`.
#[derive(Clone, Debug)]
pub struct MambaMixer {
    pub in_proj: Linear,
    pub conv_x: ParamId,
    pub conv_z: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out_proj: Linear,
    pub d_half: usize,
    pub rank: usize,
    pub state: usize,
}

impl MambaMixer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        d_in: usize,
        d_state: usize,
        d_conv: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_in == 0 || !d_in.is_multiple_of(2) {
            return Err(Error::Config(format!("mixer inner width {d_in} must be even and positive")));
        }
        let d_half = d_in / 2;
        let rank = dim.div_ceil(16);
        let g = ParamGroup::Backbone;
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), dim, d_in, false, g, rng);
        let conv_x = store.add(format!("{name}.conv_x"), he_normal(&[d_half, d_conv], d_conv, rng), g, true);
        let conv_z = store.add(format!("{name}.conv_z"), he_normal(&[d_half, d_conv], d_conv, rng), g, true);
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), d_half, rank + 2 * d_state, false, g, rng);
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), rank, d_half, true, g, rng);
        let a_log: Vec<f64> = (0..d_half)
            .flat_map(|_| (1..=d_state).map(|n| (n as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::new(vec![d_half, d_state], a_log)?,
            g,
            false,
        );
        let d = store.add(format!("{name}.d"), Tensor::ones(vec![d_half]), g, false);
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), d_in, dim, false, g, rng);
        Ok(MambaMixer {
            in_proj,
            conv_x,
            conv_z,
            x_proj,
            dt_proj,
            a_log,
            d,
            out_proj,
            d_half,
            rank,
            state: d_state,
        })
    }

    pub fn forward(&self, f: &mut Fwd, s: Var) -> Result<Var> {
        let (conv_x, conv_z) = (f.var(self.conv_x), f.var(self.conv_z));
        let (a_log, d) = (f.var(self.a_log), f.var(self.d));
        let xz = self.in_proj.forward(f, s)?;
        let t = &mut *f.tape;
        let xz = t.permute(xz, &[0, 2, 1])?; // [M, d_in, L]
        let x = t.narrow(xz, 1, 0, self.d_half)?;
        let z = t.narrow(xz, 1, self.d_half, self.d_half)?;
        let x = t.depthwise_conv1d(x, conv_x)?;
        let x = t.silu(x);
        let z = t.depthwise_conv1d(z, conv_z)?;
        let z = t.silu(z);

        let x_seq = t.permute(x, &[0, 2, 1])?; // [M, L, d_half]
        let dbl = self.x_proj.forward(f, x_seq)?;
        let t = &mut *f.tape;
        let dt = t.narrow(dbl, 2, 0, self.rank)?;
        let b = t.narrow(dbl, 2, self.rank, self.state)?;
        let c = t.narrow(dbl, 2, self.rank + self.state, self.state)?;
        let b = t.permute(b, &[0, 2, 1])?; // [M, N, L]
        let c = t.permute(c, &[0, 2, 1])?;
        let dt = self.dt_proj.forward(f, dt)?;
        let t = &mut *f.tape;
        let delta = t.softplus(dt);
        let delta = t.permute(delta, &[0, 2, 1])?; // [M, d_half, L]
        let a = t.exp(a_log);
        let a = t.scale(a, -1.0);
        let y = t.selective_scan(x, delta, a, b, c, d)?;

        let cat = t.concat(&[y, z], 1)?;
        let cat = t.permute(cat, &[0, 2, 1])?;
        self.out_proj.forward(f, cat)
    }
}
