use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, one slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    /// Number of steps taken.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: usize) -> Self {
        AdamW {
            m: vec![None; params],
            v: vec![None; params],
            t: 0,
        }
    }

    /// One update of every parameter in `grads`. Parameters whose `decay` flag
    /// is off skip weight decay; parameters absent from `grads` are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], hp: &AdamWParams) -> Result<()> {
        for (id, g) in grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in {} at element {i}",
                    store.get(*id).name
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let n = p.value.numel();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            let decay = if p.decay { hp.lr * hp.weight_decay } else { 0.0 };
            let (theta, m, v) = (p.value.data_mut(), m.data_mut(), v.data_mut());
            for k in 0..n {
                let gk = g.data()[k];
                m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * gk;
                v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] -= decay * theta[k];
                theta[k] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
