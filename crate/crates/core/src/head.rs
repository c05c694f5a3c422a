use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Fwd, Linear, ParamGroup, ParamStore};
use crate::tensor::Var;

/// BatchNorm, global average pooling over the valid spatial region, linear classifier.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub norm: BatchNorm2d,
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            norm: BatchNorm2d::new(store, "head.norm", channels, ParamGroup::Head),
            fc: Linear::new(store, "head.fc", channels, classes, true, ParamGroup::Head, rng),
        }
    }

    /// `feat` is `[B, C, H, W]`; only the top-left `valid` rows and columns are pooled.
    pub fn forward(&self, f: &mut Fwd, feat: Var, valid: (usize, usize)) -> Result<Var> {
        let s = f.tape.shape(feat).to_vec();
        if s.len() != 4 || valid.0 == 0 || valid.1 == 0 || valid.0 > s[2] || valid.1 > s[3] {
            return Err(Error::Dimension(format!("head: features {s:?}, valid region {valid:?}")));
        }
        let x = self.norm.forward(f, feat)?;
        let x = if valid.0 < s[2] { f.tape.narrow(x, 2, 0, valid.0)? } else { x };
        let x = if valid.1 < s[3] { f.tape.narrow(x, 3, 0, valid.1)? } else { x };
        let x = f.tape.mean_axis(x, 3)?;
        let pooled = f.tape.mean_axis(x, 2)?; // [B, C]
        self.fc.forward(f, pooled)
    }
}
