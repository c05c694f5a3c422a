use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HsiScene;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub per_class_min: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.02,
            seed: 0,
            per_class_min: 1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// `max(per_class_min, round(f·n))` with rounding half away from zero.
    pub fn train_count(&self, n: usize) -> usize {
        self.per_class_min.max((self.train_fraction * n as f64).round() as usize)
    }
}

/// Flat pixel indices, each list sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn stratified_split(scene: &HsiScene, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); scene.num_classes()];
    for p in scene.labeled_pixels() {
        by_class[scene.class_of(p).expect("labeled")].push(p);
    }
    if by_class.iter().all(Vec::is_empty) {
        return Err(Error::Split("scene has no labeled pixels".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut pixels) in by_class.into_iter().enumerate() {
        let name = &scene.class_names()[c];
        let n = pixels.len();
        if n == 0 {
            return Err(Error::Split(format!("class {} ({name}) has no labeled pixels", c + 1)));
        }
        let k = spec.train_count(n);
        if k >= n {
            return Err(Error::Split(format!(
                "class {} ({name}): {k} training pixels leave none of {n} for testing",
                c + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64);
        pixels.shuffle(&mut rng);
        train.extend_from_slice(&pixels[..k]);
        test.extend_from_slice(&pixels[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}
