use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HsiScene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest side, in pixels, of one class rectangle.
pub const MIN_CELL: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Distance between class mean spectra in units of the noise deviation.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 6,
            bands: 32,
            height: 64,
            width: 64,
            separation: 4.0,
            seed: 0,
        }
    }
}

/// Class `k`'s mean spectrum is `base + (s/√2)·e_k` for orthonormal `e_k`, so
/// every pair of means is exactly `s` apart. Pixels add unit Gaussian noise.
///
/// The scene is a grid of rectangles with classes assigned cyclically.
/// `separation = 0` yields indistinguishable classes.
pub fn make_synthetic_scene(spec: &SynthSpec) -> Result<HsiScene> {
    let SynthSpec {
        num_classes: n,
        bands,
        height: h,
        width: w,
        separation,
        seed,
    } = *spec;
    if n == 0 || n > u16::MAX as usize {
        return Err(Error::Config(format!("num_classes {n} out of range")));
    }
    if n > bands {
        return Err(Error::Config(format!(
            "{n} orthogonal class signatures need at least {n} bands, got {bands}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation {separation} must be finite and non-negative")));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    if h < rows * MIN_CELL || w < cols * MIN_CELL {
        return Err(Error::Config(format!(
            "{h}x{w} grid too small for {n} class regions ({rows}x{cols} cells of at least {MIN_CELL}x{MIN_CELL})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let directions = orthonormal(n, bands, &mut normal);
    let base: Vec<f64> = (0..bands)
        .map(|b| 2.0 + (b as f64 / bands as f64 * std::f64::consts::PI).sin())
        .collect();
    let scale = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = directions
        .iter()
        .map(|e| base.iter().zip(e).map(|(b, d)| b + scale * d).collect())
        .collect();

    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let cell = (r * rows / h) * cols + c * cols / w;
            labels[r * w + c] = (cell % n) as u16 + 1;
        }
    }
    let mut cube = vec![0.0; bands * h * w];
    for p in 0..h * w {
        let mean = &means[labels[p] as usize - 1];
        for b in 0..bands {
            // stored as f32 on disk; keep the in-memory scene representable
            cube[b * h * w + p] = (mean[b] + normal()) as f32 as f64;
        }
    }
    HsiScene::new(
        Tensor::new(vec![bands, h, w], cube)?,
        labels,
        (1..=n).map(|k| format!("class_{k}")).collect(),
    )
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal(n: usize, dim: usize, normal: &mut impl FnMut() -> f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal()).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}
