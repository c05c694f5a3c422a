use serde::{Deserialize, Serialize};

use super::HsiScene;
use crate::error::{Error, Result};
use crate::tensor::kernels::mirror_index;
use crate::tensor::Tensor;

pub const DEFAULT_PATCH: usize = 15;

/// Per-band standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    /// Population mean and standard deviation over `pixels`; a zero deviation
    /// is replaced by 1 so constant bands map to 0.
    pub fn from_pixels(scene: &HsiScene, pixels: &[usize]) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Split("band statistics need at least one pixel".into()));
        }
        let n = pixels.len() as f64;
        let mut mean = Vec::with_capacity(scene.bands());
        let mut std = Vec::with_capacity(scene.bands());
        for c in 0..scene.bands() {
            let m = pixels.iter().map(|&p| scene.value(c, p)).sum::<f64>() / n;
            let v = pixels.iter().map(|&p| (scene.value(c, p) - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Ok(BandStats { mean, std })
    }

    pub fn identity(bands: usize) -> Self {
        BandStats {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }
}

/// Cuts standardized, mirror-padded patches centred on pixels.
#[derive(Clone, Debug)]
pub struct PatchExtractor<'a> {
    scene: &'a HsiScene,
    stats: BandStats,
    size: usize,
}

impl<'a> PatchExtractor<'a> {
    pub fn new(scene: &'a HsiScene, stats: BandStats, size: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!("patch size {size} must be odd")));
        }
        if stats.mean.len() != scene.bands() || stats.std.len() != scene.bands() {
            return Err(Error::Config(format!(
                "band statistics cover {} bands, scene has {}",
                stats.mean.len(),
                scene.bands()
            )));
        }
        Ok(PatchExtractor { scene, stats, size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stats(&self) -> &BandStats {
        &self.stats
    }

    fn write(&self, pixel: usize, out: &mut [f64]) {
        let (h, w) = (self.scene.height(), self.scene.width());
        let (row, col) = ((pixel / w) as isize, (pixel % w) as isize);
        let half = (self.size / 2) as isize;
        let p = self.size;
        let rows: Vec<usize> = (0..p as isize).map(|i| mirror_index(row + i - half, h)).collect();
        let cols: Vec<usize> = (0..p as isize).map(|j| mirror_index(col + j - half, w)).collect();
        let plane = h * w;
        let data = self.scene.cube().data();
        for c in 0..self.scene.bands() {
            let (m, s) = (self.stats.mean[c], self.stats.std[c]);
            let band = &data[c * plane..][..plane];
            for (i, &r) in rows.iter().enumerate() {
                for (j, &q) in cols.iter().enumerate() {
                    out[(c * p + i) * p + j] = (band[r * w + q] - m) / s;
                }
            }
        }
    }

    /// `[C, p, p]` patch around `pixel`.
    pub fn patch(&self, pixel: usize) -> Tensor {
        let p = self.size;
        let mut data = vec![0.0; self.scene.bands() * p * p];
        self.write(pixel, &mut data);
        Tensor::new(vec![self.scene.bands(), p, p], data).expect("sized")
    }

    /// Stacked `[B, C, p, p]` patches and the zero-based class of each pixel.
    pub fn batch(&self, pixels: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let p = self.size;
        let per = self.scene.bands() * p * p;
        let mut data = vec![0.0; pixels.len() * per];
        let mut labels = Vec::with_capacity(pixels.len());
        for (k, &px) in pixels.iter().enumerate() {
            let class = self
                .scene
                .class_of(px)
                .ok_or_else(|| Error::Split(format!("pixel {px} is unlabeled")))?;
            labels.push(class);
            self.write(px, &mut data[k * per..][..per]);
        }
        Ok((Tensor::new(vec![pixels.len(), self.scene.bands(), p, p], data)?, labels))
    }
}
