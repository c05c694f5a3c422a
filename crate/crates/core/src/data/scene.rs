use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCENE_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const CUBE_FILE: &str = "cube.f32";
pub const LABELS_FILE: &str = "labels.u16";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    version: u32,
    bands: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    class_names: Vec<String>,
}

/// A hyperspectral cube with per-pixel labels; label 0 marks unlabeled pixels
/// and classes are `1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiScene {
    /// `[C, H, W]`
    cube: Tensor,
    labels: Vec<u16>,
    class_names: Vec<String>,
}

impl HsiScene {
    pub fn new(cube: Tensor, labels: Vec<u16>, class_names: Vec<String>) -> Result<Self> {
        let s = cube.shape();
        if s.len() != 3 {
            return Err(Error::Format(format!("cube must be [C, H, W], got {s:?}")));
        }
        if labels.len() != s[1] * s[2] {
            return Err(Error::Format(format!(
                "labels: {} entries for a {}x{} scene",
                labels.len(),
                s[1],
                s[2]
            )));
        }
        if let Some(i) = cube.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("cube: non-finite value at element {i}")));
        }
        let n = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > n) {
            return Err(Error::Format(format!("labels: value {bad} exceeds num_classes {n}")));
        }
        Ok(HsiScene {
            cube,
            labels,
            class_names,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SceneMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{META_FILE}: {e}")))?;
        if meta.version != SCENE_VERSION {
            return Err(Error::Format(format!(
                "version: unsupported scene version {} (expected {SCENE_VERSION})",
                meta.version
            )));
        }
        if meta.class_names.len() != meta.num_classes {
            return Err(Error::Format(format!(
                "class_names: {} names for num_classes {}",
                meta.class_names.len(),
                meta.num_classes
            )));
        }
        let (c, h, w) = (meta.bands, meta.height, meta.width);
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Format("bands, height and width must be positive".into()));
        }

        let cube_bytes = read_exact(dir, CUBE_FILE, 4 * c * h * w)?;
        let cube: Vec<f64> = cube_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let label_bytes = read_exact(dir, LABELS_FILE, 2 * h * w)?;
        let labels: Vec<u16> = label_bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        HsiScene::new(Tensor::new(vec![c, h, w], cube)?, labels, meta.class_names)
    }

    /// Writes the three scene files. The cube is stored as f32.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = SceneMeta {
            version: SCENE_VERSION,
            bands: self.bands(),
            height: self.height(),
            width: self.width(),
            num_classes: self.num_classes(),
            class_names: self.class_names.clone(),
        };
        write(dir, META_FILE, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        let cube: Vec<u8> = self.cube.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        write(dir, CUBE_FILE, &cube)?;
        let labels: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        write(dir, LABELS_FILE, &labels)
    }

    pub fn cube(&self) -> &Tensor {
        &self.cube
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn bands(&self) -> usize {
        self.cube.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.cube.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.cube.shape()[2]
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Value of band `c` at flat pixel index `p = row·W + col`.
    pub fn value(&self, c: usize, p: usize) -> f64 {
        self.cube.data()[c * self.height() * self.width() + p]
    }

    /// Zero-based class of pixel `p`, or `None` when unlabeled.
    pub fn class_of(&self, p: usize) -> Option<usize> {
        match self.labels[p] {
            0 => None,
            l => Some(l as usize - 1),
        }
    }

    pub fn labeled_pixels(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| self.labels[p] != 0).collect()
    }

    /// Labeled pixel count per zero-based class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for p in 0..self.labels.len() {
            if let Some(c) = self.class_of(p) {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Declared classes without any labeled pixel.
    pub fn empty_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }
}

fn read_exact(dir: &Path, name: &str, expected: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{name}: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}
