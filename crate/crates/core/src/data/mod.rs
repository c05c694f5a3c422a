//! Scene container format, stratified splits, patch extraction and the
//! synthetic scene generator.

mod patch;
mod scene;
mod split;
mod synth;

pub use patch::{BandStats, PatchExtractor, DEFAULT_PATCH};
pub use scene::{HsiScene, CUBE_FILE, LABELS_FILE, META_FILE, SCENE_VERSION};
pub use split::{stratified_split, Split, SplitSpec};
pub use synth::{make_synthetic_scene, SynthSpec, MIN_CELL};
