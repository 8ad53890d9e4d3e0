//! Scene containers, patch sampling, splitting, augmentation and the
//! synthetic scene generator.

pub mod augment;
pub mod manifest;
pub mod patch;
pub mod raster;
pub mod scene;
pub mod split;
pub mod synth;

pub use augment::{augment, build_training_set, Transform};
pub use manifest::{load_dataset, save_dataset, Dataset};
pub use patch::{enumerate_anchors, enumerate_samples, extract_clamped, extract_patch_pair, Anchor, PatchPair};
pub use raster::{read_raster, write_raster, LabelGrid, Raster};
pub use scene::{normalize, BandStats, RasterPair};
pub use split::{object_split, split_objects, Side, SplitPlan};
pub use synth::{synth_generate, synth_uniform, SynthConfig};
