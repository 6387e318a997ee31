//! Synthetic clips with ground-truth flow, sketches, scene curation and I/O.

mod curate;
pub mod io;
mod sketch;
mod synth;

pub use curate::{
    build_training_sets, histogram_1000, histogram_rmse, split_scenes, ClipFilterConfig, HistogramMode, TrainingSet,
    HISTOGRAM_BINS,
};
pub use sketch::{extract_sketch, luma, SKETCH_THRESHOLD};
pub use synth::{
    gen_clip, random_palette, random_scene, render_clip, ClipSpec, Key, Rgb, Scene, Shape, ShapeKind, SyntheticClip,
};
