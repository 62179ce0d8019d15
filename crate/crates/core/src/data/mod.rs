//! Synthetic RGB-D scenes, image and depth files, and batching.

mod dataset;
mod io;
mod manifest;
mod scene;

pub use dataset::{assemble, epoch_plan, flip_horizontal, Batch, BatchPlan};
pub use io::{
    decode_pfm, decode_pgm, decode_ppm, encode_pfm, encode_pgm, encode_ppm, load_pfm, load_ppm, save_pfm, save_pgm,
    save_ppm,
};
pub use manifest::{load_manifest_file, load_samples, parse_manifest, write_manifest, ManifestEntry};
pub use scene::{background_depth, gen_synthetic_scene, DepthSample, SceneSpec};
