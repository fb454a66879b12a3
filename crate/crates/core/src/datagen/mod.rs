//! Synthetic paired-domain segmentation data.
//!
//! A scene is a dark textured background with 1-4 bright geometric shapes;
//! the class of each region is its geometry (disc, square, triangle,
//! ring), not its color, so a domain shift that scrambles colors or
//! displaces content cannot be undone by a trivial color rule. Transforms
//! produce the second domain from the first while keeping content aligned.

mod dataset;
mod scene;
mod transform;

pub use dataset::{build_dataset, load_manifest, DataSide, DatasetSpec, LabeledSet, PairSet, SplitCounts};
pub use scene::{generate_scene, Scene, SceneSpec};
pub use transform::{ripple_source, SamplePair, TransformSpec};

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stream-split a seed so each consumer gets an independent sequence and
/// parallel generation can agree with serial generation.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x517C_C1B7_2722_0A95)))
}
