//! On-disk corpus layout and typed loaders.
//!
//! Layout under a dataset root:
//!
//! ```text
//! meta.json                 generation parameters, pretty JSON
//! train/0_x1.ppm            source-domain image
//! train/0_x2.ppm            shifted-domain image of the same scene
//! train/0_y1.pgm            source-domain labels
//! train/0_y2.pgm            shifted-domain labels, evaluation only
//! val/...  test/...
//! ```
//!
//! `PairSet` deliberately has no way to read label files; adaptation code
//! built on it cannot touch annotations even by accident.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm;
use crate::tensor::{LabelMap, Scalar, Tensor};

use super::child_seed;
use super::scene::{generate_scene, SceneSpec};
use super::transform::TransformSpec;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn desk_default() -> Self {
        SplitCounts { train: 2000, val: 200, test: 200 }
    }

    pub fn of(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train),
            "val" => Ok(self.val),
            "test" => Ok(self.test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub scene: SceneSpec,
    pub transform: TransformSpec,
    pub counts: SplitCounts,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.transform.validate()?;
        if self.counts.train == 0 || self.counts.val == 0 || self.counts.test == 0 {
            return Err(Error::invalid("every split needs at least one sample"));
        }
        Ok(())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar (3,S,S) floats to interleaved RGB bytes.
fn planar_to_rgb(image: &[f64], size: usize) -> Vec<u8> {
    let plane = size * size;
    let mut rgb = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            rgb[p * 3 + c] = quantize(image[c * plane + p]);
        }
    }
    rgb
}

pub fn build_dataset(root: &Path, spec: &DatasetSpec) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (tag, split) in SPLITS.iter().enumerate() {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let split_seed = child_seed(spec.seed, tag as u64);
        let n = spec.counts.of(split)?;
        for i in 0..n {
            let scene_seed = child_seed(split_seed, 2 * i as u64);
            let t_seed = child_seed(split_seed, 2 * i as u64 + 1);
            let scene = generate_scene(&spec.scene, scene_seed)?;
            let pair = spec.transform.apply(&scene, t_seed)?;
            let s = pair.size;
            netpbm::write_ppm(&dir.join(format!("{i}_x1.ppm")), s, s, &planar_to_rgb(&pair.x1, s))?;
            netpbm::write_ppm(&dir.join(format!("{i}_x2.ppm")), s, s, &planar_to_rgb(&pair.x2, s))?;
            netpbm::write_pgm(&dir.join(format!("{i}_y1.pgm")), s, s, &pair.y1)?;
            netpbm::write_pgm(&dir.join(format!("{i}_y2.pgm")), s, s, &pair.y2_eval)?;
        }
    }
    let meta = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::internal(format!("manifest serialization: {e}")))?;
    let meta_path = root.join("meta.json");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<DatasetSpec> {
    let path = root.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec: DatasetSpec =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

fn load_image(path: &Path) -> Result<(usize, Vec<u8>)> {
    let (w, h, rgb) = netpbm::read_ppm(path)?;
    if w != h {
        return Err(Error::format(path, format!("expected square image, got {w}x{h}")));
    }
    Ok((w, rgb))
}

fn rgb_to_plane<E: Scalar>(rgb: &[u8], size: usize, out: &mut [E]) {
    let plane = size * size;
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = E::from_f64(rgb[p * 3 + c] as f64 / 255.0);
        }
    }
}

/// Image pairs for annotation-free adaptation. Holds the two renderings of
/// each scene and nothing else.
pub struct PairSet {
    size: usize,
    x1: Vec<Vec<u8>>,
    x2: Vec<Vec<u8>>,
}

impl PairSet {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let spec = load_manifest(root)?;
        let n = spec.counts.of(split)?;
        let dir = root.join(split);
        let mut x1 = Vec::with_capacity(n);
        let mut x2 = Vec::with_capacity(n);
        let mut size = spec.scene.size;
        for i in 0..n {
            let (s1, a) = load_image(&dir.join(format!("{i}_x1.ppm")))?;
            let (s2, b) = load_image(&dir.join(format!("{i}_x2.ppm")))?;
            if s1 != s2 || s1 != size {
                return Err(Error::format(
                    &dir,
                    format!("sample {i}: sizes {s1}/{s2} disagree with manifest {size}"),
                ));
            }
            size = s1;
            x1.push(a);
            x2.push(b);
        }
        Ok(PairSet { size, x1, x2 })
    }

    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Stacks the indexed pairs into two (N,3,S,S) batches: source-domain
    /// images first, shifted-domain images second, same scene order.
    pub fn batch<E: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<E>, Tensor<E>)> {
        let n = indices.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let plane = self.size * self.size;
        let mut a = vec![E::zero(); n * 3 * plane];
        let mut b = vec![E::zero(); n * 3 * plane];
        for (slot, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(Error::invalid(format!("index {idx} out of range {}", self.len())));
            }
            rgb_to_plane(&self.x1[idx], self.size, &mut a[slot * 3 * plane..(slot + 1) * 3 * plane]);
            rgb_to_plane(&self.x2[idx], self.size, &mut b[slot * 3 * plane..(slot + 1) * 3 * plane]);
        }
        let shape = [n, 3, self.size, self.size];
        Ok((Tensor::new(a, &shape)?, Tensor::new(b, &shape)?))
    }
}

/// Which rendering of each scene a labeled loader reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSide {
    /// Source domain: x1 with y1.
    D1,
    /// Shifted domain: x2 with y2. Evaluation only by convention; the type
    /// system does not forbid training on it, the experiment protocol does.
    D2,
}

impl DataSide {
    fn suffix(&self) -> u8 {
        match self {
            DataSide::D1 => 1,
            DataSide::D2 => 2,
        }
    }
}

/// Images plus labels from one side of the corpus.
pub struct LabeledSet {
    size: usize,
    class_count: usize,
    images: Vec<Vec<u8>>,
    labels: Vec<Vec<u8>>,
}

impl LabeledSet {
    pub fn load(root: &Path, split: &str, side: DataSide) -> Result<Self> {
        let spec = load_manifest(root)?;
        let n = spec.counts.of(split)?;
        let dir = root.join(split);
        let sfx = side.suffix();
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let size = spec.scene.size;
        for i in 0..n {
            let (s, img) = load_image(&dir.join(format!("{i}_x{sfx}.ppm")))?;
            let y_path = dir.join(format!("{i}_y{sfx}.pgm"));
            let (wy, hy, y) = netpbm::read_pgm(&y_path)?;
            if s != size || wy != size || hy != size {
                return Err(Error::format(
                    &dir,
                    format!("sample {i}: sizes disagree with manifest {size}"),
                ));
            }
            images.push(img);
            labels.push(y);
        }
        Ok(LabeledSet { size, class_count: spec.scene.class_count, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn batch<E: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<E>, LabelMap)> {
        let n = indices.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let plane = self.size * self.size;
        let mut x = vec![E::zero(); n * 3 * plane];
        let mut y = Vec::with_capacity(n * plane);
        for (slot, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(Error::invalid(format!("index {idx} out of range {}", self.len())));
            }
            rgb_to_plane(&self.images[idx], self.size, &mut x[slot * 3 * plane..(slot + 1) * 3 * plane]);
            y.extend_from_slice(&self.labels[idx]);
        }
        let x = Tensor::new(x, &[n, 3, self.size, self.size])?;
        let y = LabelMap::new(n, self.size, self.size, y)?;
        Ok((x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IGNORE_LABEL;
    use std::fs;

    fn sample_path(root: &Path, split: &str, index: usize, name: &str) -> std::path::PathBuf {
        root.join(split).join(format!("{index}_{name}"))
    }

    fn small_spec(transform: TransformSpec) -> DatasetSpec {
        DatasetSpec {
            seed: 11,
            scene: SceneSpec { size: 32, ..SceneSpec::default() },
            transform,
            counts: SplitCounts { train: 3, val: 2, test: 2 },
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = small_spec(TransformSpec::ripple_default());
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        build_dataset(dir_a.path(), &spec).unwrap();
        build_dataset(dir_b.path(), &spec).unwrap();
        for split in SPLITS {
            let n = spec.counts.of(split).unwrap();
            for i in 0..n {
                for name in ["x1.ppm", "x2.ppm", "y1.pgm", "y2.pgm"] {
                    let a = fs::read(sample_path(dir_a.path(), split, i, name)).unwrap();
                    let b = fs::read(sample_path(dir_b.path(), split, i, name)).unwrap();
                    assert_eq!(a, b, "{split}/{i}_{name}");
                }
            }
        }
        assert_eq!(
            fs::read(dir_a.path().join("meta.json")).unwrap(),
            fs::read(dir_b.path().join("meta.json")).unwrap()
        );
    }

    #[test]
    fn splits_use_distinct_scenes() {
        let spec = small_spec(TransformSpec::None);
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &spec).unwrap();
        let train = fs::read(sample_path(dir.path(), "train", 0, "x1.ppm")).unwrap();
        let val = fs::read(sample_path(dir.path(), "val", 0, "x1.ppm")).unwrap();
        assert_ne!(train, val);
    }

    #[test]
    fn identity_transform_writes_matching_pairs() {
        let spec = small_spec(TransformSpec::None);
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &spec).unwrap();
        let a = fs::read(sample_path(dir.path(), "train", 1, "x1.ppm")).unwrap();
        let b = fs::read(sample_path(dir.path(), "train", 1, "x2.ppm")).unwrap();
        assert_eq!(a, b);
        let ya = fs::read(sample_path(dir.path(), "train", 1, "y1.pgm")).unwrap();
        let yb = fs::read(sample_path(dir.path(), "train", 1, "y2.pgm")).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn manifest_round_trips() {
        let spec = small_spec(TransformSpec::cubism_default());
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &spec).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, spec);
    }

    #[test]
    fn loaders_round_trip_pixels_and_labels() {
        let spec = small_spec(TransformSpec::ripple_default());
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &spec).unwrap();

        let pairs = PairSet::load(dir.path(), "val").unwrap();
        assert_eq!(pairs.len(), 2);
        let (x1, x2) = pairs.batch::<f32>(&[0, 1]).unwrap();
        assert_eq!(x1.shape(), &[2, 3, 32, 32]);
        assert_eq!(x2.shape(), &[2, 3, 32, 32]);
        assert!(x1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let labeled = LabeledSet::load(dir.path(), "val", DataSide::D2).unwrap();
        let (x, y) = labeled.batch::<f32>(&[1]).unwrap();
        assert_eq!(x.shape(), &[1, 3, 32, 32]);
        assert_eq!(y.numel(), 32 * 32);
        assert!(y
            .data
            .iter()
            .all(|&l| (l as usize) < labeled.class_count() || l == IGNORE_LABEL));

        // Same scene, same bytes through both loaders.
        let (xd2, _) = labeled.batch::<f32>(&[0]).unwrap();
        let (_, x2_single) = pairs.batch::<f32>(&[0]).unwrap();
        assert_eq!(xd2.data()[..], x2_single.data()[..3 * 32 * 32]);
    }

    #[test]
    fn side_selects_matching_files() {
        let spec = small_spec(TransformSpec::photocopy_default());
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &spec).unwrap();
        let d1 = LabeledSet::load(dir.path(), "test", DataSide::D1).unwrap();
        let d2 = LabeledSet::load(dir.path(), "test", DataSide::D2).unwrap();
        let (x1, y1) = d1.batch::<f64>(&[0]).unwrap();
        let (x2, y2) = d2.batch::<f64>(&[0]).unwrap();
        assert_ne!(x1.data(), x2.data());
        assert_eq!(y1.data, y2.data); // photocopy keeps geometry
    }

    #[test]
    fn zero_count_split_is_rejected() {
        let mut spec = small_spec(TransformSpec::None);
        spec.counts.val = 0;
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(dir.path(), &spec).is_err());
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Io { .. })));
    }
}
