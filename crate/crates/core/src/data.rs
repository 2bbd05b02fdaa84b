//! Datasets: a two-class synthetic point cloud and IDX-format image files.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, standard_normal, uniform_in};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A classification dataset held in memory, one tensor per sample.
#[derive(Debug, Clone)]
pub struct LabeledSet<T> {
    inputs: Vec<Tensor<T>>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let shape = inputs[0].shape().to_vec();
        if inputs.iter().any(|t| t.shape() != shape) {
            return Err(Error::Consistency("mixed input shapes in one dataset".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} with only {n_classes} classes"
            )));
        }
        Ok(Self { inputs, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty sets
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    pub fn input(&self, i: usize) -> &Tensor<T> {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New set holding copies of the given rows, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "subset index {bad} out of range for {} samples",
                self.len()
            )));
        }
        Self::new(
            idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes,
        )
    }

    /// The first `n` rows.
    pub fn first_n(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Geometry of the synthetic two-class task: one class is a Gaussian blob at
/// the origin, the other a noisy ring around it. The ring's mean radius is
/// several noise standard deviations out, so the classes are cleanly
/// separable until an attacker gets a large perturbation budget.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    /// Standard deviation of the isotropic noise on both classes.
    pub noise_sigma: f64,
    /// Radius of the circle the second class is centered on.
    pub ring_radius: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { noise_sigma: 0.1, ring_radius: 2.0 }
    }
}

/// Draw `n_per_class` samples per class: class 0 first, then class 1.
///
/// Class 0 points are `noise_sigma * z` around the origin; each class 1 point
/// sits at a uniformly random angle on the ring plus the same noise. Streams
/// 0 and 1 of `seed` drive the two classes, so the same seed always yields
/// the same point cloud.
pub fn gen_synthetic<T: Scalar>(
    spec: SyntheticSpec,
    n_per_class: usize,
    seed: u64,
) -> Result<LabeledSet<T>> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be positive".into()));
    }
    let mut inputs = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);

    let mut r0 = rng(derive_seed(seed, 0));
    for _ in 0..n_per_class {
        inputs.push(point(spec.noise_sigma, 0.0, 0.0, &mut r0));
        labels.push(0);
    }
    let mut r1 = rng(derive_seed(seed, 1));
    for _ in 0..n_per_class {
        let theta = uniform_in(&mut r1, 0.0, std::f64::consts::TAU);
        let (cy, cx) = theta.sin_cos();
        inputs.push(point(
            spec.noise_sigma,
            spec.ring_radius * cx,
            spec.ring_radius * cy,
            &mut r1,
        ));
        labels.push(1);
    }
    LabeledSet::new(inputs, labels, 2)
}

fn point<T: Scalar>(sigma: f64, cx: f64, cy: f64, r: &mut ChaCha8Rng) -> Tensor<T> {
    let x = cx + sigma * standard_normal(r);
    let y = cy + sigma * standard_normal(r);
    Tensor::new(vec![2], vec![T::from_f64(x), T::from_f64(y)]).expect("fixed shape")
}

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let Some(raw) = bytes.get(at..at + 4) else {
        return Err(Error::Format(format!("{what}: header ends at byte {}", bytes.len())));
    };
    Ok(u32::from_be_bytes(raw.try_into().expect("4-byte slice")))
}

/// Read an IDX image file (magic 2051) into per-image `[1, rows, cols]`
/// tensors with pixels scaled from `0..=255` to `[0, 1]`.
pub fn read_idx_images<T: Scalar>(path: &Path) -> Result<Vec<Tensor<T>>> {
    let bytes = std::fs::read(path)?;
    let what = path.display().to_string();
    let magic = be_u32(&bytes, 0, &what)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{what}: magic {magic}, expected {IDX_IMAGE_MAGIC} for an image file"
        )));
    }
    let count = be_u32(&bytes, 4, &what)? as usize;
    let rows = be_u32(&bytes, 8, &what)? as usize;
    let cols = be_u32(&bytes, 12, &what)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("{what}: zero image extent {rows}x{cols}")));
    }
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{what}: {} bytes for {count} images of {rows}x{cols}, expected {expected}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let at = 16 + i * rows * cols;
        let data: Vec<T> = bytes[at..at + rows * cols]
            .iter()
            .map(|&p| T::from_f64(p as f64 / 255.0))
            .collect();
        images.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    Ok(images)
}

/// Read an IDX label file (magic 2049) into raw label bytes.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    let what = path.display().to_string();
    let magic = be_u32(&bytes, 0, &what)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{what}: magic {magic}, expected {IDX_LABEL_MAGIC} for a label file"
        )));
    }
    let count = be_u32(&bytes, 4, &what)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Format(format!(
            "{what}: {} bytes for {count} labels, expected {}",
            bytes.len(),
            8 + count
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Which half of an image dataset to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Load one split of the ten-digit image dataset from `dir`, which must hold
/// the four canonical raw IDX files (`train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte`,
/// `t10k-labels-idx1-ubyte`).
pub fn load_mnist<T: Scalar>(dir: &Path, split: Split) -> Result<LabeledSet<T>> {
    let (img_name, lbl_name) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let images = read_idx_images(&dir.join(img_name))?;
    let labels = read_idx_labels(&dir.join(lbl_name))?;
    if images.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{img_name} holds {} images but {lbl_name} holds {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label byte {bad} outside 0..=9")));
    }
    LabeledSet::new(images, labels.iter().map(|&l| l as usize).collect(), 10)
}

/// Directory the image dataset is read from: the `MNIST_DIR` environment
/// variable if set, otherwise `data/mnist` under the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("MNIST_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let a = gen_synthetic::<f32>(SyntheticSpec::default(), 50, 7).unwrap();
        let b = gen_synthetic::<f32>(SyntheticSpec::default(), 50, 7).unwrap();
        let c = gen_synthetic::<f32>(SyntheticSpec::default(), 50, 8).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.input(i), b.input(i));
            assert_eq!(a.label(i), b.label(i));
        }
        assert!((0..a.len()).any(|i| a.input(i) != c.input(i)));
    }

    #[test]
    fn synthetic_class_statistics_match_the_generating_process() {
        // 4000 points per class; sample moments against the process they
        // were drawn from, with bounds several standard errors wide.
        let set = gen_synthetic::<f64>(SyntheticSpec::default(), 4000, 123).unwrap();
        assert_eq!(set.len(), 8000);
        assert_eq!(set.input_shape(), &[2]);

        let (mut sum, mut sumsq, mut n0) = ([0.0f64; 2], [0.0f64; 2], 0usize);
        let mut radii = Vec::new();
        let mut quadrants = [0usize; 4];
        for i in 0..set.len() {
            let p = set.input(i).data();
            if set.label(i) == 0 {
                for d in 0..2 {
                    sum[d] += p[d];
                    sumsq[d] += p[d] * p[d];
                }
                n0 += 1;
            } else {
                radii.push((p[0] * p[0] + p[1] * p[1]).sqrt());
                let q = match (p[0] >= 0.0, p[1] >= 0.0) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (false, false) => 2,
                    (true, false) => 3,
                };
                quadrants[q] += 1;
            }
        }
        assert_eq!(n0, 4000);
        for d in 0..2 {
            let mean = sum[d] / n0 as f64;
            let var = sumsq[d] / n0 as f64 - mean * mean;
            // se(mean) = 0.1/sqrt(4000) ~ 0.0016; se(var) ~ 0.00022
            assert!(mean.abs() < 0.008, "class0 mean[{d}] = {mean}");
            assert!((var - 0.01).abs() < 0.0012, "class0 var[{d}] = {var}");
        }
        // E||c + z|| with ||c|| = 2, z ~ N(0, 0.01 I) is 2 + sigma^2/(2R) + O(sigma^4).
        let mean_r: f64 = radii.iter().sum::<f64>() / radii.len() as f64;
        assert!((mean_r - 2.0).abs() < 0.02, "ring mean radius {mean_r}");
        // Angles cover the circle: every quadrant well populated.
        for (q, &n) in quadrants.iter().enumerate() {
            assert!(n > 600, "quadrant {q} holds only {n} of 4000 ring points");
        }
    }

    #[test]
    fn labeled_set_validates_construction() {
        let t = |v: f32| Tensor::new(vec![1], vec![v]).unwrap();
        assert!(LabeledSet::<f32>::new(vec![], vec![], 2).is_err());
        assert!(LabeledSet::new(vec![t(1.0)], vec![0, 1], 2).is_err());
        assert!(LabeledSet::new(vec![t(1.0)], vec![2], 2).is_err());
        let mixed = vec![t(1.0), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        assert!(LabeledSet::new(mixed, vec![0, 1], 2).is_err());
        let ok = LabeledSet::new(vec![t(1.0), t(2.0)], vec![0, 1], 2).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok.labels(), &[0, 1]);
    }

    #[test]
    fn subset_and_first_n_copy_rows() {
        let set = gen_synthetic::<f32>(SyntheticSpec::default(), 10, 3).unwrap();
        let sub = set.subset(&[19, 0, 5]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.input(0), set.input(19));
        assert_eq!(sub.label(0), 1);
        assert_eq!(sub.label(1), 0);
        assert!(set.subset(&[20]).is_err());
        assert_eq!(set.first_n(4).unwrap().len(), 4);
        assert_eq!(set.first_n(100).unwrap().len(), 20);
    }

    fn idx_image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_label_bytes(count: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_images_roundtrip_with_pixel_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        std::fs::write(&path, idx_image_bytes(2, 2, 3, &pixels)).unwrap();
        let imgs = read_idx_images::<f32>(&path).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].shape(), &[1, 2, 3]);
        assert_eq!(imgs[1].data()[5], (220.0f64 / 255.0) as f32);
        assert_eq!(imgs[0].data()[0], 0.0);
    }

    #[test]
    fn idx_rejects_wrong_magic_truncation_and_bad_labels() {
        let dir = tempfile::tempdir().unwrap();

        let wrong_magic = dir.path().join("wrong_magic");
        let mut b = idx_image_bytes(1, 2, 2, &[0, 0, 0, 0]);
        b[3] = 0x01; // label magic in an image slot
        std::fs::write(&wrong_magic, &b).unwrap();
        assert!(matches!(read_idx_images::<f32>(&wrong_magic), Err(Error::Format(_))));

        let truncated = dir.path().join("truncated");
        let full = idx_image_bytes(2, 2, 2, &[7; 8]);
        std::fs::write(&truncated, &full[..full.len() - 3]).unwrap();
        assert!(matches!(read_idx_images::<f32>(&truncated), Err(Error::Format(_))));

        let short_header = dir.path().join("short_header");
        std::fs::write(&short_header, [0u8, 0, 8]).unwrap();
        assert!(matches!(read_idx_images::<f32>(&short_header), Err(Error::Format(_))));

        let overlong = dir.path().join("overlong");
        let mut b = idx_image_bytes(1, 2, 2, &[1; 4]);
        b.push(99);
        std::fs::write(&overlong, &b).unwrap();
        assert!(matches!(read_idx_images::<f32>(&overlong), Err(Error::Format(_))));

        let bad_count = dir.path().join("bad_count");
        std::fs::write(&bad_count, idx_label_bytes(5, &[0, 1, 2])).unwrap();
        assert!(matches!(read_idx_labels(&bad_count), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_load_checks_cross_file_consistency() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("train-images-idx3-ubyte"),
            idx_image_bytes(2, 2, 2, &[9; 8]),
        )
        .unwrap();
        std::fs::write(
            dir.path().join("train-labels-idx1-ubyte"),
            idx_label_bytes(3, &[1, 2, 3]),
        )
        .unwrap();
        assert!(matches!(
            load_mnist::<f32>(dir.path(), Split::Train),
            Err(Error::Consistency(_))
        ));

        // Count fixed but a label byte out of digit range.
        std::fs::write(
            dir.path().join("train-labels-idx1-ubyte"),
            idx_label_bytes(2, &[1, 10]),
        )
        .unwrap();
        assert!(matches!(
            load_mnist::<f32>(dir.path(), Split::Train),
            Err(Error::Format(_))
        ));

        std::fs::write(
            dir.path().join("train-labels-idx1-ubyte"),
            idx_label_bytes(2, &[1, 9]),
        )
        .unwrap();
        let set = load_mnist::<f32>(dir.path(), Split::Train).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.n_classes(), 10);
        assert_eq!(set.label(1), 9);
    }

    #[test]
    fn real_dataset_loads_when_present() {
        let dir = mnist_dir();
        if !dir.join("t10k-images-idx3-ubyte").exists() {
            eprintln!("skipping: dataset not found at {}", dir.display());
            return;
        }
        let test = load_mnist::<f32>(&dir, Split::Test).unwrap();
        assert_eq!(test.len(), 10_000);
        assert_eq!(test.input_shape(), &[1, 28, 28]);
        // Pixels already scaled into [0,1].
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in test.input(0).data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo >= 0.0 && hi <= 1.0 && hi > 0.5);
    }
}
