//! Labeled datasets: MNIST IDX ingestion, binary relabeling, random labels,
//! synthetic generators and a bit-exact cache format.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const MNIST_TRAIN_FILE_SIZE: usize = 60_000;
pub const MNIST_TEST_SIZE: usize = 10_000;
/// Leading rows of the training file used for training; the rest is unused.
pub const MNIST_TRAIN_SIZE: usize = 55_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    True,
    Random,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub labels: LabelKind,
    pub label_seed: Option<u64>,
}

impl Provenance {
    pub fn true_labels() -> Self {
        Self {
            labels: LabelKind::True,
            label_seed: None,
        }
    }
}

/// Features in `[0, 1]^{m×k}` with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<f64>,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != features.nrows() {
            return Err(Error::Dimension {
                what: "labels",
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(v) = features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("features", format!("value {v} outside [0, 1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::invalid("labels", format!("label {y} not in {{-1, +1}}")));
        }
        let features = features.as_standard_layout().into_owned();
        Ok(Self {
            features,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Largest absolute feature value, `max_i ||x_i||_inf`.
    pub fn max_abs_feature(&self) -> f64 {
        self.features.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Fraction of examples labeled +1.
    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&y| y > 0.0).count() as f64 / self.len() as f64
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(
                "n",
                format!("must be in 1..={}, got {n}", self.len()),
            ));
        }
        Ok(Self {
            features: self.features.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            provenance: self.provenance.clone(),
        })
    }

    /// Copies the given rows into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<f64>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = serde_json::json!({
            "rows": self.features.nrows(),
            "cols": self.features.ncols(),
            "provenance": self.provenance,
        });
        Ok(Container::new("dataset", header)?
            .with_array("features", self.features.iter().copied().collect())
            .with_array("labels", self.labels.clone()))
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind("dataset")?;
        #[derive(Deserialize)]
        struct Header {
            rows: usize,
            cols: usize,
            provenance: Provenance,
        }
        let h: Header = c.header_as()?;
        let features = Array2::from_shape_vec((h.rows, h.cols), c.take_array("features")?)
            .map_err(|e| Error::Container(format!("feature shape: {e}")))?;
        Self::new(features, c.take_array("labels")?, h.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Images and digit labels as read from a pair of IDX files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDigits {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub digits: Vec<u8>,
}

impl RawDigits {
    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn head(&self, n: usize) -> RawDigits {
        let px = self.rows * self.cols;
        RawDigits {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..n * px].to_vec(),
            digits: self.digits[..n].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Idx {
            file: file.to_path_buf(),
            field,
            reason: "file truncated".into(),
        })
}

/// Parses an IDX3 image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            file: file.to_path_buf(),
            field: "magic",
            reason: format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = be_u32(bytes, 4, file, "image count")? as usize;
    let rows = be_u32(bytes, 8, file, "rows")? as usize;
    let cols = be_u32(bytes, 12, file, "cols")? as usize;
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::Idx {
            file: file.to_path_buf(),
            field: "pixel data",
            reason: format!("expected {expected} bytes, found {}", body.len()),
        });
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], file: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            file: file.to_path_buf(),
            field: "magic",
            reason: format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = be_u32(bytes, 4, file, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Idx {
            file: file.to_path_buf(),
            field: "label data",
            reason: format!("expected {count} bytes, found {}", body.len()),
        });
    }
    if let Some(d) = body.iter().find(|&&d| d > 9) {
        return Err(Error::Idx {
            file: file.to_path_buf(),
            field: "label value",
            reason: format!("digit {d} outside 0..=9"),
        });
    }
    Ok(body.to_vec())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<RawDigits> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes, images)?;
    let digits = parse_idx_labels(&lbl_bytes, labels)?;
    if digits.len() != count {
        return Err(Error::Idx {
            file: labels.to_path_buf(),
            field: "label count",
            reason: format!("{} labels for {count} images", digits.len()),
        });
    }
    Ok(RawDigits {
        rows,
        cols,
        pixels,
        digits,
    })
}

/// Digits 0-4 become +1, 5-9 become -1; pixels are scaled by 1/255.
pub fn binarize(raw: &RawDigits) -> Result<LabeledDataset> {
    let k = raw.rows * raw.cols;
    let features = Array2::from_shape_vec(
        (raw.len(), k),
        raw.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::invalid("pixels", e.to_string()))?;
    let labels = raw
        .digits
        .iter()
        .map(|&d| match d {
            0..=4 => Ok(1.0),
            5..=9 => Ok(-1.0),
            _ => Err(Error::invalid("digits", format!("{d} is not a digit"))),
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(features, labels, Provenance::true_labels())
}

/// Replaces labels with i.i.d. uniform draws from `{-1, +1}`.
pub fn randomize_labels(data: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut rng = stream_rng(seed, Stream::Labels, 0);
    let labels = (0..data.len())
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    LabeledDataset {
        features: data.features.clone(),
        labels,
        provenance: Provenance {
            labels: LabelKind::Random,
            label_seed: Some(seed),
        },
    }
}

/// Keeps the first 55000 training images and the full test file.
pub fn train_test_split(
    full_train: &RawDigits,
    full_test: &RawDigits,
) -> Result<(RawDigits, RawDigits)> {
    if full_train.len() != MNIST_TRAIN_FILE_SIZE {
        return Err(Error::Dimension {
            what: "MNIST training file",
            expected: MNIST_TRAIN_FILE_SIZE,
            actual: full_train.len(),
        });
    }
    if full_test.len() != MNIST_TEST_SIZE {
        return Err(Error::Dimension {
            what: "MNIST test file",
            expected: MNIST_TEST_SIZE,
            actual: full_test.len(),
        });
    }
    Ok((full_train.head(MNIST_TRAIN_SIZE), full_test.clone()))
}

/// Standard MNIST file paths inside `dir`.
pub fn mnist_paths(dir: &Path) -> [PathBuf; 4] {
    [
        MNIST_TRAIN_IMAGES,
        MNIST_TRAIN_LABELS,
        MNIST_TEST_IMAGES,
        MNIST_TEST_LABELS,
    ]
    .map(|f| dir.join(f))
}

/// Binary MNIST train (55000) and test (10000) sets from a directory of IDX files.
pub fn load_binary_mnist(dir: impl AsRef<Path>) -> Result<(LabeledDataset, LabeledDataset)> {
    let [tr_img, tr_lbl, te_img, te_lbl] = mnist_paths(dir.as_ref());
    let train = load_idx(tr_img, tr_lbl)?;
    let test = load_idx(te_img, te_lbl)?;
    let (train, test) = train_test_split(&train, &test)?;
    Ok((binarize(&train)?, binarize(&test)?))
}

pub mod synthetic {
    //! Small generated datasets for fast tests.

    use super::*;

    fn provenance(seed: u64) -> Provenance {
        Provenance {
            labels: LabelKind::Synthetic,
            label_seed: Some(seed),
        }
    }

    /// Two Gaussian blobs centred at (0.3, 0.3) (label -1) and (0.7, 0.7)
    /// (label +1), clipped to the unit square. With `separable`, points within
    /// `0.05` of the line `x1 + x2 = 1` or on the wrong side are redrawn.
    pub fn gaussian_blobs(m: usize, spread: f64, separable: bool, seed: u64) -> LabeledDataset {
        let mut rng = stream_rng(seed, Stream::Synthetic, 0);
        let noise = Normal::new(0.0, spread).expect("valid spread");
        let mut features = Array2::zeros((m, 2));
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let y: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let centre = if y > 0.0 { 0.7 } else { 0.3 };
            loop {
                let a = (centre + noise.sample(&mut rng)).clamp(0.0, 1.0);
                let b = (centre + noise.sample(&mut rng)).clamp(0.0, 1.0);
                let side = (a + b - 1.0) * y;
                if !separable || side > 0.05 {
                    features[[i, 0]] = a;
                    features[[i, 1]] = b;
                    break;
                }
            }
            labels.push(y);
        }
        LabeledDataset::new(features, labels, provenance(seed)).expect("generated data is valid")
    }

    /// One-dimensional threshold data: label +1 iff `x > 0.5`, with no points
    /// in the gap `(0.4, 0.6)`.
    pub fn threshold_1d(m: usize, seed: u64) -> LabeledDataset {
        let mut rng = stream_rng(seed, Stream::Synthetic, 1);
        let mut features = Array2::zeros((m, 1));
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let x = loop {
                let x: f64 = rng.gen();
                if !(0.4..=0.6).contains(&x) {
                    break x;
                }
            };
            features[[i, 0]] = x;
            labels.push(if x > 0.5 { 1.0 } else { -1.0 });
        }
        LabeledDataset::new(features, labels, provenance(seed)).expect("generated data is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Writes IDX bytes field by field, independently of the parser.
    fn idx_images(count: u32, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&[0, 0, 8, 3]);
        for v in [count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend((0..(count * rows * cols) as usize).map(fill));
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 8, 1];
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lbl");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn all_white_image_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &idx_images(1, 28, 28, |_| 255), &idx_labels(&[3]));
        let data = binarize(&load_idx(ip, lp).unwrap()).unwrap();
        assert_eq!(data.dim(), 784);
        assert!(data.features().iter().all(|&v| v == 1.0));
        assert_eq!(data.labels(), &[1.0]);
    }

    #[test]
    fn two_image_fixture_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let images = idx_images(2, 28, 28, |i| (i % 251) as u8);
        let (ip, lp) = write_pair(dir.path(), &images, &idx_labels(&[4, 5]));
        let raw = load_idx(ip, lp).unwrap();
        assert_eq!((raw.rows, raw.cols, raw.len()), (28, 28, 2));
        assert_eq!(raw.pixels, images[16..]);
        assert_eq!(raw.digits, vec![4, 5]);
        let data = binarize(&raw).unwrap();
        assert_eq!(data.labels(), &[1.0, -1.0]);
        assert_eq!(data.features()[[1, 0]], (784 % 251) as f64 / 255.0);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut images = idx_images(1, 2, 2, |_| 0);
        images[3] = 2;
        let err = parse_idx_images(&images, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Idx { field: "magic", .. }), "{err}");
        let mut labels = idx_labels(&[1]);
        labels[3] = 3;
        assert!(parse_idx_labels(&labels, Path::new("y")).is_err());
    }

    #[test]
    fn truncation_and_count_mismatch_are_rejected() {
        let images = idx_images(2, 2, 2, |_| 7);
        let err = parse_idx_images(&images[..images.len() - 1], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Idx { field: "pixel data", .. }));
        assert!(matches!(
            parse_idx_images(&images[..10], Path::new("x")).unwrap_err(),
            Error::Idx { field: "rows", .. }
        ));

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &images, &idx_labels(&[1, 2, 3]));
        assert!(matches!(
            load_idx(ip, lp).unwrap_err(),
            Error::Idx { field: "label count", .. }
        ));
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[10]), Path::new("l")).unwrap_err(),
            Error::Idx { field: "label value", .. }
        ));
    }

    #[test]
    fn binarize_boundaries() {
        let raw = RawDigits {
            rows: 1,
            cols: 1,
            pixels: vec![0; 10],
            digits: (0..10).collect(),
        };
        let data = binarize(&raw).unwrap();
        let expected: Vec<f64> = (0..10).map(|d| if d <= 4 { 1.0 } else { -1.0 }).collect();
        assert_eq!(data.labels(), expected.as_slice());
        let bad = RawDigits {
            digits: vec![11],
            pixels: vec![0],
            ..raw
        };
        assert!(binarize(&bad).is_err());
    }

    #[test]
    fn random_labels_are_seeded_and_balanced() {
        let data = synthetic::gaussian_blobs(10_000, 0.1, false, 1);
        for seed in [1, 2, 3] {
            let r = randomize_labels(&data, seed);
            assert_eq!(r, randomize_labels(&data, seed));
            assert_eq!(r.features(), data.features());
            assert_eq!(r.provenance().label_seed, Some(seed));
            let mean: f64 = r.labels().iter().sum::<f64>() / r.len() as f64;
            assert!(mean.abs() < 0.03, "seed {seed}: mean {mean}");
        }
        assert_ne!(randomize_labels(&data, 1).labels(), randomize_labels(&data, 2).labels());
    }

    #[test]
    fn split_sizes_are_checked() {
        let make = |n: usize| RawDigits {
            rows: 1,
            cols: 1,
            pixels: vec![0; n],
            digits: vec![0; n],
        };
        let (train, test) = train_test_split(&make(60_000), &make(10_000)).unwrap();
        assert_eq!((train.len(), test.len()), (55_000, 10_000));
        assert!(train_test_split(&make(59_999), &make(10_000)).is_err());
        assert!(train_test_split(&make(60_000), &make(9_000)).is_err());
    }

    #[test]
    fn dataset_cache_roundtrip() {
        let data = randomize_labels(&synthetic::gaussian_blobs(50, 0.2, false, 3), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        data.save(&path).unwrap();
        assert_eq!(LabeledDataset::load(&path).unwrap(), data);
    }

    #[test]
    fn dataset_invariants() {
        let f = Array2::from_elem((2, 1), 0.5);
        assert!(LabeledDataset::new(f.clone(), vec![1.0, 0.0], Provenance::true_labels()).is_err());
        assert!(LabeledDataset::new(Array2::from_elem((1, 1), 1.5), vec![1.0], Provenance::true_labels()).is_err());
        assert!(matches!(
            LabeledDataset::new(Array2::zeros((0, 1)), vec![], Provenance::true_labels()),
            Err(Error::EmptyDataset)
        ));
        assert!(LabeledDataset::new(f, vec![1.0, -1.0], Provenance::true_labels()).is_ok());
    }

    #[test]
    fn separable_blobs_respect_margin() {
        let d = synthetic::gaussian_blobs(500, 0.15, true, 4);
        for (row, &y) in d.features().rows().into_iter().zip(d.labels()) {
            assert!((row[0] + row[1] - 1.0) * y > 0.05);
        }
    }
}
