//! Dataset loading and the subsets the experiments train on.
//!
//! A [`DatasetSlice`] keeps, besides images and labels, the index of every
//! row in the file it was loaded from, so subsets can be compared by
//! membership.

pub mod idx;

use std::env;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::Section;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::seed;

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_PIXELS: usize = 784;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "SLEEP_REPLAY_DATA";

// Guards floor() against representation error, e.g. 0.03 * 6000.
const FLOOR_TOL: f64 = 1e-9;

fn floor_count(x: f64) -> usize {
    (x + FLOOR_TOL).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Fmnist,
}

impl DatasetId {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fmnist => "fmnist",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fmnist" | "fashion-mnist" | "fashion_mnist" => Ok(DatasetId::Fmnist),
            other => Err(Error::input(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// File names of the four IDX files under `<root>/<dataset>/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

impl DatasetFiles {
    pub fn paths(&self, root: &Path, id: DatasetId, split: Split) -> (PathBuf, PathBuf) {
        let dir = root.join(id.dir_name());
        match split {
            Split::Train => (dir.join(&self.train_images), dir.join(&self.train_labels)),
            Split::Test => (dir.join(&self.test_images), dir.join(&self.test_labels)),
        }
    }
}

/// Dataset root: the explicit path if given, else `$SLEEP_REPLAY_DATA`, else `./data`.
pub fn resolve_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Which half of the two-task split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Classes 0-4.
    First,
    /// Classes 5-9.
    Second,
}

impl Task {
    pub fn classes(self) -> std::ops::Range<usize> {
        match self {
            Task::First => 0..5,
            Task::Second => 5..10,
        }
    }
}

impl TryFrom<u8> for Task {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Task::First),
            2 => Ok(Task::Second),
            other => Err(Error::input(format!("task must be 1 or 2, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSlice<T> {
    images: Matrix<T>,
    labels: Vec<u8>,
    indices: Vec<usize>,
    per_class_counts: [usize; NUM_CLASSES],
    source: DatasetId,
    fraction: f64,
    seed: u64,
}

fn count_classes(labels: &[u8]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for &l in labels {
        counts[l as usize] += 1;
    }
    counts
}

impl<T: Scalar> DatasetSlice<T> {
    /// Wraps in-memory data. Pixels must lie in `[0, 1]` and labels in `0..10`.
    pub fn from_parts(images: Matrix<T>, labels: Vec<u8>, source: DatasetId) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape("DatasetSlice", images.rows(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::input(format!("label {l} out of range")));
        }
        if images
            .data()
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::input("pixel values must lie in [0, 1]"));
        }
        let per_class_counts = count_classes(&labels);
        Ok(Self {
            indices: (0..labels.len()).collect(),
            images,
            labels,
            per_class_counts,
            source,
            fraction: 1.0,
            seed: 0,
        })
    }

    pub fn images(&self) -> &Matrix<T> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Row indices into the originally loaded file.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn per_class_counts(&self) -> [usize; NUM_CLASSES] {
        self.per_class_counts
    }

    pub fn source(&self) -> DatasetId {
        self.source
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn manifest(&self) -> SubsetManifest {
        SubsetManifest {
            source: self.source,
            fraction: self.fraction,
            seed: self.seed,
            per_class_counts: self.per_class_counts,
            len: self.len(),
        }
    }

    /// Rows `local` (positions in this slice), in that order.
    fn select(&self, local: &[usize], fraction: f64, seed: u64) -> Self {
        let labels: Vec<u8> = local.iter().map(|&i| self.labels[i]).collect();
        Self {
            images: self.images.select_rows(local),
            indices: local.iter().map(|&i| self.indices[i]).collect(),
            per_class_counts: count_classes(&labels),
            labels,
            source: self.source,
            fraction,
            seed,
        }
    }

    fn positions_by_class(&self) -> [Vec<usize>; NUM_CLASSES] {
        let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        by_class
    }

    /// Samples the same number of images from every class present.
    ///
    /// The per-class count is `floor(fraction * len / 10)`, capped at the
    /// smallest class present. Sampling is without replacement and the result
    /// is shuffled.
    pub fn balanced_subset(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::input(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let by_class = self.positions_by_class();
        let smallest = by_class
            .iter()
            .map(Vec::len)
            .filter(|&n| n > 0)
            .min()
            .unwrap_or(0);
        let n = floor_count(fraction * self.len() as f64 / NUM_CLASSES as f64).min(smallest);
        if n == 0 {
            let min_fraction = NUM_CLASSES as f64 / self.len().max(1) as f64;
            return Err(Error::input(format!(
                "fraction {fraction} yields 0 images per class; minimum viable fraction is {min_fraction}"
            )));
        }

        let mut rng = seed::rng(seed);
        let mut picks = Vec::with_capacity(n * NUM_CLASSES);
        for mut members in by_class {
            if members.is_empty() {
                continue;
            }
            let (chosen, _) = members.partial_shuffle(&mut rng, n);
            picks.extend_from_slice(chosen);
        }
        picks.shuffle(&mut rng);
        Ok(self.select(&picks, fraction, seed))
    }

    /// A balanced subset in which `target_class` keeps only
    /// `floor(class_fraction * n)` of its `n` images.
    pub fn imbalanced_subset(
        &self,
        base_fraction: f64,
        target_class: usize,
        class_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if target_class >= NUM_CLASSES {
            return Err(Error::input(format!("target class {target_class} out of range")));
        }
        if !(class_fraction > 0.0 && class_fraction <= 1.0) {
            return Err(Error::input(format!(
                "class fraction must lie in (0, 1], got {class_fraction}"
            )));
        }
        let balanced = self.balanced_subset(base_fraction, seed)?;
        let n = balanced.per_class_counts[target_class];
        let keep = floor_count(class_fraction * n as f64);
        if keep == 0 {
            return Err(Error::input(format!(
                "class fraction {class_fraction} leaves class {target_class} empty"
            )));
        }
        let mut seen = 0;
        let local: Vec<usize> = (0..balanced.len())
            .filter(|&i| {
                if balanced.labels[i] as usize != target_class {
                    return true;
                }
                seen += 1;
                seen <= keep
            })
            .collect();
        Ok(balanced.select(&local, base_fraction, seed))
    }

    /// Keeps only the classes of `task`; labels keep their original ids.
    pub fn task_split(&self, task: Task) -> Result<Self> {
        let classes = task.classes();
        let local: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&(self.labels[i] as usize)))
            .collect();
        if local.is_empty() {
            return Err(Error::input(format!("no images of {task:?} in slice")));
        }
        Ok(self.select(&local, self.fraction, self.seed))
    }

    /// Class-stratified split into `(train, valid)`; each class holds out
    /// `floor(holdout_fraction * count)` images. Both parts keep slice order.
    pub fn validation_split(&self, holdout_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
            return Err(Error::input(format!(
                "holdout fraction must lie in (0, 1), got {holdout_fraction}"
            )));
        }
        let mut rng = seed::rng(seed);
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (class, mut members) in self.positions_by_class().into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let k = floor_count(holdout_fraction * members.len() as f64);
            if k == members.len() {
                return Err(Error::input(format!(
                    "holdout leaves class {class} without training images"
                )));
            }
            let (held, rest) = members.partial_shuffle(&mut rng, k);
            valid.extend_from_slice(held);
            train.extend_from_slice(rest);
        }
        if valid.is_empty() {
            return Err(Error::input("holdout fraction selects no validation images"));
        }
        train.sort_unstable();
        valid.sort_unstable();
        Ok((
            self.select(&train, self.fraction, self.seed),
            self.select(&valid, self.fraction, self.seed),
        ))
    }

    /// Rows of `self` whose source index does not occur in `other`.
    pub fn without(&self, other: &Self) -> Result<Self> {
        let drop: std::collections::HashSet<usize> = other.indices.iter().copied().collect();
        let local: Vec<usize> = (0..self.len()).filter(|&i| !drop.contains(&self.indices[i])).collect();
        if local.is_empty() {
            return Err(Error::input("no rows left after exclusion"));
        }
        Ok(self.select(&local, self.fraction, self.seed))
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let images = self.images.vstack(&other.images)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        Ok(Self {
            images,
            per_class_counts: count_classes(&labels),
            labels,
            indices,
            source: self.source,
            fraction: self.fraction,
            seed: self.seed,
        })
    }
}

/// Loads an image/label IDX pair, scaling pixels to `[0, 1]`.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    source: DatasetId,
) -> Result<DatasetSlice<T>> {
    let raw = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    slice_from_idx(raw, labels, source)
}

pub fn slice_from_idx<T: Scalar>(
    raw: idx::IdxImages,
    labels: Vec<u8>,
    source: DatasetId,
) -> Result<DatasetSlice<T>> {
    if raw.count != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            raw.count,
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Format(format!("label {l} out of range")));
    }
    let scale = T::lit(1.0 / 255.0);
    let data = raw.pixels.iter().map(|&b| T::lit(b as f64) * scale).collect();
    let images = Matrix::new(raw.count, raw.rows * raw.cols, data)?;
    DatasetSlice::from_parts(images, labels, source)
}

pub fn load_split<T: Scalar>(
    root: &Path,
    id: DatasetId,
    split: Split,
    files: &DatasetFiles,
) -> Result<DatasetSlice<T>> {
    let (images, labels) = files.paths(root, id, split);
    load_idx(images, labels, id)
}

/// Running per-pixel mean over every image seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMean<T> {
    mean: Vec<T>,
    sample_count: usize,
}

impl<T: Scalar> PixelMean<T> {
    pub fn new(mean: Vec<T>, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::input("pixel mean needs at least one sample"));
        }
        if mean.iter().any(|&m| !(m >= T::zero() && m <= T::one())) {
            return Err(Error::input("pixel means must lie in [0, 1]"));
        }
        Ok(Self { mean, sample_count })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// One `count` line followed by one mean per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("count={}\n", self.sample_count);
        for m in &self.mean {
            s.push_str(&format!("{:e}\n", m.as_f64()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let count = lines
            .next()
            .and_then(|l| l.strip_prefix("count="))
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Format("pixel mean file lacks a count line".into()))?;
        let mean = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::Format(format!("bad pixel mean '{l}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(mean, count)
    }
}

/// Folds `data` into the running mean `prior` (count-weighted).
pub fn update_pixel_mean<T: Scalar>(
    prior: Option<&PixelMean<T>>,
    data: &DatasetSlice<T>,
) -> Result<PixelMean<T>> {
    if data.is_empty() {
        return Err(Error::input("cannot update pixel mean from an empty slice"));
    }
    let width = data.images.cols();
    let mut sums = vec![T::zero(); width];
    for row in data.images.iter_rows() {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut count = data.len();
    if let Some(p) = prior {
        if p.mean.len() != width {
            return Err(Error::shape("update_pixel_mean", p.mean.len(), width));
        }
        let weight = T::lit(p.sample_count as f64);
        for (s, &m) in sums.iter_mut().zip(&p.mean) {
            *s += m * weight;
        }
        count += p.sample_count;
    }
    let denom = T::lit(count as f64);
    let mean = sums
        .into_iter()
        .map(|s| (s / denom).max(T::zero()).min(T::one()))
        .collect();
    PixelMean::new(mean, count)
}

/// Provenance of a subset, enough to regenerate it from the source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub source: DatasetId,
    pub fraction: f64,
    pub seed: u64,
    pub per_class_counts: [usize; NUM_CLASSES],
    pub len: usize,
}

impl SubsetManifest {
    pub fn to_section(&self) -> Section {
        let mut s = Section::new();
        s.set("source", self.source);
        s.set("fraction", self.fraction);
        s.set("seed", self.seed);
        s.set(
            "per_class_counts",
            self.per_class_counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s.set("len", self.len);
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let counts: Vec<usize> = s.get_list("per_class_counts")?.unwrap_or_default();
        let per_class_counts: [usize; NUM_CLASSES] = counts
            .try_into()
            .map_err(|_| Error::Config("per_class_counts needs 10 entries".into()))?;
        Ok(Self {
            source: s.require("source")?,
            fraction: s.require("fraction")?,
            seed: s.require("seed")?,
            per_class_counts,
            len: s.require("len")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// 10 classes with `per_class` images each; pixel 0 encodes the row.
    fn synthetic(per_class: usize) -> DatasetSlice<f64> {
        let n = per_class * NUM_CLASSES;
        let images = Matrix::from_fn(n, 4, |r, c| if c == 0 { r as f64 / n as f64 } else { 0.5 });
        let labels = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
        DatasetSlice::from_parts(images, labels, DatasetId::Mnist).unwrap()
    }

    #[test]
    fn balanced_counts_and_determinism() {
        let d = synthetic(50);
        let a = d.balanced_subset(0.3, 4).unwrap();
        assert_eq!(a.per_class_counts(), [15; 10]);
        assert_eq!(a.len(), 150);
        assert_eq!(a, d.balanced_subset(0.3, 4).unwrap());
        let b = d.balanced_subset(0.3, 5).unwrap();
        assert_eq!(b.per_class_counts(), [15; 10]);
        assert_ne!(
            a.indices().iter().collect::<HashSet<_>>(),
            b.indices().iter().collect::<HashSet<_>>()
        );
        let full = d.balanced_subset(1.0, 1).unwrap();
        assert_eq!(full.per_class_counts(), [50; 10]);
    }

    #[test]
    fn balanced_caps_at_smallest_class() {
        let d = synthetic(20);
        let local: Vec<usize> = (0..d.len()).filter(|&i| !(d.labels()[i] == 3 && i > 100)).collect();
        let skewed = d.select(&local, 1.0, 0);
        assert_eq!(skewed.per_class_counts()[3], 10);
        let sub = skewed.balanced_subset(1.0, 0).unwrap();
        assert_eq!(sub.per_class_counts(), [10; 10]);
    }

    #[test]
    fn balanced_rejects_tiny_fraction() {
        let d = synthetic(10);
        let err = d.balanced_subset(0.05, 0).unwrap_err().to_string();
        assert!(err.contains("minimum viable fraction is 0.1"), "{err}");
        assert!(d.balanced_subset(0.0, 0).is_err());
        assert!(d.balanced_subset(1.5, 0).is_err());
    }

    #[test]
    fn imbalanced_reduces_one_class() {
        let d = synthetic(100);
        let s = d.imbalanced_subset(0.5, 5, 0.1, 3).unwrap();
        let mut expect = [50; 10];
        expect[5] = 5;
        assert_eq!(s.per_class_counts(), expect);
        assert_eq!(s.len(), 455);
        assert_eq!(
            d.imbalanced_subset(0.5, 5, 1.0, 3).unwrap(),
            d.balanced_subset(0.5, 3).unwrap()
        );
        assert!(d.imbalanced_subset(0.5, 5, 0.01, 3).is_err());
        assert!(d.imbalanced_subset(0.5, 10, 0.5, 3).is_err());
    }

    #[test]
    fn task_split_partitions() {
        let d = synthetic(7);
        let t1 = d.task_split(Task::First).unwrap();
        let t2 = d.task_split(Task::Second).unwrap();
        assert!(t1.labels().iter().all(|&l| l < 5));
        assert!(t2.labels().iter().all(|&l| l >= 5));
        assert_eq!(&t1.per_class_counts()[5..], &[0; 5]);
        let a: HashSet<_> = t1.indices().iter().copied().collect();
        let b: HashSet<_> = t2.indices().iter().copied().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), d.len());
        assert_eq!(d.without(&t1).unwrap(), t2);
        assert!(t1.without(&d).is_err());
        assert!(t1.task_split(Task::Second).is_err());
        assert!(Task::try_from(3).is_err());
    }

    #[test]
    fn validation_split_is_stratified() {
        let d = synthetic(180);
        let bal = d.balanced_subset(1.0, 0).unwrap();
        let (train, valid) = bal.validation_split(0.1, 9).unwrap();
        assert_eq!((train.len(), valid.len()), (1620, 180));
        assert_eq!(valid.per_class_counts(), [18; 10]);
        let a: HashSet<_> = train.indices().iter().copied().collect();
        let b: HashSet<_> = valid.indices().iter().copied().collect();
        assert!(a.is_disjoint(&b));
        let all: HashSet<_> = bal.indices().iter().copied().collect();
        assert_eq!(&a | &b, all);
        assert_eq!((train.clone(), valid.clone()), bal.validation_split(0.1, 9).unwrap());

        let one = synthetic(1);
        assert!(one.validation_split(0.99, 0).is_err());
    }

    #[test]
    fn pixel_mean_accumulates() {
        let d = synthetic(6);
        let a = d.balanced_subset(0.5, 1).unwrap();
        let b = d.balanced_subset(0.5, 2).unwrap();
        let step = update_pixel_mean(Some(&update_pixel_mean(None, &a).unwrap()), &b).unwrap();
        let once = update_pixel_mean(None, &a.concat(&b).unwrap()).unwrap();
        assert_eq!(step.sample_count(), once.sample_count());
        for (x, y) in step.mean().iter().zip(once.mean()) {
            assert!((x - y).abs() < 1e-12);
        }

        let zeros = DatasetSlice::<f64>::from_parts(Matrix::zeros(3, 4), vec![0, 1, 2], DatasetId::Mnist).unwrap();
        assert!(update_pixel_mean(None, &zeros).unwrap().mean().iter().all(|&m| m == 0.0));

        let text = step.to_text();
        assert_eq!(PixelMean::<f64>::from_text(&text).unwrap(), step);
    }

    #[test]
    fn from_parts_validates() {
        assert!(DatasetSlice::<f64>::from_parts(Matrix::from_fn(1, 2, |_, _| 1.5), vec![0], DatasetId::Mnist).is_err());
        assert!(DatasetSlice::from_parts(Matrix::<f64>::zeros(1, 2), vec![10], DatasetId::Mnist).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let d = synthetic(20).balanced_subset(0.5, 77).unwrap();
        let m = d.manifest();
        assert_eq!(SubsetManifest::from_section(&m.to_section()).unwrap(), m);
    }
}
