//! Labeled image collections and stratified train/validation/test splitting.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Where the pixels of a dataset item come from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    Memory(Arc<Image>),
    File(PathBuf),
    /// `content + signal`, materialized on every access so that identical
    /// content shared by several classes is stored once.
    Embedded {
        content: Arc<Image>,
        signal: Arc<Image>,
    },
}

impl ImageSource {
    pub fn load(&self) -> Result<Image> {
        match self {
            ImageSource::Memory(img) => Ok((**img).clone()),
            ImageSource::File(path) => io::load_image(path),
            ImageSource::Embedded { content, signal } => content.zip_with(signal, |a, b| a + b),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    pub source: ImageSource,
    pub label: usize,
    pub split: Split,
}

impl Item {
    pub fn new(source: ImageSource, label: usize) -> Self {
        Self {
            source,
            label,
            split: Split::Train,
        }
    }
}

/// Images with class labels in `0..num_classes` and a split assignment.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    items: Vec<Item>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<Item>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut counts = vec![0usize; num_classes];
        for item in &items {
            if item.label >= num_classes {
                return Err(Error::Dataset(format!(
                    "label {} out of range for {num_classes} classes",
                    item.label
                )));
            }
            counts[item.label] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Dataset(format!("class {k} has no items")));
        }
        Ok(Self { items, num_classes })
    }

    /// Reads `<root>/<class dir>/*.png`; class indices follow the
    /// lexicographic order of the directory names. Pixels are loaded lazily.
    pub fn from_dir(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        let mut items = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && p.extension()
                            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
                })
                .collect();
            files.sort();
            items.extend(
                files
                    .into_iter()
                    .map(|f| Item::new(ImageSource::File(f), label)),
            );
        }
        Self::new(items, class_dirs.len())
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn load(&self, index: usize) -> Result<Image> {
        self.items[index].source.load()
    }

    pub fn label(&self, index: usize) -> usize {
        self.items[index].label
    }

    /// Item indices of class `k`, in dataset order.
    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].label == k)
            .collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }

    pub fn with_splits(&self, splits: &[Split]) -> Result<Self> {
        if splits.len() != self.items.len() {
            return Err(Error::InvalidArgument("one split per item required".into()));
        }
        let mut out = self.clone();
        for (item, &s) in out.items.iter_mut().zip(splits) {
            item.split = s;
        }
        Ok(out)
    }
}

/// Train/validation/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be non-negative, got {f:?}"
            )));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Per-split counts for a class of `n` items: largest-remainder rounding,
    /// then every split with a nonzero fraction receives at least one item.
    pub fn allocate(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let f = self.as_array();
        let needed = f.iter().filter(|&&v| v > 0.0).count();
        if n < needed {
            return Err(Error::Dataset(format!(
                "class with {n} items cannot fill {needed} splits"
            )));
        }
        let quotas: Vec<f64> = f.iter().map(|v| v * n as f64).collect();
        let mut counts = [0usize; 3];
        for (c, q) in counts.iter_mut().zip(&quotas) {
            *c = (q + 1e-9).floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut assigned: usize = counts.iter().sum();
        for &s in order.iter().cycle() {
            if assigned >= n {
                break;
            }
            if f[s] > 0.0 {
                counts[s] += 1;
                assigned += 1;
            }
        }
        for s in 0..3 {
            if f[s] > 0.0 && counts[s] == 0 {
                let donor = (0..3)
                    .max_by_key(|&d| (counts[d], std::cmp::Reverse(d)))
                    .unwrap();
                counts[donor] -= 1;
                counts[s] += 1;
            }
        }
        Ok(counts)
    }
}

/// Stratified split: each class is shuffled independently and cut according
/// to `fractions`.
pub fn split_dataset(
    dataset: &LabeledDataset,
    fractions: SplitFractions,
    rng: &Rng,
) -> Result<LabeledDataset> {
    let mut splits = vec![Split::Train; dataset.len()];
    for k in 0..dataset.num_classes() {
        let mut members = dataset.class_indices(k);
        let counts = fractions.allocate(members.len())?;
        rng.derive("split-class", k as u64).shuffle(&mut members);
        let mut cursor = 0;
        for (split, count) in Split::ALL.iter().zip(counts) {
            for &i in &members[cursor..cursor + count] {
                splits[i] = *split;
            }
            cursor += count;
        }
    }
    dataset.with_splits(&splits)
}
