//! Class-average images and their variants.
//!
//! Averaging many images of one class suppresses content that varies from
//! image to image while keeping anything fixed in sensor coordinates, such
//! as in-field sensor defects. Four variants of an average are produced:
//!
//! | variant    | construction                                   |
//! |------------|------------------------------------------------|
//! | `Standard` | per-pixel mean of the class sample              |
//! | `Color`    | every pixel set to its channel's mean           |
//! | `Range`    | standard average minus its global minimum       |
//! | `Filtered` | 5x5 median of the standard average              |

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::filters::{median_filter, Preprocessing};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageVariant {
    Standard,
    Color,
    Range,
    Filtered,
}

impl AverageVariant {
    pub const ALL: [AverageVariant; 4] = [
        AverageVariant::Standard,
        AverageVariant::Color,
        AverageVariant::Range,
        AverageVariant::Filtered,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AverageVariant::Standard => "standard",
            AverageVariant::Color => "color",
            AverageVariant::Range => "range",
            AverageVariant::Filtered => "filtered",
        }
    }

    /// Short symbol used in summary tables (`Y`, `Yc`, `Yr`, `Yf`).
    pub fn symbol(self) -> &'static str {
        match self {
            AverageVariant::Standard => "Y",
            AverageVariant::Color => "Yc",
            AverageVariant::Range => "Yr",
            AverageVariant::Filtered => "Yf",
        }
    }
}

impl fmt::Display for AverageVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Running per-pixel sum.
#[derive(Clone, Debug)]
pub struct MeanAccumulator {
    shape: Option<(usize, usize, usize)>,
    sum: Vec<f64>,
    count: usize,
}

impl Default for MeanAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self {
            shape: None,
            sum: Vec::new(),
            count: 0,
        }
    }

    pub fn add(&mut self, image: &Image) -> Result<()> {
        match self.shape {
            None => {
                self.shape = Some(image.shape());
                self.sum = image.data().to_vec();
            }
            Some(shape) if shape == image.shape() => {
                for (s, v) in self.sum.iter_mut().zip(image.data()) {
                    *s += v;
                }
            }
            Some(shape) => {
                return Err(Error::Shape(format!(
                    "cannot average {:?} with {shape:?}",
                    image.shape()
                )))
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Image> {
        let (h, w, c) = self
            .shape
            .ok_or_else(|| Error::InvalidArgument("average of an empty set".into()))?;
        let n = self.count as f64;
        Ok(Image::from_parts(
            h,
            w,
            c,
            self.sum.iter().map(|s| s / n).collect(),
        ))
    }
}

/// Per-pixel arithmetic mean.
pub fn average_image(images: &[Image]) -> Result<Image> {
    let mut acc = MeanAccumulator::new();
    for img in images {
        acc.add(img)?;
    }
    acc.finish()
}

/// Replaces every pixel by the mean of its channel.
pub fn average_color(avg: &Image) -> Image {
    let (h, w, c) = avg.shape();
    let means: Vec<f64> = (0..c).map(|ch| avg.channel_stats(ch).2).collect();
    let data = (0..h * w).flat_map(|_| means.iter().copied()).collect();
    Image::from_parts(h, w, c, data)
}

/// Subtracts the global minimum (over all pixels and channels).
pub fn range_image(avg: &Image) -> Image {
    let min = avg.min();
    let data = avg.data().iter().map(|v| v - min).collect();
    let (h, w, c) = avg.shape();
    Image::from_parts(h, w, c, data)
}

/// 5x5 median of the average.
pub fn filtered_average(avg: &Image) -> Result<Image> {
    median_filter(avg, 5)
}

/// All four variants derived from one standard average.
pub fn variants_from_average(avg: Image) -> Result<BTreeMap<AverageVariant, Image>> {
    let mut out = BTreeMap::new();
    out.insert(AverageVariant::Color, average_color(&avg));
    out.insert(AverageVariant::Range, range_image(&avg));
    out.insert(AverageVariant::Filtered, filtered_average(&avg)?);
    out.insert(AverageVariant::Standard, avg);
    Ok(out)
}

/// Members of one class for one averaging round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AveragingSet {
    pub class_label: usize,
    /// Dataset item indices, ascending.
    pub member_ids: Vec<usize>,
    pub set_index: usize,
}

/// Draws `num_sets` balanced averaging sets per class.
///
/// Each set takes `floor(fraction * smallest class size)` items from every
/// class, without replacement and regardless of split, so larger classes are
/// undersampled. Sets are drawn independently of each other and may overlap.
/// The result is ordered by set index, then class.
pub fn sample_averaging_sets(
    dataset: &LabeledDataset,
    num_sets: usize,
    fraction: f64,
    rng: &Rng,
) -> Result<Vec<AveragingSet>> {
    if num_sets == 0 {
        return Err(Error::InvalidArgument("num_sets must be >= 1".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "averaging fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let pools: Vec<Vec<usize>> = (0..dataset.num_classes())
        .map(|k| dataset.class_indices(k))
        .collect();
    let smallest = pools.iter().map(Vec::len).min().unwrap_or(0);
    let n = (fraction * smallest as f64 + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of smallest class ({smallest} items) selects nothing"
        )));
    }
    let mut sets = Vec::with_capacity(num_sets * pools.len());
    for s in 0..num_sets {
        let set_rng = rng.derive("averaging-set", s as u64);
        for (k, pool) in pools.iter().enumerate() {
            let mut draw = set_rng.derive("class", k as u64);
            let mut member_ids: Vec<usize> = draw
                .sample_indices(pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            member_ids.sort_unstable();
            sets.push(AveragingSet {
                class_label: k,
                member_ids,
                set_index: s,
            });
        }
    }
    Ok(sets)
}

/// Standard average of a set's (preprocessed) members and its variants.
pub fn build_variants(
    set: &AveragingSet,
    dataset: &LabeledDataset,
    preprocess: Preprocessing,
) -> Result<BTreeMap<AverageVariant, Image>> {
    let mut acc = MeanAccumulator::new();
    for &id in &set.member_ids {
        acc.add(&preprocess.apply(dataset.load(id)?)?)?;
    }
    variants_from_average(acc.finish()?)
}

/// Same result as calling [`build_variants`] on every set, but each dataset
/// item is loaded and preprocessed only once.
pub fn build_all_variants(
    sets: &[AveragingSet],
    dataset: &LabeledDataset,
    preprocess: Preprocessing,
) -> Result<Vec<BTreeMap<AverageVariant, Image>>> {
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); dataset.len()];
    for (s, set) in sets.iter().enumerate() {
        for &id in &set.member_ids {
            owners[id].push(s);
        }
    }
    let mut accs = vec![MeanAccumulator::new(); sets.len()];
    for (id, owned_by) in owners.iter().enumerate() {
        if owned_by.is_empty() {
            continue;
        }
        let img = preprocess.apply(dataset.load(id)?)?;
        for &s in owned_by {
            accs[s].add(&img)?;
        }
    }
    accs.iter()
        .map(|acc| variants_from_average(acc.finish()?))
        .collect()
}
