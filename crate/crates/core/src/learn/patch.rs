//! Fixed-position crops, block tiling and prediction fusion.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::net::argmax;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPosition {
    Tl,
    Tr,
    Bl,
    Br,
    Ce,
}

impl PatchPosition {
    pub const ALL: [PatchPosition; 5] = [
        PatchPosition::Tl,
        PatchPosition::Tr,
        PatchPosition::Bl,
        PatchPosition::Br,
        PatchPosition::Ce,
    ];

    pub fn key(self) -> &'static str {
        match self {
            PatchPosition::Tl => "tl",
            PatchPosition::Tr => "tr",
            PatchPosition::Bl => "bl",
            PatchPosition::Br => "br",
            PatchPosition::Ce => "ce",
        }
    }

    /// Top-left anchor `(row, col)` of a `size x size` crop in an `h x w` image.
    pub fn anchor(self, h: usize, w: usize, size: usize) -> (usize, usize) {
        match self {
            PatchPosition::Tl => (0, 0),
            PatchPosition::Tr => (0, w - size),
            PatchPosition::Bl => (h - size, 0),
            PatchPosition::Br => (h - size, w - size),
            PatchPosition::Ce => ((h - size) / 2, (w - size) / 2),
        }
    }
}

impl fmt::Display for PatchPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PatchPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatchPosition::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown patch position '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub size: usize,
    pub positions: Vec<PatchPosition>,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: 256,
            positions: PatchPosition::ALL.to_vec(),
        }
    }
}

impl PatchSpec {
    pub fn single(size: usize, position: PatchPosition) -> Self {
        Self {
            size,
            positions: vec![position],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        if self.positions.is_empty() {
            return Err(Error::InvalidArgument(
                "patch spec needs at least one position".into(),
            ));
        }
        let mut seen = self.positions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.positions.len() {
            return Err(Error::InvalidArgument("duplicate patch position".into()));
        }
        Ok(())
    }

    pub fn crop(&self, image: &Image, position: PatchPosition) -> Result<Image> {
        let (h, w, _) = image.shape();
        if h < self.size || w < self.size {
            return Err(Error::Shape(format!(
                "image {h}x{w} is smaller than patch size {}",
                self.size
            )));
        }
        let (top, left) = position.anchor(h, w, self.size);
        image.crop(top, left, self.size, self.size)
    }
}

/// Exact crops at every position of `spec`.
pub fn extract_five_crops(
    image: &Image,
    spec: &PatchSpec,
) -> Result<BTreeMap<PatchPosition, Image>> {
    spec.validate()?;
    spec.positions
        .iter()
        .map(|&p| Ok((p, spec.crop(image, p)?)))
        .collect()
}

/// Non-overlapping `block x block` tiles in row-major order from `(0, 0)`,
/// at most `count` of them. Fails when fewer than `count` fit.
pub fn extract_blocks(image: &Image, block: usize, count: usize) -> Result<Vec<Image>> {
    if block == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    let (rows, cols) = (image.height() / block, image.width() / block);
    if rows * cols < count {
        return Err(Error::Shape(format!(
            "{}x{} image holds {} blocks of {block}x{block}, need {count}",
            image.height(),
            image.width(),
            rows * cols
        )));
    }
    (0..count)
        .map(|i| image.crop((i / cols) * block, (i % cols) * block, block, block))
        .collect()
}

/// The first 48 blocks of side `block`.
pub fn extract_blocks_48(image: &Image, block: usize) -> Result<Vec<Image>> {
    extract_blocks(image, block, 48)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// Argmax of the per-class sum of scores.
    #[default]
    ScoreSum,
    /// Most frequent per-vector argmax.
    Majority,
}

/// Combined per-class scores: summed scores, or vote counts for
/// [`FusionRule::Majority`].
pub fn fuse_scores(scores: &[Vec<f64>], rule: FusionRule) -> Result<Vec<f64>> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    let k = first.len();
    if k == 0 || scores.iter().any(|s| s.len() != k) {
        return Err(Error::Shape(
            "score vectors must share a nonzero length".into(),
        ));
    }
    let mut out = vec![0.0; k];
    for s in scores {
        match rule {
            FusionRule::ScoreSum => out.iter_mut().zip(s).for_each(|(o, v)| *o += v),
            FusionRule::Majority => out[argmax(s)] += 1.0,
        }
    }
    Ok(out)
}

/// Fused class decision; ties go to the lowest class index.
pub fn fuse_predictions(scores: &[Vec<f64>], rule: FusionRule) -> Result<usize> {
    Ok(argmax(&fuse_scores(scores, rule)?))
}
