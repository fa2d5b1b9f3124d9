//! The model-agnostic classifier interface and its built-in implementations.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::net::{argmax, TinyNet};
use super::patch::{extract_blocks, fuse_scores, FusionRule, PatchPosition, PatchSpec};
use super::train::TrainState;
use crate::error::{Error, Result};
use crate::filters::Preprocessing;
use crate::image::Image;

/// Produces `K` finite scores per image (higher means more likely).
///
/// Inputs are expected to be already transformed by
/// [`Classifier::preprocessing`]; callers apply it once per image, before
/// any averaging.
pub trait Classifier: Send + Sync {
    fn name(&self) -> String;
    fn num_classes(&self) -> usize;

    fn preprocessing(&self) -> Preprocessing {
        Preprocessing::None
    }

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;

    fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        let mut out = self.predict_batch(std::slice::from_ref(image))?;
        out.pop()
            .ok_or_else(|| Error::Numeric("classifier returned no scores".into()))
    }

    /// Argmax decisions, ties to the lowest class index.
    fn classify_batch(&self, images: &[Image]) -> Result<Vec<usize>> {
        let scores = self.predict_batch(images)?;
        let k = self.num_classes();
        scores
            .iter()
            .map(|s| {
                if s.len() != k || s.iter().any(|v| !v.is_finite()) {
                    Err(Error::Numeric(format!(
                        "{} returned an invalid score vector {s:?}",
                        self.name()
                    )))
                } else {
                    Ok(argmax(s))
                }
            })
            .collect()
    }
}

/// A classifier from a closure, for probing the audit with hand-built
/// decision rules.
pub struct FnClassifier<F> {
    name: String,
    num_classes: usize,
    f: F,
}

impl<F: Fn(&Image) -> Vec<f64> + Send + Sync> FnClassifier<F> {
    pub fn new(name: impl Into<String>, num_classes: usize, f: F) -> Self {
        Self {
            name: name.into(),
            num_classes,
            f,
        }
    }
}

impl<F: Fn(&Image) -> Vec<f64> + Send + Sync> Classifier for FnClassifier<F> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        Ok(images.iter().map(|i| (self.f)(i)).collect())
    }
}

/// One [`TinyNet`] per patch position; the softmax outputs of the members
/// are fused with `fusion`.
#[derive(Clone, Debug)]
pub struct PatchEnsemble {
    pub name: String,
    pub spec: PatchSpec,
    pub fusion: FusionRule,
    pub preprocessing: Preprocessing,
    pub members: Vec<TinyNet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleManifest {
    name: String,
    spec: PatchSpec,
    fusion: FusionRule,
    preprocessing: Preprocessing,
    members: Vec<(PatchPosition, String)>,
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

pub fn checkpoint_file_name(position: PatchPosition) -> String {
    format!("model_{}.tnet", position.key())
}

impl PatchEnsemble {
    pub fn new(
        name: impl Into<String>,
        spec: PatchSpec,
        fusion: FusionRule,
        preprocessing: Preprocessing,
        members: Vec<TinyNet>,
    ) -> Result<Self> {
        spec.validate()?;
        if members.len() != spec.positions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} patch positions but {} networks",
                spec.positions.len(),
                members.len()
            )));
        }
        let k = members[0].num_classes();
        if members.iter().any(|m| m.num_classes() != k) {
            return Err(Error::InvalidArgument(
                "ensemble members disagree on class count".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            spec,
            fusion,
            preprocessing,
            members,
        })
    }

    /// Writes `ensemble.json` next to per-position checkpoints.
    pub fn save(&self, dir: &Path, states: &[TrainState]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut members = Vec::new();
        for (pos, state) in self.spec.positions.iter().zip(states) {
            let file = checkpoint_file_name(*pos);
            save_checkpoint(state, &dir.join(&file))?;
            members.push((*pos, file));
        }
        let manifest = EnsembleManifest {
            name: self.name.clone(),
            spec: self.spec.clone(),
            fusion: self.fusion,
            preprocessing: self.preprocessing,
            members,
        };
        let path = dir.join(ENSEMBLE_MANIFEST);
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(ENSEMBLE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: EnsembleManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut members = Vec::new();
        for (i, (pos, file)) in m.members.iter().enumerate() {
            if m.spec.positions.get(i) != Some(pos) {
                return Err(Error::Format(format!(
                    "{}: member order does not match patch positions",
                    path.display()
                )));
            }
            members.push(load_checkpoint(&dir.join(file))?.net);
        }
        Self::new(m.name, m.spec, m.fusion, m.preprocessing, members)
    }

    fn predict_one(&self, image: &Image) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(self.members.len());
        for (pos, net) in self.spec.positions.iter().zip(&self.members) {
            let patch = self.spec.crop(image, *pos)?;
            scores.push(net.predict_proba(&patch)?);
        }
        fuse_scores(&scores, self.fusion)
    }
}

impl Classifier for PatchEnsemble {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        images.par_iter().map(|img| self.predict_one(img)).collect()
    }
}

/// Splits each image into the first `count` blocks and majority-votes the
/// per-block decisions of `inner`. Scores are vote counts.
pub struct BlockVote {
    pub inner: Arc<dyn Classifier>,
    pub block: usize,
    pub count: usize,
    pub fusion: FusionRule,
}

impl BlockVote {
    pub fn new(inner: Arc<dyn Classifier>, block: usize) -> Self {
        Self {
            inner,
            block,
            count: 48,
            fusion: FusionRule::Majority,
        }
    }
}

impl Classifier for BlockVote {
    fn name(&self) -> String {
        format!(
            "{}[{}x{} blocks]",
            self.inner.name(),
            self.count,
            self.block
        )
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn preprocessing(&self) -> Preprocessing {
        self.inner.preprocessing()
    }

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|img| {
                let blocks = extract_blocks(img, self.block, self.count)?;
                fuse_scores(&self.inner.predict_batch(&blocks)?, self.fusion)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::net::{FrontEnd, TinyNetArch};
    use crate::learn::train::TrainConfig;
    use crate::rng::Rng;

    #[test]
    fn ensemble_save_load_predicts_identically() {
        let arch = TinyNetArch::new(
            1,
            2,
            FrontEnd::Constrained {
                kernels: 2,
                size: 3,
            },
        );
        let spec = PatchSpec {
            size: 8,
            positions: vec![PatchPosition::Tl, PatchPosition::Ce],
        };
        let states: Vec<TrainState> = (0..2)
            .map(|s| {
                TrainState::new(
                    arch.clone(),
                    TrainConfig {
                        seed: s,
                        ..TrainConfig::default()
                    },
                )
                .unwrap()
            })
            .collect();
        let ens = PatchEnsemble::new(
            "t",
            spec,
            FusionRule::ScoreSum,
            Preprocessing::MedianResidual,
            states.iter().map(|s| s.net.clone()).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path(), &states).unwrap();
        assert!(dir.path().join("model_tl.tnet").exists());
        let loaded = PatchEnsemble::load(dir.path()).unwrap();
        assert_eq!(loaded.preprocessing(), Preprocessing::MedianResidual);
        let mut rng = Rng::new(0);
        let img = Image::from_fn(12, 12, 1, |_, _, _| rng.uniform_range(0.0, 255.0)).unwrap();
        let a = ens.predict(&img).unwrap();
        assert_eq!(a, loaded.predict(&img).unwrap());
        assert!((a.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(ens.predict(&Image::zeros(7, 12, 1)).is_err());
    }

    #[test]
    fn block_vote_counts_blocks() {
        let inner: Arc<dyn Classifier> = Arc::new(FnClassifier::new("mean", 2, |img: &Image| {
            let m = img.data().iter().sum::<f64>() / img.len() as f64;
            if m > 100.0 {
                vec![0.0, 1.0]
            } else {
                vec![1.0, 0.0]
            }
        }));
        // Left 5 columns of blocks bright, right 3 dark: 30 vs 18 votes.
        let img = Image::from_fn(12, 16, 1, |_, c, _| if c < 10 { 200.0 } else { 0.0 }).unwrap();
        let bv = BlockVote::new(inner, 2);
        assert_eq!(bv.predict(&img).unwrap(), vec![18.0, 30.0]);
        assert_eq!(bv.classify_batch(&[img]).unwrap(), vec![1]);
        assert!(bv.predict(&Image::zeros(4, 4, 1)).is_err());
    }
}
