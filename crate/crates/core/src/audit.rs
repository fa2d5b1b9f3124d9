//! The average-image audit: per-run accuracy on original inputs and on the
//! four average-image variants, the separability metrics, reports and their
//! heuristic interpretation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::avg::{build_all_variants, sample_averaging_sets, AverageVariant};
use crate::dataset::{split_dataset, LabeledDataset, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::filters::Preprocessing;
use crate::image::Image;
use crate::learn::classifier::{Classifier, PatchEnsemble};
use crate::learn::net::{FrontEnd, TinyNetArch};
use crate::learn::patch::{FusionRule, PatchSpec};
use crate::learn::train::{train_tinynet, TrainConfig, TrainState};
use crate::rng::Rng;

/// `(1/N) sum_i (acc_S,i - 0.5) - |acc_avg,i - 0.5|`; binary problems only.
pub fn delta_binary(acc_s: &[f64], acc_avg: &[f64], num_classes: usize) -> Result<f64> {
    if num_classes != 2 {
        return Err(Error::InvalidArgument(format!(
            "the separability delta is defined for 2 classes, got {num_classes}; use delta_general"
        )));
    }
    check_pairs(acc_s, acc_avg)?;
    let n = acc_s.len() as f64;
    Ok(acc_s
        .iter()
        .zip(acc_avg)
        .map(|(s, a)| (s - 0.5) - (a - 0.5).abs())
        .sum::<f64>()
        / n)
}

/// `(1/N) sum_i (acc_S,i - acc_avg,i)`.
pub fn delta_general(acc_s: &[f64], acc_avg: &[f64]) -> Result<f64> {
    check_pairs(acc_s, acc_avg)?;
    let n = acc_s.len() as f64;
    Ok(acc_s.iter().zip(acc_avg).map(|(s, a)| s - a).sum::<f64>() / n)
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "need equally many accuracies on both sides, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "accuracies must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Accuracy and number of scored images per variant.
pub fn evaluate_on_average_images(
    classifier: &dyn Classifier,
    items: &[(AverageVariant, Image, usize)],
) -> Result<BTreeMap<AverageVariant, (f64, usize)>> {
    let images: Vec<Image> = items.iter().map(|(_, img, _)| img.clone()).collect();
    let predicted = classifier.classify_batch(&images)?;
    if predicted.len() != items.len() {
        return Err(Error::Numeric(format!(
            "classifier returned {} decisions for {} images",
            predicted.len(),
            items.len()
        )));
    }
    let mut tally: BTreeMap<AverageVariant, (usize, usize)> = BTreeMap::new();
    for ((variant, _, truth), p) in items.iter().zip(predicted) {
        let e = tally.entry(*variant).or_default();
        e.0 += (p == *truth) as usize;
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(v, (hit, n))| (v, (hit as f64 / n as f64, n)))
        .collect())
}

/// Supplies the classifier evaluated in one run.
pub trait ModelProvider: Sync {
    fn describe(&self) -> String;

    /// `dataset` carries this run's splits; `rng` is private to the run.
    fn provide(
        &self,
        run: usize,
        dataset: &LabeledDataset,
        rng: &Rng,
    ) -> Result<Arc<dyn Classifier>>;
}

/// The same classifier in every run (external adapters, pretrained models).
pub struct FixedModel(pub Arc<dyn Classifier>);

impl ModelProvider for FixedModel {
    fn describe(&self) -> String {
        self.0.name()
    }

    fn provide(&self, _: usize, dataset: &LabeledDataset, _: &Rng) -> Result<Arc<dyn Classifier>> {
        if self.0.num_classes() != dataset.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "classifier has {} classes, dataset {}",
                self.0.num_classes(),
                dataset.num_classes()
            )));
        }
        Ok(self.0.clone())
    }
}

/// Built-in network families: the front end plus the preprocessing bound
/// to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TinyNetVariant {
    /// Raw pixels.
    Raw,
    /// Median-filter residuals as input.
    Residual,
    /// Constrained first layer.
    Constrained,
    /// Fixed high-pass filter bank.
    FixedBank,
}

impl TinyNetVariant {
    pub fn preprocessing(self) -> Preprocessing {
        match self {
            TinyNetVariant::Residual => Preprocessing::MedianResidual,
            _ => Preprocessing::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyNetSpec {
    pub variant: TinyNetVariant,
    /// Constrained front end: number and size of kernels.
    pub kernels: usize,
    pub kernel_size: usize,
    pub filter_bank: String,
    /// `None` trains and predicts on whole images.
    pub patch: Option<PatchSpec>,
    pub fusion: FusionRule,
}

impl Default for TinyNetSpec {
    fn default() -> Self {
        Self {
            variant: TinyNetVariant::Constrained,
            kernels: 3,
            kernel_size: 3,
            filter_bank: "srm_basic".into(),
            patch: Some(PatchSpec::default()),
            fusion: FusionRule::ScoreSum,
        }
    }
}

impl TinyNetSpec {
    pub fn arch(&self, in_channels: usize, num_classes: usize) -> TinyNetArch {
        let front = match self.variant {
            TinyNetVariant::Raw | TinyNetVariant::Residual => FrontEnd::Raw,
            TinyNetVariant::Constrained => FrontEnd::Constrained {
                kernels: self.kernels,
                size: self.kernel_size,
            },
            TinyNetVariant::FixedBank => FrontEnd::FixedBank {
                bank: self.filter_bank.clone(),
            },
        };
        let mut arch = TinyNetArch::new(in_channels, num_classes, front);
        if self.variant == TinyNetVariant::Residual {
            arch.input_offset = 0.0;
        }
        arch
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.patch {
            p.validate()?;
        }
        Ok(())
    }
}

/// Trains a fresh [`PatchEnsemble`] in every run.
pub struct TinyNetProvider {
    pub name: String,
    pub spec: TinyNetSpec,
    pub train: TrainConfig,
}

impl TinyNetProvider {
    /// Trains one member per patch position; the seed of each member is
    /// derived from `rng` and the position.
    pub fn train_ensemble(
        &self,
        dataset: &LabeledDataset,
        rng: &Rng,
    ) -> Result<(PatchEnsemble, Vec<TrainState>)> {
        self.spec.validate()?;
        let first = dataset.load(0)?;
        let (h, w, c) = first.shape();
        let arch = self.spec.arch(c, dataset.num_classes());
        let pre = self.spec.variant.preprocessing();
        let spec = self.spec.patch.clone().unwrap_or(PatchSpec {
            size: h.min(w),
            positions: vec![crate::learn::patch::PatchPosition::Tl],
        });
        let whole = self.spec.patch.is_none();
        if whole && h != w {
            return Err(Error::Shape(format!(
                "whole-image training needs square images, got {h}x{w}; configure a patch"
            )));
        }
        let mut states = Vec::new();
        for (i, &pos) in spec.positions.iter().enumerate() {
            let mut cfg = self.train.clone();
            cfg.seed = rng.derive_seed("member", i as u64);
            let patch = (!whole).then_some((spec.size, pos));
            log::info!("training {} member {pos}", self.name);
            states.push(train_tinynet(dataset, arch.clone(), &cfg, pre, patch)?);
        }
        let ens = PatchEnsemble::new(
            self.name.clone(),
            spec,
            self.spec.fusion,
            pre,
            states.iter().map(|s| s.net.clone()).collect(),
        )?;
        Ok((ens, states))
    }
}

impl ModelProvider for TinyNetProvider {
    fn describe(&self) -> String {
        self.name.clone()
    }

    fn provide(
        &self,
        _: usize,
        dataset: &LabeledDataset,
        rng: &Rng,
    ) -> Result<Arc<dyn Classifier>> {
        Ok(Arc::new(self.train_ensemble(dataset, rng)?.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub num_runs: usize,
    pub num_sets: usize,
    /// Share of the smallest class drawn into every averaging set.
    pub fraction: f64,
    pub splits: SplitFractions,
    /// `|delta| <= soft_threshold` reads as "approximately zero".
    pub soft_threshold: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            num_runs: 8,
            num_sets: 20,
            fraction: 0.8,
            splits: SplitFractions::default(),
            soft_threshold: 0.05,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_runs == 0 || self.num_sets == 0 {
            return Err(Error::InvalidArgument(
                "num_runs and num_sets must be at least 1".into(),
            ));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if !(self.soft_threshold >= 0.0 && self.soft_threshold.is_finite()) {
            return Err(Error::InvalidArgument("soft threshold must be >= 0".into()));
        }
        self.splits.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_index: usize,
    pub acc_s: f64,
    pub acc_variant: BTreeMap<AverageVariant, f64>,
    pub test_count: usize,
    pub average_count: BTreeMap<AverageVariant, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_index: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub imager_id: String,
    pub classifier: String,
    pub num_classes: usize,
    pub num_runs: usize,
    /// Present for binary problems only.
    pub delta: Option<BTreeMap<AverageVariant, f64>>,
    pub delta_gen: BTreeMap<AverageVariant, f64>,
    pub mean_acc_s: f64,
    pub runs: Vec<RunResult>,
    pub failure: Option<RunFailure>,
    pub config: serde_json::Value,
}

impl AuditReport {
    /// Builds the aggregate metrics from completed runs.
    pub fn from_runs(
        imager_id: &str,
        classifier: &str,
        num_classes: usize,
        runs: Vec<RunResult>,
        config: serde_json::Value,
    ) -> Result<Self> {
        let acc_s: Vec<f64> = runs.iter().map(|r| r.acc_s).collect();
        let (mut delta, mut delta_gen) = (BTreeMap::new(), BTreeMap::new());
        if !runs.is_empty() {
            for v in AverageVariant::ALL {
                let avg: Vec<f64> = runs
                    .iter()
                    .map(|r| {
                        r.acc_variant.get(&v).copied().ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "run {} lacks variant {}",
                                r.run_index,
                                v.key()
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                if num_classes == 2 {
                    delta.insert(v, delta_binary(&acc_s, &avg, 2)?);
                }
                delta_gen.insert(v, delta_general(&acc_s, &avg)?);
            }
        }
        let mean_acc_s = if runs.is_empty() {
            0.0
        } else {
            acc_s.iter().sum::<f64>() / acc_s.len() as f64
        };
        Ok(Self {
            imager_id: imager_id.to_string(),
            classifier: classifier.to_string(),
            num_classes,
            num_runs: runs.len(),
            delta: (num_classes == 2).then_some(delta),
            delta_gen,
            mean_acc_s,
            runs,
            failure: None,
            config,
        })
    }

    /// Delta for binary problems, the generalized delta otherwise.
    pub fn headline(&self, v: AverageVariant) -> Option<f64> {
        match &self.delta {
            Some(d) => d.get(&v).copied(),
            None => self.delta_gen.get(&v).copied(),
        }
    }
}

/// An audit that stopped early, with everything completed before the error.
#[derive(Debug)]
pub struct AuditFailure {
    pub partial: AuditReport,
    pub run_index: usize,
    pub error: Error,
}

const EVAL_CHUNK: usize = 64;

fn test_accuracy(classifier: &dyn Classifier, ds: &LabeledDataset) -> Result<(f64, usize)> {
    let test = ds.split_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let pre = classifier.preprocessing();
    let mut correct = 0;
    for chunk in test.chunks(EVAL_CHUNK) {
        let images = chunk
            .iter()
            .map(|&i| pre.apply(ds.load(i)?))
            .collect::<Result<Vec<_>>>()?;
        let predicted = classifier.classify_batch(&images)?;
        correct += chunk
            .iter()
            .zip(predicted)
            .filter(|(&i, p)| ds.label(i) == *p)
            .count();
    }
    Ok((correct as f64 / test.len() as f64, test.len()))
}

/// One run: fresh splits, a fresh (or bound) classifier, test accuracy and
/// accuracy on every average-image variant of freshly drawn sets.
pub fn audit_run(
    dataset: &LabeledDataset,
    provider: &dyn ModelProvider,
    config: &AuditConfig,
    run: usize,
    rng: &Rng,
) -> Result<RunResult> {
    let run_rng = rng.derive("run", run as u64);
    let ds = split_dataset(dataset, config.splits, &run_rng.derive("split", 0))?;
    let classifier = provider.provide(run, &ds, &run_rng.derive("model", 0))?;
    let (acc_s, test_count) = test_accuracy(classifier.as_ref(), &ds)?;
    let sets = sample_averaging_sets(
        &ds,
        config.num_sets,
        config.fraction,
        &run_rng.derive("sets", 0),
    )?;
    let variants = build_all_variants(&sets, &ds, classifier.preprocessing())?;
    let mut items = Vec::with_capacity(sets.len() * AverageVariant::ALL.len());
    for (set, vars) in sets.iter().zip(variants) {
        for (v, img) in vars {
            items.push((v, img, set.class_label));
        }
    }
    let scored = evaluate_on_average_images(classifier.as_ref(), &items)?;
    log::info!(
        "run {run}: acc_S {acc_s:.3} {}",
        scored
            .iter()
            .map(|(v, (a, _))| format!("{} {a:.3}", v.symbol()))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(RunResult {
        run_index: run,
        acc_s,
        acc_variant: scored.iter().map(|(v, (a, _))| (*v, *a)).collect(),
        test_count,
        average_count: scored.iter().map(|(v, (_, n))| (*v, *n)).collect(),
    })
}

/// Runs the complete protocol. On failure the completed runs are returned
/// inside [`AuditFailure`] with the failing run marked.
pub fn run_audit(
    imager_id: &str,
    dataset: &LabeledDataset,
    provider: &dyn ModelProvider,
    config: &AuditConfig,
    rng: &Rng,
    snapshot: serde_json::Value,
) -> std::result::Result<AuditReport, Box<AuditFailure>> {
    let k = dataset.num_classes();
    let fail = |runs: Vec<RunResult>, run_index: usize, error: Error| {
        let mut partial =
            AuditReport::from_runs(imager_id, &provider.describe(), k, runs, snapshot.clone())
                .unwrap_or_else(|_| AuditReport {
                    imager_id: imager_id.to_string(),
                    classifier: provider.describe(),
                    num_classes: k,
                    num_runs: 0,
                    delta: None,
                    delta_gen: BTreeMap::new(),
                    mean_acc_s: 0.0,
                    runs: Vec::new(),
                    failure: None,
                    config: snapshot.clone(),
                });
        partial.failure = Some(RunFailure {
            run_index,
            message: error.to_string(),
        });
        Box::new(AuditFailure {
            partial,
            run_index,
            error,
        })
    };
    if let Err(e) = config.validate() {
        return Err(fail(Vec::new(), 0, e));
    }
    let mut runs = Vec::with_capacity(config.num_runs);
    for i in 0..config.num_runs {
        match audit_run(dataset, provider, config, i, rng) {
            Ok(r) => runs.push(r),
            Err(e) => return Err(fail(runs, i, e)),
        }
    }
    AuditReport::from_runs(
        imager_id,
        &provider.describe(),
        k,
        runs.clone(),
        snapshot.clone(),
    )
    .map_err(|e| fail(runs, config.num_runs, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub const RUNS_CSV_HEADER: &str =
    "imager,run,acc_S,acc_avg_standard,acc_avg_color,acc_avg_range,acc_avg_filtered";
pub const SUMMARY_CSV_HEADER: &str = "imager,delta_Y,delta_Yc,delta_Yr,delta_Yf,deltaGEN_Y,deltaGEN_Yc,deltaGEN_Yr,deltaGEN_Yf,mean_acc_S";

pub fn runs_csv(reports: &[AuditReport]) -> String {
    let mut s = format!("{RUNS_CSV_HEADER}\n");
    for r in reports {
        for run in &r.runs {
            write!(s, "{},{},{}", r.imager_id, run.run_index, num(run.acc_s))
                .expect("string write");
            for v in AverageVariant::ALL {
                write!(
                    s,
                    ",{}",
                    run.acc_variant.get(&v).map_or(String::new(), |a| num(*a))
                )
                .expect("string write");
            }
            s.push('\n');
        }
    }
    s
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub imager: String,
    pub delta: Option<[f64; 4]>,
    pub delta_gen: [f64; 4],
    pub mean_acc_s: f64,
}

fn row_of(r: &AuditReport) -> SummaryRow {
    let pick = |m: &BTreeMap<AverageVariant, f64>| {
        AverageVariant::ALL.map(|v| m.get(&v).copied().unwrap_or(f64::NAN))
    };
    SummaryRow {
        imager: r.imager_id.clone(),
        delta: r.delta.as_ref().map(pick),
        delta_gen: pick(&r.delta_gen),
        mean_acc_s: r.mean_acc_s,
    }
}

/// Per-imager rows followed, for more than one imager, by a `mean` row of
/// their arithmetic means.
pub fn summary_rows(reports: &[AuditReport]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = reports.iter().map(row_of).collect();
    if rows.len() > 1 {
        let n = rows.len() as f64;
        let mean4 = |f: &dyn Fn(&SummaryRow) -> Option<[f64; 4]>| -> Option<[f64; 4]> {
            let mut acc = [0.0; 4];
            for r in &rows {
                let v = f(r)?;
                for i in 0..4 {
                    acc[i] += v[i];
                }
            }
            Some(acc.map(|a| a / n))
        };
        let mean = SummaryRow {
            imager: "mean".into(),
            delta: mean4(&|r| r.delta),
            delta_gen: mean4(&|r| Some(r.delta_gen)).expect("always present"),
            mean_acc_s: rows.iter().map(|r| r.mean_acc_s).sum::<f64>() / n,
        };
        rows.push(mean);
    }
    rows
}

pub fn summary_csv(reports: &[AuditReport]) -> String {
    let mut s = format!("{SUMMARY_CSV_HEADER}\n");
    for row in summary_rows(reports) {
        s.push_str(&row.imager);
        for i in 0..4 {
            write!(s, ",{}", row.delta.map_or(String::new(), |d| num(d[i]))).expect("string write");
        }
        for d in row.delta_gen {
            write!(s, ",{}", num(d)).expect("string write");
        }
        writeln!(s, ",{}", num(row.mean_acc_s)).expect("string write");
    }
    s
}

pub fn report_json(report: &AuditReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Chance,
    AgeSignal,
    ContentExploited,
    HighFrequency,
    ContentDependent,
    AverageBetter,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
}

/// Reads a report with soft thresholds. These are heuristics: there is no
/// exact threshold that rules content bias in or out.
pub fn interpret_report(report: &AuditReport, threshold: f64) -> Vec<Finding> {
    let mut out = Vec::new();
    let add = |out: &mut Vec<Finding>, kind, message: String| out.push(Finding { kind, message });
    let chance = 1.0 / report.num_classes.max(1) as f64;
    if report.runs.is_empty() || report.mean_acc_s - chance <= threshold {
        add(
            &mut out,
            FindingKind::Chance,
            format!(
                "model at chance (mean acc_S {:.3}, chance {:.3}); no finding",
                report.mean_acc_s, chance
            ),
        );
        return out;
    }
    let d = |v| report.headline(v).unwrap_or(f64::NAN);
    let (y, yc, yr, yf) = (
        d(AverageVariant::Standard),
        d(AverageVariant::Color),
        d(AverageVariant::Range),
        d(AverageVariant::Filtered),
    );
    // Metrics are means of ratios; absorb rounding at the threshold itself.
    let threshold = threshold + 1e-9;
    let near = |x: f64| x.abs() <= threshold;
    let name = if report.delta.is_some() {
        "delta"
    } else {
        "deltaGEN"
    };
    if near(y) && near(yr) && yc > threshold {
        add(
            &mut out,
            FindingKind::AgeSignal,
            format!(
                "{name}(Y) {y:.2} and {name}(Yr) {yr:.2} approximately zero while {name}(Yc) {yc:.2} is large: consistent with age-signal inference"
            ),
        );
    }
    if near(yc) {
        add(
            &mut out,
            FindingKind::ContentExploited,
            format!("{name}(Yc) {yc:.2} approximately zero: average color classifies like the originals, content most likely exploited"),
        );
    }
    if yf > threshold && near(y) {
        add(
            &mut out,
            FindingKind::HighFrequency,
            format!("{name}(Yf) {yf:.2} clearly above zero: high-frequency components (e.g. sensor defects) are relied upon"),
        );
    }
    if [y, yc, yr, yf].iter().all(|&x| x > threshold) {
        add(
            &mut out,
            FindingKind::ContentDependent,
            format!("all variants lose accuracy ({y:.2}/{yc:.2}/{yr:.2}/{yf:.2}): content-dependent inference"),
        );
    }
    if y < -threshold {
        add(
            &mut out,
            FindingKind::AverageBetter,
            format!("{name}(Y) {y:.2} < 0: average images are classified better than the original inputs"),
        );
    }
    if out.is_empty() {
        add(
            &mut out,
            FindingKind::Inconclusive,
            "no pattern matched the soft thresholds".into(),
        );
    }
    out
}

pub fn findings_text(report: &AuditReport, findings: &[Finding], threshold: f64) -> String {
    let mut s = format!(
        "audit of {} on {} ({} runs)\nheuristic reading, soft threshold {threshold}; no exact threshold exists\n",
        report.classifier, report.imager_id, report.num_runs
    );
    if let Some(f) = &report.failure {
        writeln!(s, "FAILED at run {}: {}", f.run_index, f.message).expect("string write");
    }
    for f in findings {
        writeln!(
            s,
            "- [{}] {}",
            serde_json::to_value(f.kind)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            f.message
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(deltas: [f64; 4], acc: f64) -> AuditReport {
        let run = RunResult {
            run_index: 0,
            acc_s: acc,
            acc_variant: AverageVariant::ALL
                .iter()
                .zip(deltas)
                .map(|(v, d)| (*v, acc - d))
                .collect(),
            test_count: 10,
            average_count: AverageVariant::ALL.iter().map(|v| (*v, 40)).collect(),
        };
        AuditReport::from_runs("x", "m", 2, vec![run], serde_json::Value::Null).unwrap()
    }

    fn kinds(r: &AuditReport) -> Vec<FindingKind> {
        interpret_report(r, 0.05)
            .into_iter()
            .map(|f| f.kind)
            .collect()
    }

    #[test]
    fn delta_examples() {
        assert!((delta_binary(&[0.98], &[1.0], 2).unwrap() + 0.02).abs() < 1e-12);
        assert!((delta_binary(&[0.98], &[0.5], 2).unwrap() - 0.48).abs() < 1e-12);
        assert_eq!(delta_binary(&[0.5], &[0.5], 2).unwrap(), 0.0);
        assert!((delta_binary(&[0.98], &[0.0], 2).unwrap() + 0.02).abs() < 1e-12);
        assert!(delta_binary(&[0.9], &[0.9], 3).is_err());
        assert!((delta_general(&[0.98], &[1.0]).unwrap() + 0.02).abs() < 1e-12);
        assert!((delta_general(&[0.9, 0.8], &[0.5, 0.6]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(delta_general(&[0.7, 0.1], &[0.7, 0.1]).unwrap(), 0.0);
        assert!(delta_general(&[0.7], &[]).is_err());
        assert!(delta_general(&[1.5], &[0.5]).is_err());
    }

    #[test]
    fn interpretation_examples() {
        let k = kinds(&report([0.0, 0.5, 0.0, 0.5], 1.0));
        assert!(k.contains(&FindingKind::AgeSignal) && k.contains(&FindingKind::HighFrequency));
        assert!(!k.contains(&FindingKind::ContentExploited));
        let k = kinds(&report([0.4, 0.4, 0.4, 0.4], 0.9));
        assert_eq!(k, vec![FindingKind::ContentDependent]);
        let zero = report([0.0; 4], 0.5);
        assert_eq!(kinds(&zero), vec![FindingKind::Chance]);
        assert!(kinds(&report([0.3, 0.0, 0.3, 0.3], 0.9)).contains(&FindingKind::ContentExploited));
        assert!(kinds(&report([-0.1, 0.3, 0.0, 0.3], 0.8)).contains(&FindingKind::AverageBetter));
        let text = findings_text(&zero, &interpret_report(&zero, 0.05), 0.05);
        assert!(text.contains("heuristic") && text.contains("no finding"));
    }

    #[test]
    fn csv_layout() {
        let a = report([0.0, 0.5, 0.0, 0.5], 1.0);
        let mut b = report([0.1, 0.3, 0.1, 0.2], 0.8);
        b.imager_id = "y".into();
        let runs = runs_csv(&[a.clone()]);
        assert_eq!(runs, format!("{RUNS_CSV_HEADER}\nx,0,1,1,0.5,1,0.5\n"));
        let summary = summary_csv(&[a.clone(), b.clone()]);
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "x,0,0.5,0,0.5,0,0.5,0,0.5,1");
        assert!(lines[3].starts_with("mean,"));
        let rows = summary_rows(&[a, b]);
        assert!((rows[2].mean_acc_s - 0.9).abs() < 1e-12);
        assert!((rows[2].delta.unwrap()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn multiclass_reports_have_no_binary_delta() {
        let run = RunResult {
            run_index: 0,
            acc_s: 0.9,
            acc_variant: AverageVariant::ALL.iter().map(|v| (*v, 0.5)).collect(),
            test_count: 9,
            average_count: AverageVariant::ALL.iter().map(|v| (*v, 60)).collect(),
        };
        let r = AuditReport::from_runs("x", "m", 3, vec![run], serde_json::Value::Null).unwrap();
        assert!(r.delta.is_none());
        assert!((r.delta_gen[&AverageVariant::Color] - 0.4).abs() < 1e-12);
        let back: AuditReport = serde_json::from_str(&report_json(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
