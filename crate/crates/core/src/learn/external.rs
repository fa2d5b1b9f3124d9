//! Out-of-process classifiers speaking a file-exchange protocol.
//!
//! The caller writes every image as an AVGI raster, lists their paths in
//! `batch_manifest.txt` and runs `<command> --manifest <path> --out <csv>`.
//! The adapter answers with a CSV whose header is
//! `index,score_0,...,score_{K-1}` and which has one row per manifest line,
//! in manifest order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use super::classifier::Classifier;
use crate::error::{Error, Result};
use crate::filters::Preprocessing;
use crate::image::Image;
use crate::io::{load_float_raster, save_float_raster};

pub const MANIFEST_NAME: &str = "batch_manifest.txt";

#[derive(Clone, Debug)]
pub struct ExternalClassifier {
    pub command: Vec<String>,
    pub num_classes: usize,
    pub preprocessing: Preprocessing,
}

impl ExternalClassifier {
    pub fn new(
        command: Vec<String>,
        num_classes: usize,
        preprocessing: Preprocessing,
    ) -> Result<Self> {
        if command.is_empty() || command[0].is_empty() {
            return Err(Error::InvalidArgument("adapter command is empty".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(
                "adapter needs at least 2 classes".into(),
            ));
        }
        Ok(Self {
            command,
            num_classes,
            preprocessing,
        })
    }

    fn adapter_error(&self, reason: impl Into<String>, stderr: String) -> Error {
        Error::Adapter {
            command: self.command.join(" "),
            reason: reason.into(),
            stderr,
        }
    }
}

impl Classifier for ExternalClassifier {
    fn name(&self) -> String {
        format!("external:{}", self.command.join(" "))
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let mut manifest = String::new();
        for (i, img) in images.iter().enumerate() {
            let p = dir.path().join(format!("img_{i:06}.avgi"));
            save_float_raster(img, &p)?;
            writeln!(manifest, "{}", p.display()).expect("string write");
        }
        let manifest_path = dir.path().join(MANIFEST_NAME);
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
        let out_path = dir.path().join("scores.csv");
        let output = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg("--manifest")
            .arg(&manifest_path)
            .arg("--out")
            .arg(&out_path)
            .output()
            .map_err(|e| self.adapter_error(format!("failed to start: {e}"), String::new()))?;
        let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
        if !output.status.success() {
            let reason = match output.status.code() {
                Some(c) => format!("exited with status {c}"),
                None => "terminated by a signal".to_string(),
            };
            return Err(self.adapter_error(reason, stderr));
        }
        let text = fs::read_to_string(&out_path)
            .map_err(|e| self.adapter_error(format!("no scores file: {e}"), stderr.clone()))?;
        parse_scores_csv(&text, images.len(), self.num_classes)
            .map_err(|reason| self.adapter_error(reason, stderr))
    }
}

/// Validates and parses an adapter reply.
pub fn parse_scores_csv(
    text: &str,
    rows: usize,
    num_classes: usize,
) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty scores file")?;
    let expected: Vec<String> = std::iter::once("index".to_string())
        .chain((0..num_classes).map(|k| format!("score_{k}")))
        .collect();
    let got: Vec<&str> = header.split(',').map(str::trim).collect();
    if got != expected {
        return Err(format!(
            "bad header '{header}', expected '{}'",
            expected.join(",")
        ));
    }
    let mut out = Vec::with_capacity(rows);
    for (r, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != num_classes + 1 {
            return Err(format!(
                "row {r} has {} fields, expected {}",
                fields.len(),
                num_classes + 1
            ));
        }
        if fields[0].parse::<usize>().ok() != Some(r) {
            return Err(format!("row {r} has index '{}'", fields[0]));
        }
        let scores = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| format!("row {r} has a non-numeric or non-finite score"))?;
        out.push(scores);
    }
    if out.len() != rows {
        return Err(format!("expected {rows} score rows, got {}", out.len()));
    }
    Ok(out)
}

pub fn format_scores_csv(scores: &[Vec<f64>], num_classes: usize) -> String {
    let mut s = String::from("index");
    for k in 0..num_classes {
        write!(s, ",score_{k}").expect("string write");
    }
    s.push('\n');
    for (i, row) in scores.iter().enumerate() {
        write!(s, "{i}").expect("string write");
        for v in row {
            write!(s, ",{v:?}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Adapter side of the protocol: scores every manifest entry with
/// `classifier` and writes the reply CSV.
pub fn serve_adapter(classifier: &dyn Classifier, manifest: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let paths: Vec<PathBuf> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| PathBuf::from(l.trim()))
        .collect();
    let images = paths
        .iter()
        .map(load_float_raster)
        .collect::<Result<Vec<_>>>()?;
    let scores = classifier.predict_batch(&images)?;
    let csv = format_scores_csv(&scores, classifier.num_classes());
    fs::write(out, csv).map_err(|e| Error::io(out, e))
}
