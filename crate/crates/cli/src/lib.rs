//! Command-line front end: `generate`, `train`, `audit`, `inspect` and
//! `adapter`, driven by one TOML experiment file.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ageaudit::audit::{
    findings_text, interpret_report, report_json, run_audit, runs_csv, summary_csv, FixedModel,
    ModelProvider, TinyNetProvider, TinyNetSpec,
};
use ageaudit::dataset::{split_dataset, LabeledDataset, Split};
use ageaudit::io::{load_any, save_png};
use ageaudit::learn::classifier::{checkpoint_file_name, PatchEnsemble};
use ageaudit::learn::external::serve_adapter;
use ageaudit::learn::train::{prepare_samples, train_on_samples};
use ageaudit::learn::{load_checkpoint, ExternalClassifier, PatchPosition, PatchSpec, TrainState};
use ageaudit::sensor::{build_scenario, detect_strong_defects};
use ageaudit::{Error, ErrorCategory, Image, Rng};
use clap::{Parser, Subcommand};

pub use config::{DatasetConfig, ExperimentConfig, ModelConfig, Need, TrainSection};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("audit failed in run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let category = match self {
            CliError::Config(_) => return 2,
            CliError::Core(e) | CliError::Run { source: e, .. } => e.category(),
        };
        match category {
            ErrorCategory::Argument => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Adapter => 4,
            ErrorCategory::Numeric => 5,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "ageaudit",
    version,
    about = "Average-image audit of image-age classifiers"
)]
pub struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory (for `adapter`: the score file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset with its class signals and defect maps.
    Generate,
    /// Trains the configured network and writes its checkpoints.
    Train {
        /// Continue from existing checkpoints up to the configured epochs.
        #[arg(long)]
        resume: bool,
    },
    /// Runs the audit and writes the report files.
    Audit {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        sets: Option<usize>,
    },
    /// Prints statistics and strong defects of average images.
    Inspect {
        paths: Vec<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        threshold: f64,
        /// Inspect the difference of two images (second minus first).
        #[arg(long)]
        diff: bool,
    },
    /// Serves a trained model over the file protocol.
    Adapter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

pub const DATASET_DIR: &str = "dataset";
pub const MODEL_DIR: &str = "model";
pub const AUDIT_DIR: &str = "audit";

/// Executes a parsed command and returns the text for stdout. Logging and
/// the thread pool are set up by the binary.
pub fn run(cli: Cli) -> CliResult<String> {
    match &cli.command {
        Command::Inspect {
            paths,
            threshold,
            diff,
        } => inspect(paths, *threshold, *diff),
        Command::Adapter { model, manifest } => {
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| CliError::Config("adapter needs --out <scores.csv>".into()))?;
            let ens = PatchEnsemble::load(model)?;
            serve_adapter(&ens, manifest, out)?;
            Ok(String::new())
        }
        Command::Generate => {
            let cfg = load_config(&cli)?;
            cfg.validate_for(Need::Generate)?;
            generate(&cfg, &cfg.output_dir.join(DATASET_DIR), cli.force)
        }
        Command::Train { resume } => {
            let cfg = load_config(&cli)?;
            cfg.validate_for(Need::Train)?;
            train(&cfg, &cfg.output_dir.join(MODEL_DIR), cli.force, *resume)
        }
        Command::Audit { runs, sets } => {
            let mut cfg = load_config(&cli)?;
            if let Some(r) = runs {
                cfg.audit.num_runs = *r;
            }
            if let Some(s) = sets {
                cfg.audit.num_sets = *s;
            }
            cfg.validate_for(Need::Audit)?;
            audit(&cfg, &cfg.output_dir.join(AUDIT_DIR), cli.force)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Makes `dir` an empty directory. An existing non-empty directory is only
/// cleared with `force`.
fn prepare_output(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(CliError::Config(format!(
                    "{} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Core(Error::io(path, e)))
}

fn class_dir(k: usize) -> String {
    format!("class_{k:02}")
}

/// Layout: `images/class_XX/img_NNNNN.png`, `signals/class_XX.{avgi,json}`,
/// `defects/class_XX.csv` and `manifest.json`.
pub fn generate(cfg: &ExperimentConfig, dir: &Path, force: bool) -> CliResult<String> {
    use rayon::prelude::*;
    let syn = cfg.dataset.synthetic.as_ref().expect("validated");
    prepare_output(dir, force)?;
    let sc = build_scenario(syn, &Rng::new(cfg.seed).derive("synthetic", 0))?;
    for sub in ["images", "signals", "defects"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let ds = &sc.dataset;
    let mut files = Vec::with_capacity(ds.len());
    for k in 0..ds.num_classes() {
        let d = dir.join("images").join(class_dir(k));
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, idx) in ds.class_indices(k).into_iter().enumerate() {
            files.push((idx, d.join(format!("img_{i:05}.png"))));
        }
    }
    files
        .par_iter()
        .try_for_each(|(idx, path)| save_png(&ds.load(*idx)?, path))?;
    for (k, (signal, map)) in sc.signals.iter().zip(&sc.defect_maps).enumerate() {
        signal.save(dir.join("signals").join(class_dir(k)))?;
        write(
            &dir.join("defects").join(format!("{}.csv", class_dir(k))),
            &map.to_csv(),
        )?;
    }
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "synthetic": syn,
        "classes": ds.num_classes(),
        "class_counts": ds.class_counts(),
        "defects_per_class": sc.defect_maps.iter().map(|m| m.len()).collect::<Vec<_>>(),
    });
    write(
        &dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;
    Ok(format!("wrote {} images to {}\n", ds.len(), dir.display()))
}

/// The configured dataset: a directory tree, or the synthetic scenario
/// built in memory from the master seed (the same stream `generate` uses).
pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<LabeledDataset> {
    match (&cfg.dataset.root, &cfg.dataset.synthetic) {
        (Some(root), None) => Ok(LabeledDataset::from_dir(root)?),
        (None, Some(syn)) => {
            Ok(build_scenario(syn, &Rng::new(cfg.seed).derive("synthetic", 0))?.dataset)
        }
        _ => Err(CliError::Config(
            "dataset: give exactly one of `root` or a synthetic block".into(),
        )),
    }
}

fn imager_id(cfg: &ExperimentConfig) -> String {
    if let Some(id) = &cfg.imager {
        return id.clone();
    }
    match &cfg.dataset.root {
        Some(root) => root.file_name().map_or_else(
            || root.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        ),
        None => "synthetic".into(),
    }
}

fn tinynet_spec(cfg: &ExperimentConfig) -> &TinyNetSpec {
    match &cfg.model {
        Some(ModelConfig::Tinynet(spec)) => spec,
        _ => unreachable!("validated"),
    }
}

/// Trains one network per patch position on the train split (validation
/// accuracy per epoch goes to `training_curve.csv`).
pub fn train(cfg: &ExperimentConfig, dir: &Path, force: bool, resume: bool) -> CliResult<String> {
    let spec = tinynet_spec(cfg);
    let ds = load_dataset(cfg)?;
    if resume {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    } else {
        prepare_output(dir, force)?;
    }
    let rng = Rng::new(cfg.seed);
    let ds = split_dataset(&ds, cfg.audit.splits, &rng.derive("train-split", 0))?;
    let (h, w, c) = ds.load(0)?.shape();
    let whole = spec.patch.is_none();
    if whole && h != w {
        return Err(Error::Shape(format!(
            "whole-image training needs square images, got {h}x{w}; configure a patch"
        ))
        .into());
    }
    let patch_spec = spec.patch.clone().unwrap_or(PatchSpec {
        size: h,
        positions: vec![PatchPosition::Tl],
    });
    let arch = spec.arch(c, ds.num_classes());
    let pre = spec.variant.preprocessing();
    let member_rng = rng.derive("train-model", 0);
    let mut states = Vec::new();
    let mut curve = String::from("position,epoch,lr,train_loss,train_acc,val_acc\n");
    for (i, &pos) in patch_spec.positions.iter().enumerate() {
        let tc = cfg
            .train
            .with_seed(member_rng.derive_seed("member", i as u64));
        let ckpt = dir.join(checkpoint_file_name(pos));
        let state = if resume && ckpt.is_file() {
            let s = load_checkpoint(&ckpt)?;
            if s.net.arch() != &arch {
                return Err(CliError::Config(format!(
                    "{} was trained with a different architecture",
                    ckpt.display()
                )));
            }
            if s.epochs_completed > tc.epochs {
                return Err(CliError::Config(format!(
                    "{} already has {} epochs, more than the configured {}",
                    ckpt.display(),
                    s.epochs_completed,
                    tc.epochs
                )));
            }
            s
        } else {
            TrainState::new(arch.clone(), tc.clone())?
        };
        let patch = (!whole).then_some((patch_spec.size, pos));
        let train_set = prepare_samples(&ds, &ds.split_indices(Split::Train), pre, patch)?;
        let val_set = prepare_samples(&ds, &ds.split_indices(Split::Validation), pre, patch)?;
        log::info!("training member {pos}");
        let state = train_on_samples(state, &tc, &train_set, &val_set)?;
        for r in &state.history {
            let val = r.val_acc.map_or(String::new(), |v| v.to_string());
            writeln!(
                curve,
                "{},{},{},{},{},{val}",
                pos.key(),
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_acc
            )
            .expect("string write");
        }
        states.push(state);
    }
    let ens = PatchEnsemble::new(
        "tinynet",
        patch_spec,
        spec.fusion,
        pre,
        states.iter().map(|s| s.net.clone()).collect(),
    )?;
    ens.save(dir, &states)?;
    write(&dir.join("training_curve.csv"), &curve)?;
    Ok(format!(
        "trained {} network(s) into {}\n",
        states.len(),
        dir.display()
    ))
}

fn provider(cfg: &ExperimentConfig) -> CliResult<Box<dyn ModelProvider>> {
    Ok(match cfg.model.as_ref().expect("validated") {
        ModelConfig::Tinynet(spec) => Box::new(TinyNetProvider {
            name: format!("tinynet-{:?}", spec.variant).to_lowercase(),
            spec: spec.clone(),
            train: cfg.train.with_seed(0),
        }),
        ModelConfig::External {
            command,
            num_classes,
            preprocess,
        } => Box::new(FixedModel(Arc::new(ExternalClassifier::new(
            command.clone(),
            *num_classes,
            *preprocess,
        )?))),
        ModelConfig::Pretrained { path } => {
            Box::new(FixedModel(Arc::new(PatchEnsemble::load(path)?)))
        }
    })
}

/// Writes `audit_runs.csv`, `audit_summary.csv`, `audit_report.json` and
/// `findings.txt`. After a failing run the completed runs are still written
/// and the report carries the failure.
pub fn audit(cfg: &ExperimentConfig, dir: &Path, force: bool) -> CliResult<String> {
    let ds = load_dataset(cfg)?;
    let provider = provider(cfg)?;
    prepare_output(dir, force)?;
    let id = imager_id(cfg);
    let rng = Rng::new(cfg.seed).derive("audit", 0);
    let result = run_audit(
        &id,
        &ds,
        provider.as_ref(),
        &cfg.audit,
        &rng,
        cfg.snapshot(),
    );
    let (report, err) = match result {
        Ok(r) => (r, None),
        Err(f) => {
            let f = *f;
            (f.partial, Some((f.run_index, f.error)))
        }
    };
    let reports = std::slice::from_ref(&report);
    write(&dir.join("audit_runs.csv"), &runs_csv(reports))?;
    if report.num_runs > 0 {
        write(&dir.join("audit_summary.csv"), &summary_csv(reports))?;
    }
    write(&dir.join("audit_report.json"), &report_json(&report)?)?;
    let thr = cfg.audit.soft_threshold;
    let findings = interpret_report(&report, thr);
    let text = findings_text(&report, &findings, thr);
    write(&dir.join("findings.txt"), &text)?;
    match err {
        Some((run, source)) => Err(CliError::Run { run, source }),
        None => Ok(text),
    }
}

fn describe_image(name: &str, img: &Image, threshold: f64, out: &mut String) -> CliResult<()> {
    let (h, w, c) = img.shape();
    writeln!(out, "{name}: {h}x{w}x{c}").expect("string write");
    for ch in 0..c {
        let (min, max, mean) = img.channel_stats(ch);
        writeln!(
            out,
            "  channel {ch}: min {min:.3} max {max:.3} mean {mean:.3}"
        )
        .expect("string write");
    }
    let hits = detect_strong_defects(img, threshold)?;
    writeln!(
        out,
        "  strong defects (|residual| > {threshold}): {}",
        hits.len()
    )
    .expect("string write");
    if !hits.is_empty() {
        out.push_str("  row,col,channel,magnitude\n");
        for d in &hits {
            writeln!(
                out,
                "  {},{},{},{:.3}",
                d.row, d.col, d.channel, d.magnitude
            )
            .expect("string write");
        }
    }
    Ok(())
}

pub fn inspect(paths: &[PathBuf], threshold: f64, diff: bool) -> CliResult<String> {
    if paths.is_empty() {
        return Err(CliError::Config("inspect needs at least one image".into()));
    }
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(CliError::Config(
            "--threshold must be a non-negative number".into(),
        ));
    }
    let mut out = String::new();
    if diff {
        let [a, b] = paths else {
            return Err(CliError::Config("--diff needs exactly two images".into()));
        };
        let (ia, ib) = (load_any(a)?, load_any(b)?);
        let d = ib.zip_with(&ia, |x, y| x - y)?;
        let name = format!("{} - {}", b.display(), a.display());
        describe_image(&name, &d, threshold, &mut out)?;
    } else {
        for p in paths {
            describe_image(&p.display().to_string(), &load_any(p)?, threshold, &mut out)?;
        }
    }
    Ok(out)
}
