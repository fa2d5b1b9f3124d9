//! Acceptance checks A1-A8. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use ageaudit::audit::{
    delta_binary, delta_general, run_audit, AuditConfig, FixedModel, TinyNetProvider, TinyNetSpec,
    TinyNetVariant,
};
use ageaudit::avg::{average_color, average_image, range_image, AverageVariant};
use ageaudit::dataset::{ImageSource, Item, LabeledDataset};
use ageaudit::filters::{
    apply_filter_bank, median_filter, project_constrained_kernel, residual_transform,
    srm_filter_bank, Kernel,
};
use ageaudit::learn::train::train_on_samples;
use ageaudit::learn::{
    gradient_check, FnClassifier, FrontEnd, OptimizerKind, PatchPosition, PatchSpec, TinyNet,
    TinyNetArch, TrainConfig, TrainState,
};
use ageaudit::sensor::{
    build_scenario, embed_age_signal, generate_content_bias_dataset, AgeSignal, ContentStyle,
    Provenance, SyntheticConfig,
};
use ageaudit::{Image, Rng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn a1() -> Outcome {
    let s = [0.98];
    let cases = [(1.00, -0.02), (0.50, 0.48)];
    for (avg, want) in cases {
        let d = delta_binary(&s, &[avg], 2).map_err(|e| e.to_string())?;
        ensure((d - want).abs() <= 1e-12, || {
            format!("delta(0.98, {avg}) = {d}, want {want}")
        })?;
    }
    let g = delta_general(&s, &[1.00]).map_err(|e| e.to_string())?;
    ensure((g + 0.02).abs() <= 1e-12, || {
        format!("delta_gen(0.98, 1.00) = {g}")
    })?;
    let mut rng = Rng::new(1);
    for _ in 0..1000 {
        let acc_s: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let acc_avg: Vec<f64> = (0..8).map(|_| rng.uniform_range(0.5, 1.0)).collect();
        let d = delta_binary(&acc_s, &acc_avg, 2).unwrap();
        let g = delta_general(&acc_s, &acc_avg).unwrap();
        ensure((d - g).abs() <= 1e-12, || {
            format!("delta {d} != delta_gen {g} for acc_avg >= 0.5")
        })?;
    }
    Ok("-0.02 and 0.48 exact; delta == delta_gen when acc_avg >= 0.5".into())
}

fn random_image(rng: &mut Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.uniform_range(lo, hi)).unwrap()
}

fn oracle_reflect(i: isize, n: usize) -> usize {
    // Edge-inclusive mirror: -1 -> 0, n -> n - 1.
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

fn brute_median(img: &Image, k: usize) -> Image {
    let (h, w, c) = img.shape();
    let r = (k / 2) as isize;
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut win = Vec::with_capacity(k * k);
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = oracle_reflect(y as isize + dy, h);
                let xx = oracle_reflect(x as isize + dx, w);
                win.push(img.get(yy, xx, ch));
            }
        }
        win.sort_by(f64::total_cmp);
        win[win.len() / 2]
    })
    .unwrap()
}

fn a2() -> Outcome {
    let mut rng = Rng::new(2);
    let contents: Vec<Image> = (0..12)
        .map(|_| random_image(&mut rng, 16, 16, 3, 0.0, 255.0))
        .collect();
    let signal = AgeSignal {
        theta: random_image(&mut rng, 16, 16, 3, 0.0, 40.0),
        class_label: 0,
        provenance: Provenance::Simulated,
    };
    let embedded: Vec<Image> = contents
        .iter()
        .map(|c| embed_age_signal(c, &signal).unwrap())
        .collect();
    let lhs = average_image(&embedded).unwrap();
    let rhs = average_image(&contents)
        .unwrap()
        .zip_with(&signal.theta, |a, b| a + b)
        .unwrap();
    let lin = max_abs_diff(&lhs, &rhs);
    ensure(lin <= 1e-9, || {
        format!("embed/average commutation error {lin:e}")
    })?;

    let avg = lhs;
    let c1 = average_color(&avg);
    let idem = max_abs_diff(&average_color(&c1), &c1);
    ensure(idem <= 1e-12 * c1.max().abs().max(1.0), || {
        format!("average_color idempotence error {idem:e}")
    })?;
    let r = range_image(&avg);
    ensure(r.min() == 0.0, || {
        format!("range image minimum {}", r.min())
    })?;
    let shifted = avg.map(|v| v + 37.25).unwrap();
    let shift = max_abs_diff(&range_image(&shifted), &r);
    ensure(shift <= 1e-9, || {
        format!("range image shift error {shift:e}")
    })?;

    let mut planted =
        Image::from_fn(32, 32, 1, |y, x, _| 80.0 + 0.5 * y as f64 + 0.25 * x as f64).unwrap();
    let clean = median_filter(&planted, 5).unwrap();
    for &(y, x) in &[(0, 0), (5, 9), (16, 16), (31, 3), (20, 30)] {
        planted.set(y, x, 0, planted.get(y, x, 0) + 60.0);
    }
    let removed = max_abs_diff(&median_filter(&planted, 5).unwrap(), &clean);
    ensure(removed <= 1.0, || {
        format!("isolated defects survive the median (max change {removed})")
    })?;
    let flat = Image::filled(16, 16, 1, 100.0);
    let mut spiky = flat.clone();
    spiky.set(3, 3, 0, 255.0);
    spiky.set(11, 12, 0, 0.0);
    ensure(median_filter(&spiky, 5).unwrap() == flat, || {
        "spikes on a flat field not removed".into()
    })?;

    for i in 0..100 {
        let img = random_image(&mut rng, 16, 16, 1, 0.0, 255.0);
        ensure(
            median_filter(&img, 5).unwrap() == brute_median(&img, 5),
            || format!("median disagrees with brute force on image {i}"),
        )?;
    }
    Ok(format!(
        "commutation {lin:.1e}, 100/100 median oracle matches"
    ))
}

fn a3_recipe() -> (SyntheticConfig, TinyNetProvider, AuditConfig) {
    let syn = SyntheticConfig {
        content_count: 200,
        ..Default::default()
    };
    let provider = TinyNetProvider {
        name: "tinynet-constrained".into(),
        spec: TinyNetSpec {
            variant: TinyNetVariant::Constrained,
            kernels: 3,
            kernel_size: 3,
            patch: Some(PatchSpec::single(64, PatchPosition::Ce)),
            ..Default::default()
        },
        train: TrainConfig {
            optimizer: OptimizerKind::Adamax { lr: 0.02 },
            epochs: 12,
            batch_size: 8,
            ..Default::default()
        },
    };
    let audit = AuditConfig {
        num_runs: 3,
        ..Default::default()
    };
    (syn, provider, audit)
}

fn a3() -> Outcome {
    let (syn, provider, audit) = a3_recipe();
    let rng = Rng::new(1);
    let sc = build_scenario(&syn, &rng).map_err(|e| e.to_string())?;
    ensure(
        sc.dataset.num_classes() == 2 && sc.dataset.len() == 400,
        || "dataset is not 2 x 200".into(),
    )?;
    ensure(syn.image_size == 256 && provider.train.epochs <= 30, || {
        "recipe out of bounds".into()
    })?;
    for map in &sc.defect_maps {
        ensure(map.len() >= 20, || format!("only {} defects", map.len()))?;
        for d in map.entries() {
            let amp = syn.tau * d.d + d.c;
            ensure(amp >= 25.0, || {
                format!("defect amplitude {amp} below 25/255")
            })?;
        }
    }
    let report = run_audit(
        "synthetic",
        &sc.dataset,
        &provider,
        &audit,
        &rng.derive("audit", 0),
        serde_json::Value::Null,
    )
    .map_err(|f| f.error.to_string())?;
    let d = report.delta.clone().ok_or("no binary delta")?;
    let acc = report.mean_acc_s;
    let (y, yc, yr, yf) = (
        d[&AverageVariant::Standard],
        d[&AverageVariant::Color],
        d[&AverageVariant::Range],
        d[&AverageVariant::Filtered],
    );
    let summary = format!("acc_S {acc:.3}, delta Y/Yc/Yr/Yf {y:.3}/{yc:.3}/{yr:.3}/{yf:.3}");
    ensure(acc >= 0.90, || format!("{summary}: acc_S < 0.90"))?;
    ensure(y <= 0.05 && yr <= 0.05, || {
        format!("{summary}: structural averages not classified")
    })?;
    ensure(yc >= acc - 0.55 && yf >= acc - 0.55, || {
        format!("{summary}: color or filtered averages still classified")
    })?;
    Ok(summary)
}

fn a4() -> Outcome {
    let rng = Rng::new(1);
    let ds =
        generate_content_bias_dataset(100, 64, 1, &[80.0, 140.0], &ContentStyle::default(), &rng)
            .map_err(|e| e.to_string())?;
    let provider = TinyNetProvider {
        name: "tinynet-raw".into(),
        spec: TinyNetSpec {
            variant: TinyNetVariant::Raw,
            patch: None,
            ..Default::default()
        },
        train: TrainConfig {
            optimizer: OptimizerKind::Adamax { lr: 0.01 },
            epochs: 8,
            batch_size: 8,
            ..Default::default()
        },
    };
    let audit = AuditConfig {
        num_runs: 2,
        ..Default::default()
    };
    let report = run_audit(
        "bias",
        &ds,
        &provider,
        &audit,
        &rng.derive("audit", 0),
        serde_json::Value::Null,
    )
    .map_err(|f| f.error.to_string())?;
    let yc = report.delta.as_ref().ok_or("no binary delta")?[&AverageVariant::Color];
    let summary = format!("acc_S {:.3}, delta Yc {yc:.3}", report.mean_acc_s);
    ensure(yc <= 0.05, || {
        format!("{summary}: content exploitation not flagged")
    })?;
    Ok(summary)
}

fn kink_free_batch(net: &TinyNet, n: usize, seed: u64) -> Vec<(Image, usize)> {
    let (c, k) = (net.arch().in_channels, net.num_classes());
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let img = random_image(&mut rng, 5, 5, c, 0.0, 255.0);
        if net.relu_margin(&img).unwrap() >= 0.01 {
            out.push((img, out.len() % k));
        }
    }
    out
}

fn a5() -> Outcome {
    let mut worst: f64 = 0.0;
    for (front, channels) in [
        (FrontEnd::Raw, 1),
        (FrontEnd::Raw, 3),
        (
            FrontEnd::Constrained {
                kernels: 3,
                size: 5,
            },
            1,
        ),
        (
            FrontEnd::Constrained {
                kernels: 3,
                size: 3,
            },
            3,
        ),
        (
            FrontEnd::FixedBank {
                bank: "srm_basic".into(),
            },
            1,
        ),
    ] {
        let net = TinyNet::new(
            TinyNetArch::new(channels, 3, front.clone()),
            &mut Rng::new(42),
        )
        .unwrap();
        let data = kink_free_batch(&net, 10, 7);
        let refs: Vec<(&Image, usize)> = data.iter().map(|(i, l)| (i, *l)).collect();
        for (name, rel) in gradient_check(&net, &refs, 1e-3).map_err(|e| e.to_string())? {
            ensure(rel <= 1e-4, || {
                format!("{front:?} {name}: relative error {rel:e}")
            })?;
            worst = worst.max(rel);
        }
    }

    // 50 optimizer steps, one full-batch step per epoch, checked after each.
    let mut rng = Rng::new(5);
    let samples: Vec<(Image, usize)> = (0..16)
        .map(|i| (random_image(&mut rng, 12, 12, 1, 0.0, 255.0), i % 2))
        .collect();
    let arch = TinyNetArch::new(
        1,
        2,
        FrontEnd::Constrained {
            kernels: 3,
            size: 5,
        },
    );
    let mut cfg = TrainConfig {
        optimizer: OptimizerKind::Adamax { lr: 0.02 },
        epochs: 1,
        batch_size: 16,
        seed: 9,
        ..Default::default()
    };
    let mut state = TrainState::new(arch, cfg.clone()).map_err(|e| e.to_string())?;
    let mut violation: f64 = 0.0;
    for step in 1..=50 {
        cfg.epochs = step;
        state = train_on_samples(state, &cfg, &samples, &[]).map_err(|e| e.to_string())?;
        let v = state.net.constraint_violation();
        ensure(v <= 1e-12, || {
            format!("constraint violated by {v:e} after step {step}")
        })?;
        violation = violation.max(v);
    }
    Ok(format!(
        "worst gradient error {worst:.1e}, worst constraint violation {violation:.1e}"
    ))
}

fn a6() -> Outcome {
    let mut rng = Rng::new(6);
    let mut w = vec![0.0; 25];
    for (i, v) in w.iter_mut().enumerate() {
        *v = if i == 12 { -1.0 } else { 1.0 / 24.0 };
    }
    let fixed = Kernel::new(5, 1, w).unwrap();
    ensure(
        project_constrained_kernel(&fixed, &mut rng) == fixed,
        || "projection moved a constrained kernel".into(),
    )?;
    let ones = Kernel::new(3, 2, vec![1.0; 18]).unwrap();
    let p = project_constrained_kernel(&ones, &mut rng);
    for d in 0..2 {
        for (i, &v) in p.slice(d).iter().enumerate() {
            let want = if i == 4 { -1.0 } else { 0.125 };
            ensure(v == want, || {
                format!("all-ones projection gives {v} at {i}")
            })?;
        }
    }
    let bank = srm_filter_bank().map_err(|e| e.to_string())?;
    for value in [0.0, 1.0, 37.0, 128.0, 255.0] {
        for c in [1, 3] {
            let img = Image::filled(9, 11, c, value);
            let r = residual_transform(&img).map_err(|e| e.to_string())?;
            ensure(r.data().iter().all(|&v| v == 0.0), || {
                format!("residual of constant {value} not zero")
            })?;
            let f = apply_filter_bank(&img, &bank).map_err(|e| e.to_string())?;
            ensure(f.data().iter().all(|&v| v == 0.0), || {
                format!(
                    "filter bank response to constant {value} not zero (max {})",
                    f.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
                )
            })?;
        }
    }
    Ok(format!(
        "projection exact, residual and {}-kernel bank vanish on constants",
        bank.len()
    ))
}

fn a7() -> Outcome {
    let mut rng = Rng::new(7);
    let items: Vec<Item> = (0..60)
        .map(|i| {
            let label = i % 2;
            let base = if label == 0 { 90.0 } else { 120.0 };
            let img = random_image(&mut rng, 8, 8, 1, base - 40.0, base + 40.0);
            Item::new(ImageSource::Memory(Arc::new(img)), label)
        })
        .collect();
    let ds = LabeledDataset::new(items, 2).map_err(|e| e.to_string())?;
    let clf = FnClassifier::new("brightness", 2, |img: &Image| {
        let m = img.channel_stats(0).2;
        vec![-(m - 90.0).abs(), -(m - 120.0).abs()]
    });
    let provider = FixedModel(Arc::new(clf));
    let cfg = AuditConfig {
        num_runs: 8,
        num_sets: 20,
        ..Default::default()
    };
    let report = run_audit(
        "shape",
        &ds,
        &provider,
        &cfg,
        &Rng::new(70),
        serde_json::Value::Null,
    )
    .map_err(|f| f.error.to_string())?;
    ensure(report.runs.len() == 8 && report.num_runs == 8, || {
        format!("{} runs", report.runs.len())
    })?;
    for run in &report.runs {
        for v in AverageVariant::ALL {
            let n = run.average_count.get(&v).copied().unwrap_or(0);
            ensure(n == 40, || {
                format!("run {}: {n} {} images", run.run_index, v.key())
            })?;
        }
    }
    let mean = |f: &dyn Fn(&ageaudit::audit::RunResult) -> f64| {
        report.runs.iter().map(f).sum::<f64>() / 8.0
    };
    let acc = mean(&|r| r.acc_s);
    ensure((acc - report.mean_acc_s).abs() <= 1e-12, || {
        "mean acc_S mismatch".into()
    })?;
    let delta = report.delta.as_ref().ok_or("no binary delta")?;
    for v in AverageVariant::ALL {
        let d = mean(&|r| (r.acc_s - 0.5) - (r.acc_variant[&v] - 0.5).abs());
        let g = mean(&|r| r.acc_s - r.acc_variant[&v]);
        ensure((d - delta[&v]).abs() <= 1e-12, || {
            format!("delta {} mismatch", v.key())
        })?;
        ensure((g - report.delta_gen[&v]).abs() <= 1e-12, || {
            format!("delta_gen {} mismatch", v.key())
        })?;
    }
    Ok("8 runs, 40 images per variant per run, means agree".into())
}

const BIN: &str = env!("CARGO_BIN_EXE_ageaudit");

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn a8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let cfg = dir.path().join("experiment.toml");
    let text = format!(
        r#"seed = 2024
output_dir = "{}"

[dataset]
root = "{}"

[model]
kind = "tinynet"
variant = "constrained"
patch = {{ size = 32, positions = ["tl", "ce"] }}

[train]
epochs = 2
optimizer = {{ kind = "adamax", lr = 0.02 }}

[audit]
num_runs = 2
num_sets = 3
"#,
        out.display(),
        out.join("dataset/images").display()
    );
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let gen_cfg = dir.path().join("generate.toml");
    fs::write(
        &gen_cfg,
        format!(
            "seed = 2024\noutput_dir = \"{}\"\n[dataset.synthetic]\ncontent_count = 24\nimage_size = 64\nbase_defects = 5\nnew_defects_per_class = 15\ndark_frames = 8\n",
            out.display()
        ),
    )
    .map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for threads in ["1", "8"] {
        for (conf, cmd) in [(&gen_cfg, "generate"), (&cfg, "train"), (&cfg, "audit")] {
            let o = Command::new(BIN)
                .args([
                    "--config",
                    conf.to_str().unwrap(),
                    "--threads",
                    threads,
                    "--force",
                    cmd,
                ])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(o.status.success(), || {
                format!(
                    "{cmd} --threads {threads} failed: {}",
                    String::from_utf8_lossy(&o.stderr)
                )
            })?;
        }
        trees.push(snapshot(&out));
    }
    let files = trees[0].len();
    ensure(files > 0, || "no outputs".into())?;
    ensure(trees[0].keys().eq(trees[1].keys()), || {
        "file sets differ".into()
    })?;
    for (k, v) in &trees[0] {
        ensure(v == &trees[1][k], || format!("{} differs", k.display()))?;
    }
    Ok(format!("{files} files byte-identical with 1 and 8 threads"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("A1 metric fidelity", a1),
        ("A2 average-image algebra", a2),
        ("A3 synthetic age-signal pattern", a3),
        ("A4 content-bias detection", a4),
        ("A5 gradients and constraint", a5),
        ("A6 constraint and filter units", a6),
        ("A7 protocol shape", a7),
        ("A8 determinism", a8),
    ];
    let only = std::env::args().nth(1).filter(|a| a.starts_with('A'));
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_ref().is_some_and(|o| !name.starts_with(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
