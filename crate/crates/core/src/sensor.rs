//! Sensor output simulation and synthetic age signals.
//!
//! The additive part of the sensor output model is `tau * D + c + noise`,
//! where `D` is the dark current and `c` the fixed offset of a pixel. A dark
//! frame (no incident light) contains only these terms, so averaging many
//! dark frames estimates the additive age signal of a sensor at one point in
//! time. Adding that estimate to rendered content gives images whose classes
//! differ only by the embedded signal.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::avg::MeanAccumulator;
use crate::dataset::{ImageSource, Item, LabeledDataset};
use crate::error::{Error, Result};
use crate::filters::{median_filter, reflect};
use crate::image::Image;
use crate::io;
use crate::rng::Rng;

/// One defective pixel: dark current `d` and offset `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub d: f64,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectMap {
    pub sensor_height: usize,
    pub sensor_width: usize,
    pub channels: usize,
    entries: Vec<Defect>,
}

impl DefectMap {
    pub fn new(
        sensor_height: usize,
        sensor_width: usize,
        channels: usize,
        entries: Vec<Defect>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.row >= sensor_height || e.col >= sensor_width || e.channel >= channels {
                return Err(Error::InvalidArgument(format!(
                    "defect at ({},{},{}) outside {sensor_height}x{sensor_width}x{channels}",
                    e.row, e.col, e.channel
                )));
            }
            if !(e.d >= 0.0 && e.c >= 0.0 && e.d.is_finite() && e.c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "defect at ({},{}) needs finite D >= 0 and c >= 0",
                    e.row, e.col
                )));
            }
            if !seen.insert((e.row, e.col, e.channel)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate defect at ({},{},{})",
                    e.row, e.col, e.channel
                )));
            }
        }
        Ok(Self {
            sensor_height,
            sensor_width,
            channels,
            entries,
        })
    }

    pub fn empty(sensor_height: usize, sensor_width: usize, channels: usize) -> Self {
        Self {
            sensor_height,
            sensor_width,
            channels,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Defect] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns a copy of `self` with `count` additional defects at random
    /// free positions. New defects keep a Chebyshev distance of at least
    /// `min_spacing` from every existing one so they stay isolated points.
    pub fn grow(
        &self,
        count: usize,
        d_range: (f64, f64),
        c_range: (f64, f64),
        min_spacing: usize,
        rng: &mut Rng,
    ) -> Result<DefectMap> {
        let mut entries = self.entries.clone();
        let spacing = min_spacing as isize;
        let blocked = |entries: &[Defect], r: usize, c: usize| {
            entries.iter().any(|e| {
                (e.row as isize - r as isize).abs() < spacing
                    && (e.col as isize - c as isize).abs() < spacing
            })
        };
        let budget = 1000 * (count + 1);
        let mut attempts = 0;
        while entries.len() < self.entries.len() + count {
            attempts += 1;
            if attempts > budget {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {count} isolated defects on a {}x{} sensor",
                    self.sensor_height, self.sensor_width
                )));
            }
            let row = rng.below(self.sensor_height);
            let col = rng.below(self.sensor_width);
            let channel = rng.below(self.channels);
            let d = rng.uniform_range(d_range.0, d_range.1);
            let c = rng.uniform_range(c_range.0, c_range.1);
            if !blocked(&entries, row, col) {
                entries.push(Defect {
                    row,
                    col,
                    channel,
                    d,
                    c,
                });
            }
        }
        DefectMap::new(
            self.sensor_height,
            self.sensor_width,
            self.channels,
            entries,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,channel,D,c\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{},{}", e.row, e.col, e.channel, e.d, e.c);
        }
        out
    }

    pub fn from_csv(
        text: &str,
        sensor_height: usize,
        sensor_width: usize,
        channels: usize,
    ) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("row,col,channel,D,c") => {}
            other => {
                return Err(Error::Format(format!(
                    "defect map header must be `row,col,channel,D,c`, got {other:?}"
                )))
            }
        }
        let mut entries = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("bad defect row `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            entries.push(Defect {
                row: f[0].parse().map_err(|_| bad())?,
                col: f[1].parse().map_err(|_| bad())?,
                channel: f[2].parse().map_err(|_| bad())?,
                d: f[3].parse().map_err(|_| bad())?,
                c: f[4].parse().map_err(|_| bad())?,
            });
        }
        DefectMap::new(sensor_height, sensor_width, channels, entries)
    }
}

/// Capture conditions of a dark frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureParams {
    /// Combined exposure / ISO / temperature factor scaling the dark current.
    pub tau: f64,
    /// Standard deviation of the random noise term.
    pub noise_sigma: f64,
}

impl CaptureParams {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite())
            || self.noise_sigma.is_nan()
            || self.noise_sigma < 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "capture params need tau > 0 and noise_sigma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Noise-free dark response `tau * D + c` (zero away from defects).
pub fn expected_dark_frame(defects: &DefectMap, tau: f64) -> Image {
    let mut img = Image::zeros(
        defects.sensor_height,
        defects.sensor_width,
        defects.channels,
    );
    for e in defects.entries() {
        img.set(e.row, e.col, e.channel, tau * e.d + e.c);
    }
    img
}

/// One dark frame: `tau * D + c` at defects plus Gaussian noise everywhere,
/// clamped at zero.
pub fn simulate_dark_frame(
    defects: &DefectMap,
    params: &CaptureParams,
    rng: &mut Rng,
) -> Result<Image> {
    params.validate()?;
    let base = expected_dark_frame(defects, params.tau);
    if params.noise_sigma == 0.0 {
        return Ok(base);
    }
    let (h, w, c) = base.shape();
    let data = base
        .data()
        .iter()
        .map(|&v| (v + params.noise_sigma * rng.normal()).max(0.0))
        .collect();
    Ok(Image::from_parts(h, w, c, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Simulated,
    EstimatedFromFrames,
}

/// Additive per-pixel age signal of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeSignal {
    pub theta: Image,
    pub class_label: usize,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct SignalSidecar {
    class_label: usize,
    provenance: Provenance,
}

impl AgeSignal {
    /// Writes `<stem>.avgi` and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        io::save_float_raster(&self.theta, stem.with_extension("avgi"))?;
        let sidecar = SignalSidecar {
            class_label: self.class_label,
            provenance: self.provenance,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        let path = stem.with_extension("json");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let theta = io::load_float_raster(stem.with_extension("avgi"))?;
        let path = stem.with_extension("json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: SignalSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Self {
            theta,
            class_label: sidecar.class_label,
            provenance: sidecar.provenance,
        })
    }
}

/// Per-pixel mean of a series of dark frames.
pub fn estimate_age_signal(frames: &[Image], class_label: usize) -> Result<AgeSignal> {
    let mut acc = MeanAccumulator::new();
    for f in frames {
        acc.add(f)?;
    }
    Ok(AgeSignal {
        theta: acc.finish()?,
        class_label,
        provenance: Provenance::EstimatedFromFrames,
    })
}

/// Adds the signal to the content without clipping.
pub fn embed_age_signal(content: &Image, signal: &AgeSignal) -> Result<Image> {
    content.ensure_same_shape(
        &signal.theta,
        "embedding needs content and signal of equal shape",
    )?;
    content.zip_with(&signal.theta, |a, b| a + b)
}

/// Enlarges `content` to `target_h x target_w` by symmetric (edge-inclusive)
/// reflection, keeping the content centred with the top/left margin
/// `floor((target - size) / 2)`. Only one reflection per side is allowed.
pub fn mirror_expand(content: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    let (h, w, c) = content.shape();
    if target_h < h || target_w < w {
        return Err(Error::Shape(format!(
            "target {target_h}x{target_w} smaller than content {h}x{w}"
        )));
    }
    let (top, left) = ((target_h - h) / 2, (target_w - w) / 2);
    let (bottom, right) = (target_h - h - top, target_w - w - left);
    if top.max(bottom) > h || left.max(right) > w {
        return Err(Error::Shape(format!(
            "expanding {h}x{w} to {target_h}x{target_w} needs more than one reflection"
        )));
    }
    let data = content.data();
    let mut out = Vec::with_capacity(target_h * target_w * c);
    for y in 0..target_h {
        let sy = reflect(y as isize - top as isize, h);
        for x in 0..target_w {
            let sx = reflect(x as isize - left as isize, w);
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&data[base..base + c]);
        }
    }
    Ok(Image::from_parts(target_h, target_w, c, out))
}

/// A pixel whose 5x5 median residual exceeds the detection threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedDefect {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub magnitude: f64,
}

/// Pixels with `|avg - median5(avg)| > threshold`, strongest first
/// (ties by position).
pub fn detect_strong_defects(avg: &Image, threshold: f64) -> Result<Vec<DetectedDefect>> {
    let smooth = median_filter(avg, 5)?;
    let (h, w, c) = avg.shape();
    let mut hits = Vec::new();
    for row in 0..h {
        for col in 0..w {
            for channel in 0..c {
                let magnitude = (avg.get(row, col, channel) - smooth.get(row, col, channel)).abs();
                if magnitude > threshold {
                    hits.push(DetectedDefect {
                        row,
                        col,
                        channel,
                        magnitude,
                    });
                }
            }
        }
    }
    hits.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then((a.row, a.col, a.channel).cmp(&(b.row, b.col, b.channel)))
    });
    Ok(hits)
}

/// Parameters of the procedural content generator.
///
/// An image is a linear brightness gradient, plus a handful of ellipses and
/// rectangles with soft (smoothstep) borders, plus low-amplitude texture
/// (3x3 box-blurred Gaussian noise), clamped to `[10, 215]`. With
/// `prnu_sigma > 0` a fixed multiplicative sensor pattern `I * K` is added.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContentStyle {
    pub mean_brightness: f64,
    pub texture: f64,
    pub edge_softness: f64,
    pub max_shapes: usize,
    pub prnu_sigma: f64,
}

impl Default for ContentStyle {
    fn default() -> Self {
        Self {
            mean_brightness: 110.0,
            texture: 1.5,
            edge_softness: 4.0,
            max_shapes: 6,
            prnu_sigma: 0.0,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Draws one content image.
pub fn generate_content(
    height: usize,
    width: usize,
    channels: usize,
    style: &ContentStyle,
    rng: &mut Rng,
) -> Image {
    let (hf, wf) = (height as f64, width as f64);
    let mut planes = vec![vec![0.0; height * width]; channels];

    let base = style.mean_brightness + rng.uniform_range(-30.0, 30.0);
    let gy = rng.uniform_range(-35.0, 35.0);
    let gx = rng.uniform_range(-35.0, 35.0);
    let tints: Vec<f64> = (0..channels)
        .map(|_| rng.uniform_range(-10.0, 10.0))
        .collect();
    for (ch, plane) in planes.iter_mut().enumerate() {
        for y in 0..height {
            for x in 0..width {
                plane[y * width + x] =
                    base + tints[ch] + gy * (y as f64 / hf - 0.5) + gx * (x as f64 / wf - 0.5);
            }
        }
    }

    let shapes = 1 + rng.below(style.max_shapes.max(1));
    let soft = style.edge_softness.max(1e-6);
    for _ in 0..shapes {
        let cy = rng.uniform() * hf;
        let cx = rng.uniform() * wf;
        let ry = rng.uniform_range(0.08, 0.3) * hf;
        let rx = rng.uniform_range(0.08, 0.3) * wf;
        let ellipse = rng.uniform() < 0.5;
        let amp: Vec<f64> = {
            let a = rng.uniform_range(-40.0, 40.0);
            (0..channels)
                .map(|_| a + rng.uniform_range(-8.0, 8.0))
                .collect()
        };
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                // Approximate signed distance to the border, in pixels.
                let dist = if ellipse {
                    ((dy * dy + dx * dx).sqrt() - 1.0) * ry.min(rx)
                } else {
                    ((dy.abs() - 1.0) * ry).max((dx.abs() - 1.0) * rx)
                };
                let weight = 1.0 - smoothstep(dist / soft + 0.5);
                if weight > 0.0 {
                    for (ch, plane) in planes.iter_mut().enumerate() {
                        plane[y * width + x] += weight * amp[ch];
                    }
                }
            }
        }
    }

    if style.texture > 0.0 {
        for plane in planes.iter_mut() {
            let noise: Vec<f64> = (0..height * width).map(|_| rng.normal()).collect();
            for y in 0..height {
                for x in 0..width {
                    let mut s = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let yy = reflect(y as isize + dy, height);
                            let xx = reflect(x as isize + dx, width);
                            s += noise[yy * width + xx];
                        }
                    }
                    // Box blur of unit-variance noise has std 1/3.
                    plane[y * width + x] += style.texture * s / 3.0;
                }
            }
        }
    }

    let mut data = vec![0.0; height * width * channels];
    for (ch, plane) in planes.iter().enumerate() {
        for (i, v) in plane.iter().enumerate() {
            data[i * channels + ch] = v.clamp(10.0, 215.0);
        }
    }
    Image::from_parts(height, width, channels, data)
}

/// Builds `content_count` content images and emits one copy per class with
/// that class's signal embedded. Content is identical across classes by
/// construction; it is mirror-expanded when the signals are larger than
/// `image_size`. Items are ordered class-major.
pub fn generate_synthetic_dataset(
    content_count: usize,
    image_size: usize,
    channels: usize,
    signals: &[AgeSignal],
    style: &ContentStyle,
    rng: &Rng,
) -> Result<LabeledDataset> {
    if signals.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two class signals".into(),
        ));
    }
    if content_count == 0 {
        return Err(Error::InvalidArgument("content_count must be >= 1".into()));
    }
    let shape = signals[0].theta.shape();
    if signals.iter().any(|s| s.theta.shape() != shape) {
        return Err(Error::Shape("class signals differ in shape".into()));
    }
    if shape.2 != channels {
        return Err(Error::Shape(format!(
            "signals have {} channels, content {channels}",
            shape.2
        )));
    }
    let prnu = if style.prnu_sigma > 0.0 {
        let mut r = rng.derive("prnu", 0);
        Some(
            Image::from_fn(shape.0, shape.1, shape.2, |_, _, _| {
                style.prnu_sigma * r.normal()
            })
            .expect("finite PRNU field"),
        )
    } else {
        None
    };
    let contents: Vec<Arc<Image>> = (0..content_count)
        .map(|i| {
            let mut r = rng.derive("content", i as u64);
            let mut img = generate_content(image_size, image_size, channels, style, &mut r);
            if (img.height(), img.width()) != (shape.0, shape.1) {
                img = mirror_expand(&img, shape.0, shape.1)?;
            }
            if let Some(k) = &prnu {
                img = img.zip_with(k, |i, k| i + i * k)?;
            }
            Ok(Arc::new(img))
        })
        .collect::<Result<_>>()?;
    let signal_images: Vec<Arc<Image>> =
        signals.iter().map(|s| Arc::new(s.theta.clone())).collect();
    let mut items = Vec::with_capacity(content_count * signals.len());
    for (k, signal) in signal_images.iter().enumerate() {
        for content in &contents {
            items.push(Item::new(
                ImageSource::Embedded {
                    content: content.clone(),
                    signal: signal.clone(),
                },
                k,
            ));
        }
    }
    LabeledDataset::new(items, signals.len())
}

/// A dataset without any age signal whose classes differ only in global
/// brightness: class `k` draws independent content with
/// `mean_brightness = brightness[k]`.
pub fn generate_content_bias_dataset(
    per_class: usize,
    image_size: usize,
    channels: usize,
    brightness: &[f64],
    style: &ContentStyle,
    rng: &Rng,
) -> Result<LabeledDataset> {
    if per_class == 0 || image_size == 0 {
        return Err(Error::InvalidArgument(
            "need at least one image per class".into(),
        ));
    }
    let mut items = Vec::with_capacity(per_class * brightness.len());
    for (k, &b) in brightness.iter().enumerate() {
        let class_style = ContentStyle {
            mean_brightness: b,
            ..*style
        };
        for i in 0..per_class {
            let mut r = rng.derive("bias-content", (k * per_class + i) as u64);
            let img = generate_content(image_size, image_size, channels, &class_style, &mut r);
            items.push(Item::new(ImageSource::Memory(Arc::new(img)), k));
        }
    }
    LabeledDataset::new(items, brightness.len())
}

/// Settings of the complete synthetic pipeline: accumulating defect maps,
/// dark-frame series, estimated class signals and embedded content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub content_count: usize,
    pub image_size: usize,
    /// Sensor (signal) size; content is mirror-expanded to it when larger.
    pub sensor_size: Option<usize>,
    pub channels: usize,
    /// Defects present in the first class.
    pub base_defects: usize,
    /// Defects appearing between consecutive classes.
    pub new_defects_per_class: usize,
    pub dark_current: (f64, f64),
    pub offset: (f64, f64),
    pub tau: f64,
    pub noise_sigma: f64,
    pub dark_frames: usize,
    pub defect_spacing: usize,
    pub content: ContentStyle,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            content_count: 400,
            image_size: 256,
            sensor_size: None,
            channels: 1,
            base_defects: 20,
            new_defects_per_class: 60,
            dark_current: (15.0, 30.0),
            offset: (5.0, 10.0),
            tau: 1.5,
            noise_sigma: 2.0,
            dark_frames: 64,
            defect_spacing: 3,
            content: ContentStyle::default(),
        }
    }
}

/// Output of [`build_scenario`].
#[derive(Clone, Debug)]
pub struct SyntheticScenario {
    pub defect_maps: Vec<DefectMap>,
    pub signals: Vec<AgeSignal>,
    pub dataset: LabeledDataset,
}

/// Runs the synthetic pipeline. Class `k + 1` inherits every defect of class
/// `k` and gains `new_defects_per_class` more.
pub fn build_scenario(cfg: &SyntheticConfig, rng: &Rng) -> Result<SyntheticScenario> {
    if cfg.classes < 2 || cfg.dark_frames == 0 || cfg.image_size == 0 {
        return Err(Error::InvalidArgument(
            "synthetic config needs >= 2 classes, >= 1 dark frame and a positive image size".into(),
        ));
    }
    if !(1..=3).contains(&cfg.channels) || cfg.channels == 2 {
        return Err(Error::InvalidArgument("channels must be 1 or 3".into()));
    }
    let sensor = cfg.sensor_size.unwrap_or(cfg.image_size);
    let params = CaptureParams {
        tau: cfg.tau,
        noise_sigma: cfg.noise_sigma,
    };
    let mut maps = Vec::with_capacity(cfg.classes);
    let mut current = DefectMap::empty(sensor, sensor, cfg.channels);
    for k in 0..cfg.classes {
        let count = if k == 0 {
            cfg.base_defects
        } else {
            cfg.new_defects_per_class
        };
        let mut r = rng.derive("defects", k as u64);
        current = current.grow(
            count,
            cfg.dark_current,
            cfg.offset,
            cfg.defect_spacing,
            &mut r,
        )?;
        maps.push(current.clone());
    }
    let mut signals = Vec::with_capacity(cfg.classes);
    for (k, map) in maps.iter().enumerate() {
        let class_rng = rng.derive("dark-frames", k as u64);
        let frames: Vec<Image> = (0..cfg.dark_frames)
            .map(|f| simulate_dark_frame(map, &params, &mut class_rng.derive("frame", f as u64)))
            .collect::<Result<_>>()?;
        signals.push(estimate_age_signal(&frames, k)?);
    }
    let dataset = generate_synthetic_dataset(
        cfg.content_count,
        cfg.image_size,
        cfg.channels,
        &signals,
        &cfg.content,
        &rng.derive("content-set", 0),
    )?;
    Ok(SyntheticScenario {
        defect_maps: maps,
        signals,
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avg::{average_image, filtered_average};

    fn one_defect(d: f64, c: f64) -> DefectMap {
        DefectMap::new(
            8,
            8,
            1,
            vec![Defect {
                row: 3,
                col: 3,
                channel: 0,
                d,
                c,
            }],
        )
        .unwrap()
    }

    #[test]
    fn dark_frame_arithmetic() {
        let params = CaptureParams {
            tau: 2.0,
            noise_sigma: 0.0,
        };
        let empty = DefectMap::empty(4, 4, 1);
        let f = simulate_dark_frame(&empty, &params, &mut Rng::new(0)).unwrap();
        assert_eq!(f, Image::zeros(4, 4, 1));

        let f = simulate_dark_frame(&one_defect(10.0, 5.0), &params, &mut Rng::new(0)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(f.get(y, x, 0), if (y, x) == (3, 3) { 25.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dark_frame_mean_obeys_clt() {
        let map = one_defect(10.0, 5.0);
        let params = CaptureParams {
            tau: 2.0,
            noise_sigma: 4.0,
        };
        let root = Rng::new(21);
        let frames: Vec<Image> = (0..1000)
            .map(|i| simulate_dark_frame(&map, &params, &mut root.derive("f", i)).unwrap())
            .collect();
        let mean = frames.iter().map(|f| f.get(3, 3, 0)).sum::<f64>() / 1000.0;
        assert!(
            (mean - 25.0).abs() < 3.0 * 4.0 / 1000f64.sqrt(),
            "mean {mean}"
        );
        assert!(frames.iter().all(|f| f.min() >= 0.0));
    }

    #[test]
    fn estimation_examples() {
        let f = Image::filled(3, 3, 1, 7.0);
        let s = estimate_age_signal(&[f.clone(), f.clone()], 1).unwrap();
        assert_eq!(s.theta, f);
        assert_eq!(s.provenance, Provenance::EstimatedFromFrames);
        let s =
            estimate_age_signal(&[Image::zeros(2, 2, 1), Image::filled(2, 2, 1, 10.0)], 0).unwrap();
        assert_eq!(s.theta, Image::filled(2, 2, 1, 5.0));
        assert!(estimate_age_signal(&[], 0).is_err());
    }

    #[test]
    fn estimation_error_bound_with_64_frames() {
        let map = DefectMap::empty(16, 16, 1)
            .grow(12, (15.0, 30.0), (5.0, 10.0), 3, &mut Rng::new(1))
            .unwrap();
        let params = CaptureParams {
            tau: 1.5,
            noise_sigma: 3.0,
        };
        let root = Rng::new(77);
        let frames: Vec<Image> = (0..64)
            .map(|i| simulate_dark_frame(&map, &params, &mut root.derive("f", i)).unwrap())
            .collect();
        let est = estimate_age_signal(&frames, 0).unwrap();
        let truth = expected_dark_frame(&map, 1.5);
        for e in map.entries() {
            let err = (est.theta.get(e.row, e.col, 0) - truth.get(e.row, e.col, 0)).abs();
            assert!(err <= 4.0 * 3.0 / 8.0, "error {err}");
        }
    }

    #[test]
    fn embed_examples() {
        let content = Image::filled(8, 8, 1, 100.0);
        let zero = AgeSignal {
            theta: Image::zeros(8, 8, 1),
            class_label: 0,
            provenance: Provenance::Simulated,
        };
        assert_eq!(embed_age_signal(&content, &zero).unwrap(), content);
        let sig = AgeSignal {
            theta: expected_dark_frame(&one_defect(10.0, 5.0), 2.0),
            class_label: 1,
            provenance: Provenance::Simulated,
        };
        let out = embed_age_signal(&content, &sig).unwrap();
        assert_eq!(out.get(3, 3, 0), 125.0);
        assert_eq!(out.get(0, 0, 0), 100.0);
        assert!(embed_age_signal(&Image::zeros(4, 4, 1), &sig).is_err());
    }

    #[test]
    fn embedding_is_not_clipped() {
        let content = Image::filled(8, 8, 1, 250.0);
        let sig = AgeSignal {
            theta: expected_dark_frame(&one_defect(10.0, 5.0), 2.0),
            class_label: 1,
            provenance: Provenance::Simulated,
        };
        assert_eq!(
            embed_age_signal(&content, &sig).unwrap().get(3, 3, 0),
            275.0
        );
    }

    #[test]
    fn mirror_examples() {
        let row = Image::new(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mirror_expand(&row, 1, 3).unwrap(), row);
        assert_eq!(
            mirror_expand(&row, 1, 5).unwrap().data(),
            &[1.0, 1.0, 2.0, 3.0, 3.0]
        );
        assert_eq!(
            mirror_expand(&row, 1, 9).unwrap().data(),
            &[3.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 2.0, 1.0]
        );
        assert!(mirror_expand(&row, 1, 2).is_err());
        assert!(mirror_expand(&row, 1, 10).is_err());

        let checker = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let big = mirror_expand(&checker, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                // Quadrant copies reflect about the original's borders.
                let sy = reflect(y as isize - 1, 2);
                let sx = reflect(x as isize - 1, 2);
                assert_eq!(big.get(y, x, 0), checker.get(sy, sx, 0));
            }
        }
        assert_eq!(big.crop(1, 1, 2, 2).unwrap(), checker);
        // Top-left quadrant is the checkerboard flipped both ways.
        assert_eq!(big.get(0, 0, 0), checker.get(0, 0, 0));
        assert_eq!(big.get(0, 1, 0), checker.get(0, 0, 0));
    }

    #[test]
    fn defect_detection_examples() {
        assert!(detect_strong_defects(&Image::filled(8, 8, 1, 40.0), 1.0)
            .unwrap()
            .is_empty());

        let mut img = Image::filled(12, 12, 1, 80.0);
        img.set(5, 7, 0, 110.0);
        let hits = detect_strong_defects(&img, 20.0).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].row, hits[0].col, hits[0].magnitude), (5, 7, 30.0));
    }

    #[test]
    fn planted_defects_are_recovered_from_class_average_difference() {
        let base = DefectMap::empty(96, 96, 1)
            .grow(10, (15.0, 30.0), (5.0, 10.0), 3, &mut Rng::new(3))
            .unwrap();
        let grown = base
            .grow(27, (15.0, 30.0), (5.0, 10.0), 3, &mut Rng::new(4))
            .unwrap();
        let content = generate_content(
            96,
            96,
            1,
            &ContentStyle {
                texture: 0.0,
                ..Default::default()
            },
            &mut Rng::new(5),
        );
        let a = content
            .zip_with(&expected_dark_frame(&base, 1.5), |a, b| a + b)
            .unwrap();
        let b = content
            .zip_with(&expected_dark_frame(&grown, 1.5), |a, b| a + b)
            .unwrap();
        let diff = b.zip_with(&a, |x, y| x - y).unwrap();
        let hits = detect_strong_defects(&diff, 20.0).unwrap();
        let mut found: Vec<(usize, usize)> = hits.iter().map(|h| (h.row, h.col)).collect();
        let mut planted: Vec<(usize, usize)> = grown.entries()[10..]
            .iter()
            .map(|e| (e.row, e.col))
            .collect();
        found.sort_unstable();
        planted.sort_unstable();
        assert_eq!(found, planted);
    }

    #[test]
    fn filtered_average_hides_defects() {
        let map = DefectMap::empty(32, 32, 1)
            .grow(15, (15.0, 30.0), (5.0, 10.0), 3, &mut Rng::new(9))
            .unwrap();
        let mut img = Image::filled(32, 32, 1, 60.0);
        img = img
            .zip_with(&expected_dark_frame(&map, 1.5), |a, b| a + b)
            .unwrap();
        assert_eq!(detect_strong_defects(&img, 20.0).unwrap().len(), 15);
        let filtered = filtered_average(&img).unwrap();
        assert!(detect_strong_defects(&filtered, 20.0).unwrap().is_empty());
    }

    #[test]
    fn defect_map_validation_and_csv() {
        let d = |row, col| Defect {
            row,
            col,
            channel: 0,
            d: 1.0,
            c: 2.0,
        };
        assert!(DefectMap::new(4, 4, 1, vec![d(4, 0)]).is_err());
        assert!(DefectMap::new(4, 4, 1, vec![d(1, 1), d(1, 1)]).is_err());
        let map = DefectMap::new(4, 4, 1, vec![d(1, 1), d(2, 3)]).unwrap();
        let text = map.to_csv();
        assert!(text.starts_with("row,col,channel,D,c\n1,1,0,1,2\n"));
        assert_eq!(DefectMap::from_csv(&text, 4, 4, 1).unwrap(), map);
        assert!(DefectMap::from_csv("r,c\n", 4, 4, 1).is_err());
    }

    #[test]
    fn grown_maps_are_supersets() {
        let a = DefectMap::empty(64, 64, 3)
            .grow(5, (1.0, 2.0), (0.0, 1.0), 3, &mut Rng::new(0))
            .unwrap();
        let b = a
            .grow(7, (1.0, 2.0), (0.0, 1.0), 3, &mut Rng::new(1))
            .unwrap();
        assert_eq!(&b.entries()[..5], a.entries());
        assert_eq!(b.len(), 12);
    }

    #[test]
    fn synthetic_dataset_examples() {
        let zero = |k| AgeSignal {
            theta: Image::zeros(16, 16, 1),
            class_label: k,
            provenance: Provenance::Simulated,
        };
        let ds = generate_synthetic_dataset(
            1,
            16,
            1,
            &[zero(0), zero(1)],
            &ContentStyle::default(),
            &Rng::new(0),
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.load(0).unwrap(), ds.load(1).unwrap());

        let map0 = DefectMap::empty(16, 16, 1)
            .grow(3, (15.0, 30.0), (5.0, 10.0), 3, &mut Rng::new(1))
            .unwrap();
        let map1 = map0
            .grow(4, (15.0, 30.0), (5.0, 10.0), 3, &mut Rng::new(2))
            .unwrap();
        let sig = |m: &DefectMap, k| AgeSignal {
            theta: expected_dark_frame(m, 1.5),
            class_label: k,
            provenance: Provenance::Simulated,
        };
        let signals = [sig(&map0, 0), sig(&map1, 1)];
        let ds =
            generate_synthetic_dataset(6, 16, 1, &signals, &ContentStyle::default(), &Rng::new(4))
                .unwrap();
        let class_avg = |k| {
            let imgs: Vec<Image> = ds
                .class_indices(k)
                .iter()
                .map(|&i| ds.load(i).unwrap())
                .collect();
            average_image(&imgs).unwrap()
        };
        let diff = class_avg(1).zip_with(&class_avg(0), |a, b| a - b).unwrap();
        let expect = signals[1]
            .theta
            .zip_with(&signals[0].theta, |a, b| a - b)
            .unwrap();
        for (a, b) in diff.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn signals_larger_than_content_trigger_mirroring() {
        let sig = |k| AgeSignal {
            theta: Image::zeros(20, 20, 1),
            class_label: k,
            provenance: Provenance::Simulated,
        };
        let ds = generate_synthetic_dataset(
            2,
            16,
            1,
            &[sig(0), sig(1)],
            &ContentStyle::default(),
            &Rng::new(0),
        )
        .unwrap();
        let img = ds.load(0).unwrap();
        assert_eq!(img.shape(), (20, 20, 1));
    }

    #[test]
    fn signal_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sig = AgeSignal {
            theta: Image::filled(3, 4, 1, 2.5),
            class_label: 1,
            provenance: Provenance::EstimatedFromFrames,
        };
        let stem = dir.path().join("class_01");
        sig.save(&stem).unwrap();
        assert_eq!(AgeSignal::load(&stem).unwrap(), sig);
    }

    #[test]
    fn scenario_is_deterministic() {
        let cfg = SyntheticConfig {
            content_count: 3,
            image_size: 24,
            base_defects: 2,
            new_defects_per_class: 3,
            dark_frames: 4,
            ..Default::default()
        };
        let a = build_scenario(&cfg, &Rng::new(5)).unwrap();
        let b = build_scenario(&cfg, &Rng::new(5)).unwrap();
        assert_eq!(a.signals, b.signals);
        assert_eq!(a.defect_maps[1].len(), 5);
        for i in 0..a.dataset.len() {
            assert_eq!(a.dataset.load(i).unwrap(), b.dataset.load(i).unwrap());
        }
    }
}
