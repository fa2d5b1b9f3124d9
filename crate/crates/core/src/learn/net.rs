//! A small fully convolutional classifier with a selectable front end,
//! trained with hand-written backpropagation in `f64`.

use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, conv_forward, pad_planes, ConvGeom};
use crate::error::{Error, Result};
use crate::filters::{
    project_constrained_slice, reinit_constrained_slice, srm_filter_bank, FilterBank,
};
use crate::image::Image;
use crate::rng::Rng;

/// First layer of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontEnd {
    /// Pixels go straight into the body.
    Raw,
    /// Trainable prediction-error filters: centre `-1`, off-centre weights
    /// summing to `1` per input slice, no bias.
    Constrained { kernels: usize, size: usize },
    /// A fixed high-pass filter bank; each kernel is applied to every input
    /// channel and the responses are summed.
    FixedBank { bank: String },
}

impl FrontEnd {
    fn out_channels(&self, in_channels: usize) -> Result<usize> {
        Ok(match self {
            FrontEnd::Raw => in_channels,
            FrontEnd::Constrained { kernels, .. } => *kernels,
            FrontEnd::FixedBank { bank } => load_bank(bank)?.len(),
        })
    }
}

fn load_bank(name: &str) -> Result<FilterBank> {
    match name {
        "srm_basic" => srm_filter_bank(),
        other => Err(Error::InvalidArgument(format!(
            "unknown filter bank '{other}' (available: srm_basic)"
        ))),
    }
}

/// One body layer: convolution, bias, ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
}

/// Loss, flat parameter gradient and class probabilities of one sample.
pub type SampleGrad = (f64, Vec<f64>, Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyNetArch {
    pub in_channels: usize,
    pub num_classes: usize,
    pub front_end: FrontEnd,
    pub body: Vec<ConvSpec>,
    /// Inputs are mapped to `(x - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
}

impl TinyNetArch {
    /// Front end followed by conv 3x3 -> 8 (stride 1) and conv 3x3 -> 16
    /// (stride 2), global average pooling and a linear layer.
    pub fn new(in_channels: usize, num_classes: usize, front_end: FrontEnd) -> Self {
        Self {
            in_channels,
            num_classes,
            front_end,
            body: vec![
                ConvSpec {
                    out_channels: 8,
                    size: 3,
                    stride: 1,
                },
                ConvSpec {
                    out_channels: 16,
                    size: 3,
                    stride: 2,
                },
            ],
            input_offset: 128.0,
            input_scale: 1.0 / 64.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_channels == 0 {
            return bad("network needs at least one input channel".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(self.input_scale.is_finite()
            && self.input_scale > 0.0
            && self.input_offset.is_finite())
        {
            return bad("input scale must be positive and finite".into());
        }
        if let FrontEnd::Constrained { kernels, size } = self.front_end {
            if kernels == 0 || size < 3 || size % 2 == 0 {
                return bad(format!(
                    "constrained front end needs >= 1 kernel of odd size >= 3, got {kernels} x {size}"
                ));
            }
        }
        self.front_end.out_channels(self.in_channels)?;
        for (i, l) in self.body.iter().enumerate() {
            if l.out_channels == 0 || l.size == 0 || l.size % 2 == 0 || l.stride == 0 {
                return bad(format!("invalid body layer {i}: {l:?}"));
            }
        }
        Ok(())
    }

    /// Smallest input side the network accepts.
    pub fn min_input(&self) -> usize {
        let mut need = 1usize;
        let front = match self.front_end {
            FrontEnd::Constrained { size, .. } => size,
            FrontEnd::FixedBank { .. } => 5,
            FrontEnd::Raw => 1,
        };
        for l in &self.body {
            need = need.max(l.size);
        }
        need.max(front).max(2)
    }
}

/// Name, shape and position of a parameter tensor inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNet {
    arch: TinyNetArch,
    layout: Vec<ParamBlock>,
    params: Vec<f64>,
    /// Fixed front-end weights `[out][in][k][k]` for a filter bank.
    bank: Option<(usize, Vec<f64>)>,
}

/// Loss, gradient and prediction for a batch.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub correct: usize,
}

struct LayerCache {
    geom: ConvGeom,
    padded: Vec<f64>,
    pre: Vec<f64>,
}

fn layout_for(arch: &TinyNetArch) -> Result<Vec<ParamBlock>> {
    let mut blocks = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        blocks.push(ParamBlock {
            name,
            shape,
            offset: 0,
        })
    };
    if let FrontEnd::Constrained { kernels, size } = arch.front_end {
        push(
            "front.weight".into(),
            vec![kernels, arch.in_channels, size, size],
        );
    }
    let mut c = arch.front_end.out_channels(arch.in_channels)?;
    for (i, l) in arch.body.iter().enumerate() {
        push(
            format!("conv{i}.weight"),
            vec![l.out_channels, c, l.size, l.size],
        );
        push(format!("conv{i}.bias"), vec![l.out_channels]);
        c = l.out_channels;
    }
    push("fc.weight".into(), vec![arch.num_classes, c]);
    push("fc.bias".into(), vec![arch.num_classes]);
    let mut offset = 0;
    for b in &mut blocks {
        b.offset = offset;
        offset += b.len();
    }
    Ok(blocks)
}

fn bank_weights(arch: &TinyNetArch) -> Result<Option<(usize, Vec<f64>)>> {
    let FrontEnd::FixedBank { bank } = &arch.front_end else {
        return Ok(None);
    };
    let bank = load_bank(bank)?;
    let k = bank.size();
    let mut w = Vec::with_capacity(bank.len() * arch.in_channels * k * k);
    for kernel in bank.normalized() {
        for _ in 0..arch.in_channels {
            w.extend_from_slice(kernel.weights());
        }
    }
    Ok(Some((k, w)))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl TinyNet {
    /// Xavier-uniform weights, zero biases; constrained slices start with
    /// uniform `[0, 1)` off-centre weights projected onto the constraint.
    pub fn new(arch: TinyNetArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layout = layout_for(&arch)?;
        let total = layout.iter().map(ParamBlock::len).sum();
        let mut params = vec![0.0; total];
        for b in &layout {
            let p = &mut params[b.range()];
            if b.name == "front.weight" {
                let k = b.shape[2];
                for slice in p.chunks_mut(k * k) {
                    reinit_constrained_slice(slice, k, rng);
                }
            } else if b.name.ends_with(".weight") {
                let (fan_in, fan_out) = if b.shape.len() == 4 {
                    let kk = b.shape[2] * b.shape[3];
                    (b.shape[1] * kk, b.shape[0] * kk)
                } else {
                    (b.shape[1], b.shape[0])
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in p.iter_mut() {
                    *w = rng.uniform_range(-a, a);
                }
            }
        }
        let bank = bank_weights(&arch)?;
        Ok(Self {
            arch,
            layout,
            params,
            bank,
        })
    }

    pub fn from_params(arch: TinyNetArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = layout_for(&arch)?;
        let total: usize = layout.iter().map(ParamBlock::len).sum();
        if params.len() != total {
            return Err(Error::Format(format!(
                "architecture needs {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        let bank = bank_weights(&arch)?;
        Ok(Self {
            arch,
            layout,
            params,
            bank,
        })
    }

    pub fn arch(&self) -> &TinyNetArch {
        &self.arch
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.params[b.range()])
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn block_range(&self, name: &str) -> std::ops::Range<usize> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .map(ParamBlock::range)
            .expect("parameter block exists")
    }

    /// Re-applies the constrained-convolution rule to the front end.
    pub fn project_front_end(&mut self, rng: &mut Rng) {
        if let FrontEnd::Constrained { size, .. } = self.arch.front_end {
            let r = self.block_range("front.weight");
            for (d, slice) in self.params[r].chunks_mut(size * size).enumerate() {
                if !project_constrained_slice(slice, size) {
                    log::warn!("constrained front-end slice {d} degenerate; re-initialized");
                    reinit_constrained_slice(slice, size, rng);
                }
            }
        }
    }

    /// Largest deviation from the constraint over all front-end slices
    /// (0 for unconstrained front ends).
    pub fn constraint_violation(&self) -> f64 {
        let FrontEnd::Constrained { size, .. } = self.arch.front_end else {
            return 0.0;
        };
        let centre = size * size / 2;
        self.block("front.weight")
            .unwrap_or(&[])
            .chunks(size * size)
            .map(|s| {
                let off: f64 = s
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != centre)
                    .map(|(_, w)| w)
                    .sum();
                (s[centre] + 1.0).abs().max((off - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.channels() != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} channel(s), got {}",
                self.arch.in_channels,
                image.channels()
            )));
        }
        let min = self.arch.min_input();
        if image.height() < min || image.width() < min {
            return Err(Error::Shape(format!(
                "network input must be at least {min}x{min}, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn planar_input(&self, image: &Image) -> Vec<f64> {
        let (h, w, c) = image.shape();
        let (off, scale) = (self.arch.input_offset, self.arch.input_scale);
        let mut out = vec![0.0; c * h * w];
        for (i, px) in image.data().chunks(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                out[ch * h * w + i] = (v - off) * scale;
            }
        }
        out
    }

    /// Forward pass; returns logits and, for backprop, the layer caches.
    fn forward_cached(&self, image: &Image) -> (Vec<f64>, Vec<LayerCache>, Vec<f64>) {
        let (h, w, c) = image.shape();
        let mut x = self.planar_input(image);
        let mut caches = Vec::with_capacity(self.arch.body.len() + 1);
        let mut ch = c;
        let (mut hh, mut ww) = (h, w);
        match &self.arch.front_end {
            FrontEnd::Raw => {}
            FrontEnd::Constrained { kernels, size } => {
                let geom = ConvGeom {
                    c_in: ch,
                    h: hh,
                    w: ww,
                    c_out: *kernels,
                    k: *size,
                    stride: 1,
                };
                let padded = pad_planes(&x, &geom);
                let out = conv_forward(
                    &padded,
                    &geom,
                    &self.params[self.block_range("front.weight")],
                    None,
                );
                caches.push(LayerCache {
                    geom,
                    padded,
                    pre: Vec::new(),
                });
                x = out;
                ch = *kernels;
            }
            FrontEnd::FixedBank { .. } => {
                let (k, weights) = self.bank.as_ref().expect("bank weights loaded");
                let geom = ConvGeom {
                    c_in: ch,
                    h: hh,
                    w: ww,
                    c_out: weights.len() / (ch * k * k),
                    k: *k,
                    stride: 1,
                };
                x = conv_forward(&pad_planes(&x, &geom), &geom, weights, None);
                ch = geom.c_out;
            }
        }
        for (i, l) in self.arch.body.iter().enumerate() {
            let geom = ConvGeom {
                c_in: ch,
                h: hh,
                w: ww,
                c_out: l.out_channels,
                k: l.size,
                stride: l.stride,
            };
            let padded = pad_planes(&x, &geom);
            let wr = self.block_range(&format!("conv{i}.weight"));
            let br = self.block_range(&format!("conv{i}.bias"));
            let pre = conv_forward(&padded, &geom, &self.params[wr], Some(&self.params[br]));
            x = pre.iter().map(|&v| v.max(0.0)).collect();
            caches.push(LayerCache { geom, padded, pre });
            ch = l.out_channels;
            hh = geom.out_h();
            ww = geom.out_w();
        }
        let area = (hh * ww) as f64;
        let pooled: Vec<f64> = x
            .chunks(hh * ww)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let fw = &self.params[self.block_range("fc.weight")];
        let fb = &self.params[self.block_range("fc.bias")];
        let logits = (0..self.arch.num_classes)
            .map(|k| {
                fb[k]
                    + fw[k * ch..(k + 1) * ch]
                        .iter()
                        .zip(&pooled)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        (logits, caches, pooled)
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let (logits, _, _) = self.forward_cached(image);
        finite(logits)
    }

    /// Smallest `|pre-activation|` over every ReLU unit for `image`: how far
    /// the input sits from a non-differentiable point of the network.
    pub fn relu_margin(&self, image: &Image) -> Result<f64> {
        self.check_input(image)?;
        let (_, caches, _) = self.forward_cached(image);
        let body_start = caches.len() - self.arch.body.len();
        Ok(caches[body_start..]
            .iter()
            .flat_map(|c| c.pre.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs())))
    }

    /// Softmax class probabilities.
    pub fn predict_proba(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(image)?))
    }

    /// Cross-entropy loss of one sample and its gradient with respect to
    /// every trainable parameter.
    pub fn loss_and_grad(&self, image: &Image, label: usize) -> Result<SampleGrad> {
        self.check_input(image)?;
        if label >= self.arch.num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.arch.num_classes
            )));
        }
        let (logits, caches, pooled) = self.forward_cached(image);
        let probs = softmax(&logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut grad = vec![0.0; self.params.len()];
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, p)| p - if k == label { 1.0 } else { 0.0 })
            .collect();
        let ch = pooled.len();
        let fwr = self.block_range("fc.weight");
        let fbr = self.block_range("fc.bias");
        let mut dpooled = vec![0.0; ch];
        for (k, &d) in dlogits.iter().enumerate() {
            grad[fbr.start + k] += d;
            for j in 0..ch {
                grad[fwr.start + k * ch + j] += d * pooled[j];
                dpooled[j] += d * self.params[fwr.start + k * ch + j];
            }
        }
        let body_start = caches.len() - self.arch.body.len();
        let last = &caches[caches.len() - 1].geom;
        let area = last.out_h() * last.out_w();
        let mut dx: Vec<f64> = dpooled
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d / area as f64, area))
            .collect();
        for i in (0..self.arch.body.len()).rev() {
            let cache = &caches[body_start + i];
            for (d, &z) in dx.iter_mut().zip(&cache.pre) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            let wr = self.block_range(&format!("conv{i}.weight"));
            let br = self.block_range(&format!("conv{i}.bias"));
            let need_input = i > 0 || body_start > 0;
            let mut din =
                need_input.then(|| vec![0.0; cache.geom.c_in * cache.geom.h * cache.geom.w]);
            let (gw, gb) = split_two(&mut grad, wr.clone(), br);
            conv_backward(
                &cache.padded,
                &cache.geom,
                &self.params[wr],
                &dx,
                gw,
                Some(gb),
                din.as_deref_mut(),
            );
            match din {
                Some(d) => dx = d,
                None => break,
            }
        }
        if body_start > 0 {
            let cache = &caches[0];
            let wr = self.block_range("front.weight");
            conv_backward(
                &cache.padded,
                &cache.geom,
                &self.params[wr.clone()],
                &dx,
                &mut grad[wr],
                None,
                None,
            );
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite loss or gradient".into()));
        }
        Ok((loss, grad, probs))
    }

    /// Mean loss and mean gradient over a batch. Samples are processed in
    /// parallel and reduced in index order, so the result does not depend
    /// on the number of threads.
    pub fn batch_loss_and_grad(&self, batch: &[(&Image, usize)]) -> Result<BatchGrad> {
        use rayon::prelude::*;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let per: Vec<Result<SampleGrad>> = batch
            .par_iter()
            .map(|(img, label)| self.loss_and_grad(img, *label))
            .collect();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        let mut correct = 0;
        for (r, (_, label)) in per.into_iter().zip(batch) {
            let (l, g, p) = r?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
            if argmax(&p) == *label {
                correct += 1;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(BatchGrad {
            loss: loss / n,
            grad,
            correct,
        })
    }

    /// Mean cross-entropy over a batch, without gradients.
    pub fn batch_loss(&self, batch: &[(&Image, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (img, label) in batch {
            let p = self.predict_proba(img)?;
            total -= p[*label].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / batch.len() as f64)
    }
}

/// Relative error of the analytic gradient against central finite
/// differences, one entry per parameter tensor:
/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
pub fn gradient_check(
    net: &TinyNet,
    batch: &[(&Image, usize)],
    step: f64,
) -> Result<Vec<(String, f64)>> {
    let analytic = net.batch_loss_and_grad(batch)?.grad;
    let mut probe = net.clone();
    let mut out = Vec::new();
    for block in net.layout() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in block.range() {
            let orig = probe.params[i];
            probe.params[i] = orig + step;
            let up = probe.batch_loss(batch)?;
            probe.params[i] = orig - step;
            let down = probe.batch_loss(batch)?;
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel = if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        };
        out.push((block.name.clone(), rel));
    }
    Ok(out)
}

fn split_two(
    v: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

fn finite(v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Numeric("non-finite network output".into()))
    }
}
