//! Spatial filters: median filters, median residuals, the fixed high-pass
//! filter bank and the constrained-kernel projection.
//!
//! All neighbourhood operations use symmetric (edge-inclusive) border
//! padding: index `-1` maps to `0`, `-2` to `1`, `n` to `n - 1`, and so on.
//! Filtering is cross-correlation; kernels are never flipped.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

/// Maps a possibly out-of-range coordinate onto `0..n` by symmetric reflection.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Pads one channel of `image` by `pad` pixels on every side.
/// Returns a `(h + 2 pad) x (w + 2 pad)` row-major plane.
pub fn pad_plane(image: &Image, channel: usize, pad: usize) -> Vec<f64> {
    let (h, w, c) = image.shape();
    let data = image.data();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let cols: Vec<usize> = (0..pw)
        .map(|x| reflect(x as isize - pad as isize, w))
        .collect();
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize - pad as isize, h);
        let row = &mut out[y * pw..(y + 1) * pw];
        for (dst, &sx) in row.iter_mut().zip(&cols) {
            *dst = data[(sy * w + sx) * c + channel];
        }
    }
    out
}

fn check_odd_window(image: &Image, k: usize) -> Result<()> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "window size must be odd and >= 3, got {k}"
        )));
    }
    if image.height() < k || image.width() < k {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than {k}x{k} window",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Per-channel `k x k` median with symmetric padding.
pub fn median_filter(image: &Image, k: usize) -> Result<Image> {
    check_odd_window(image, k)?;
    let (h, w, c) = image.shape();
    let r = k / 2;
    let pw = w + 2 * r;
    let mid = k * k / 2;
    let mut out = vec![0.0; image.len()];
    let mut window = vec![0.0; k * k];
    for ch in 0..c {
        let padded = pad_plane(image, ch, r);
        for y in 0..h {
            for x in 0..w {
                for dy in 0..k {
                    let src = &padded[(y + dy) * pw + x..(y + dy) * pw + x + k];
                    window[dy * k..dy * k + k].copy_from_slice(src);
                }
                let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
                out[(y * w + x) * c + ch] = *m;
            }
        }
    }
    Ok(Image::from_parts(h, w, c, out))
}

/// Absolute median residual `|Y - median3(Y)|`.
pub fn residual_transform(image: &Image) -> Result<Image> {
    let smooth = median_filter(image, 3)?;
    image.zip_with(&smooth, |a, b| (a - b).abs())
}

/// Input preprocessing bound to a classifier. It is applied to every image
/// the classifier sees: training, validation and test inputs, and the
/// members of an averaging set before they are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessing {
    #[default]
    None,
    /// `|Y - median3(Y)|`, see [`residual_transform`].
    MedianResidual,
}

impl Preprocessing {
    pub fn apply(self, image: Image) -> Result<Image> {
        match self {
            Preprocessing::None => Ok(image),
            Preprocessing::MedianResidual => residual_transform(&image),
        }
    }
}

/// A square kernel of odd size with `depth` slices, stored slice-major:
/// `weights[d * size * size + m * size + n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    depth: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, depth: usize, weights: Vec<f64>) -> Result<Self> {
        if size < 3 || size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd and >= 3, got {size}"
            )));
        }
        if depth == 0 || weights.len() != size * size * depth {
            return Err(Error::Shape(format!(
                "kernel {size}x{size}x{depth} needs {} weights, got {}",
                size * size * depth,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite kernel weight".into()));
        }
        Ok(Self {
            size,
            depth,
            weights,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn slice(&self, d: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.weights[d * n..(d + 1) * n]
    }

    pub fn get(&self, d: usize, m: usize, n: usize) -> f64 {
        self.weights[d * self.size * self.size + m * self.size + n]
    }

    /// Zero-pads to a larger odd size, keeping the centre.
    pub fn padded_to(&self, size: usize) -> Kernel {
        assert!(size >= self.size && size % 2 == 1);
        let off = (size - self.size) / 2;
        let mut weights = vec![0.0; size * size * self.depth];
        for d in 0..self.depth {
            for m in 0..self.size {
                for n in 0..self.size {
                    weights[d * size * size + (m + off) * size + n + off] = self.get(d, m, n);
                }
            }
        }
        Kernel {
            size,
            depth: self.depth,
            weights,
        }
    }
}

/// Projects one `size x size` slice onto `{centre = -1, off-centre sum = 1}`.
/// Returns `false` (leaving the slice untouched) when the off-centre sum is
/// too close to zero to rescale.
pub fn project_constrained_slice(slice: &mut [f64], size: usize) -> bool {
    let centre = (size * size) / 2;
    let sum: f64 = slice
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != centre)
        .map(|(_, w)| w)
        .sum();
    if sum.abs() < 1e-8 {
        return false;
    }
    if slice[centre] == -1.0 && (sum - 1.0).abs() <= 4.0 * f64::EPSILON {
        return true;
    }
    for (i, w) in slice.iter_mut().enumerate() {
        if i == centre {
            *w = -1.0;
        } else {
            *w /= sum;
        }
    }
    true
}

/// Re-draws a degenerate slice: off-centre weights uniform in `[0, 1)`.
pub fn reinit_constrained_slice(slice: &mut [f64], size: usize, rng: &mut Rng) {
    for w in slice.iter_mut() {
        *w = rng.uniform();
    }
    let ok = project_constrained_slice(slice, size);
    debug_assert!(ok);
}

/// Enforces the constrained-convolution rule on every depth slice: centre
/// weight `-1`, remaining weights rescaled to sum to `1`. Slices whose
/// off-centre sum vanishes are re-drawn from `rng` and a warning is logged.
pub fn project_constrained_kernel(kernel: &Kernel, rng: &mut Rng) -> Kernel {
    let mut out = kernel.clone();
    let n = kernel.size * kernel.size;
    for (d, slice) in out.weights.chunks_mut(n).enumerate() {
        if !project_constrained_slice(slice, kernel.size) {
            log::warn!("constrained kernel slice {d} degenerate; re-initialized");
            reinit_constrained_slice(slice, kernel.size, rng);
        }
    }
    out
}

/// One entry of a [`FilterBank`].
#[derive(Clone, Debug, PartialEq)]
pub struct BankKernel {
    pub name: String,
    /// Integer weights as listed in the data file, one slice.
    pub raw: Kernel,
    pub divisor: f64,
}

impl BankKernel {
    /// Effective weights (`raw / divisor`), zero-padded to `size`.
    pub fn normalized(&self, size: usize) -> Kernel {
        let padded = self.raw.padded_to(size);
        Kernel {
            size,
            depth: 1,
            weights: padded.weights.iter().map(|w| w / self.divisor).collect(),
        }
    }
}

/// A fixed (non-trainable) set of single-slice high-pass kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub name: String,
    pub kernels: Vec<BankKernel>,
}

const SRM_BASIC: &str = include_str!("../data/srm_basic.txt");

/// The bundled 30-kernel spatial-rich-model bank (`data/srm_basic.txt`).
pub fn srm_filter_bank() -> Result<FilterBank> {
    parse_filter_bank("srm_basic", SRM_BASIC)
}

/// Parses the block format: a `name, size, divisor` line followed by `size`
/// rows of `size` integers. Blank lines and `#` comments are ignored.
pub fn parse_filter_bank(name: &str, text: &str) -> Result<FilterBank> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let mut kernels = Vec::new();
    let bad = |msg: String| Error::Format(format!("filter bank `{name}`: {msg}"));
    while let Some(header) = lines.next() {
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!(
                "expected `name, size, divisor`, got `{header}`"
            )));
        }
        let size: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad size in `{header}`")))?;
        let divisor: f64 = fields[2]
            .parse()
            .map_err(|_| bad(format!("bad divisor in `{header}`")))?;
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(bad(format!("divisor must be nonzero in `{header}`")));
        }
        let mut weights = Vec::with_capacity(size * size);
        for _ in 0..size {
            let row = lines
                .next()
                .ok_or_else(|| bad(format!("kernel `{}` truncated", fields[0])))?;
            let values: Vec<f64> = row
                .split_whitespace()
                .map(|v| v.parse::<i64>().map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad row `{row}`")))?;
            if values.len() != size {
                return Err(bad(format!("row `{row}` should hold {size} values")));
            }
            weights.extend(values);
        }
        let raw = Kernel::new(size, 1, weights).map_err(|e| bad(e.to_string()))?;
        kernels.push(BankKernel {
            name: fields[0].to_string(),
            raw,
            divisor,
        });
    }
    if kernels.is_empty() {
        return Err(bad("no kernels".into()));
    }
    Ok(FilterBank {
        name: name.to_string(),
        kernels,
    })
}

impl FilterBank {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Common spatial size all kernels are padded to.
    pub fn size(&self) -> usize {
        self.kernels.iter().map(|k| k.raw.size()).max().unwrap_or(3)
    }

    /// Normalized kernels, all padded to [`FilterBank::size`].
    pub fn normalized(&self) -> Vec<Kernel> {
        let size = self.size();
        self.kernels.iter().map(|k| k.normalized(size)).collect()
    }
}

/// Cross-correlates one channel with a `size x size` slice, symmetric padding.
pub fn correlate_plane(image: &Image, channel: usize, slice: &[f64], size: usize) -> Vec<f64> {
    let (h, w, _) = image.shape();
    let r = size / 2;
    let padded = pad_plane(image, channel, r);
    let pw = w + 2 * r;
    let mut out = vec![0.0; h * w];
    for m in 0..size {
        for n in 0..size {
            let wt = slice[m * size + n];
            if wt == 0.0 {
                continue;
            }
            for y in 0..h {
                let src = &padded[(y + m) * pw + n..(y + m) * pw + n + w];
                let dst = &mut out[y * w..(y + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

/// Applies every bank kernel to every input channel and sums over channels.
/// The result has one channel per kernel and the input's spatial size.
pub fn apply_filter_bank(image: &Image, bank: &FilterBank) -> Result<Image> {
    let size = bank.size();
    if image.height() < size / 2 + 1 || image.width() < size / 2 + 1 {
        return Err(Error::Shape(format!(
            "image {}x{} too small for {size}x{size} kernels",
            image.height(),
            image.width()
        )));
    }
    // Integer weights first, divisor last: zero-sum kernels then give exact
    // zeros on flat regions.
    let planes: Vec<Image> = bank
        .kernels
        .iter()
        .map(|k| {
            let raw = k.raw.padded_to(size);
            let mut acc = vec![0.0; image.height() * image.width()];
            for ch in 0..image.channels() {
                for (a, v) in acc
                    .iter_mut()
                    .zip(correlate_plane(image, ch, raw.slice(0), size))
                {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= k.divisor;
            }
            Image::from_parts(image.height(), image.width(), 1, acc)
        })
        .collect();
    Image::from_planes(&planes)
}
