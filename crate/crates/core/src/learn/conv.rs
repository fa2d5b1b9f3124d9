//! Planar (`[channel][row][col]`) 2-D cross-correlation with symmetric
//! padding, forward and backward.

use crate::filters::reflect;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }

    pub fn padded_h(&self) -> usize {
        self.h + 2 * self.pad()
    }

    pub fn padded_w(&self) -> usize {
        self.w + 2 * self.pad()
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

/// Symmetric padding of every plane.
pub(crate) fn pad_planes(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pad = g.pad();
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let cols: Vec<usize> = (0..pw)
        .map(|x| reflect(x as isize - pad as isize, g.w))
        .collect();
    let mut out = vec![0.0; g.c_in * ph * pw];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, g.h);
            let src = &plane[sy * g.w..(sy + 1) * g.w];
            let dst = &mut out[(c * ph + y) * pw..(c * ph + y + 1) * pw];
            for (d, &sx) in dst.iter_mut().zip(&cols) {
                *d = src[sx];
            }
        }
    }
    out
}

/// Adds the gradient of a padded buffer back onto the unpadded planes.
pub(crate) fn fold_padding(grad_padded: &[f64], g: &ConvGeom, grad_in: &mut [f64]) {
    let pad = g.pad();
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let cols: Vec<usize> = (0..pw)
        .map(|x| reflect(x as isize - pad as isize, g.w))
        .collect();
    for c in 0..g.c_in {
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, g.h);
            let src = &grad_padded[(c * ph + y) * pw..(c * ph + y + 1) * pw];
            let dst = &mut grad_in[(c * g.h + sy) * g.w..(c * g.h + sy + 1) * g.w];
            for (&v, &sx) in src.iter().zip(&cols) {
                dst[sx] += v;
            }
        }
    }
}

/// `out[co] = bias[co] + sum_ci corr(in[ci], weight[co][ci])`.
pub(crate) fn conv_forward(
    padded: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let k = g.k;
    let mut out = vec![0.0; g.c_out * oh * ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for ci in 0..g.c_in {
            let src = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            let wk = &weight[(co * g.c_in + ci) * k * k..(co * g.c_in + ci + 1) * k * k];
            for m in 0..k {
                for n in 0..k {
                    let wt = wk[m * k + n];
                    for oy in 0..oh {
                        let row = &src[(oy * g.stride + m) * pw + n..];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            for (d, s) in dst.iter_mut().zip(&row[..ow]) {
                                *d += wt * s;
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += wt * row[ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, when requested, the gradient with
/// respect to the (unpadded) input.
pub(crate) fn conv_backward(
    padded: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
    grad_in: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let k = g.k;
    if let Some(gb) = grad_b {
        for co in 0..g.c_out {
            gb[co] += grad_out[co * oh * ow..(co + 1) * oh * ow]
                .iter()
                .sum::<f64>();
        }
    }
    let mut grad_padded = grad_in.as_ref().map(|_| vec![0.0; g.c_in * ph * pw]);
    for co in 0..g.c_out {
        let go = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let src = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            let base = (co * g.c_in + ci) * k * k;
            for m in 0..k {
                for n in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let row = &src[(oy * g.stride + m) * pw + n..];
                        let gr = &go[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            acc += gr.iter().zip(&row[..ow]).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            acc += gr
                                .iter()
                                .enumerate()
                                .map(|(ox, a)| a * row[ox * g.stride])
                                .sum::<f64>();
                        }
                    }
                    grad_w[base + m * k + n] += acc;
                    if let Some(gp) = grad_padded.as_mut() {
                        let wt = weight[base + m * k + n];
                        let dst_plane = &mut gp[ci * ph * pw..(ci + 1) * ph * pw];
                        for oy in 0..oh {
                            let gr = &go[oy * ow..(oy + 1) * ow];
                            let start = (oy * g.stride + m) * pw + n;
                            if g.stride == 1 {
                                for (d, a) in dst_plane[start..start + ow].iter_mut().zip(gr) {
                                    *d += wt * a;
                                }
                            } else {
                                for (ox, a) in gr.iter().enumerate() {
                                    dst_plane[start + ox * g.stride] += wt * a;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let (Some(gp), Some(gi)) = (grad_padded, grad_in) {
        fold_padding(&gp, g, gi);
    }
}
