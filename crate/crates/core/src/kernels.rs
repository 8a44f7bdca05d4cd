//! Forward and backward kernels on plain tensors.
//!
//! Reductions run in a fixed order so that results are reproducible to the
//! bit: a convolution output is `Σ_ci Σ_ky Σ_kx w·x` accumulated from zero in
//! exactly that order, then the bias is added.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Reflect an index into `[0, n)`. Folds repeatedly when the padding exceeds
/// the extent; a single-element axis replicates.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Output extent of a reflection-padded, odd-kernel convolution.
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

fn check_conv(input: Shape, weight: Shape, bias: Option<Shape>, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::shape("convolution stride must be positive"));
    }
    if input.c != weight.c {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {input} has {} channels, kernel {weight} expects {}",
            input.c, weight.c
        )));
    }
    if weight.h % 2 == 0 || weight.w % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel {weight} must have odd spatial extents")));
    }
    if let Some(b) = bias {
        if b.numel() != weight.n {
            return Err(Error::shape(format!(
                "conv2d bias {b} does not match {} output channels",
                weight.n
            )));
        }
    }
    Ok(())
}

/// Reflection-pads one sample; returns `(data, padded_h, padded_w)`.
fn pad_sample<T: Scalar>(input: &Tensor<T>, n: usize, ph: usize, pw: usize) -> (Vec<T>, usize, usize) {
    let s = input.shape();
    let (hp, wp) = (s.h + 2 * ph, s.w + 2 * pw);
    let mut out = Vec::with_capacity(s.c * hp * wp);
    let cols: Vec<usize> = (0..wp).map(|x| reflect_index(x as isize - pw as isize, s.w)).collect();
    for c in 0..s.c {
        let plane = input.channel(n, c);
        for y in 0..hp {
            let sy = reflect_index(y as isize - ph as isize, s.h);
            let row = &plane[sy * s.w..(sy + 1) * s.w];
            out.extend(cols.iter().map(|&sx| row[sx]));
        }
    }
    (out, hp, wp)
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weight.shape());
    check_conv(is, ws, bias.map(|b| b.shape()), stride)?;
    let (kh, kw) = (ws.h, ws.w);
    let (ph, pw) = (kh / 2, kw / 2);
    let (oh, ow) = (conv_out_extent(is.h, stride), conv_out_extent(is.w, stride));
    let os = Shape::new(is.n, ws.n, oh, ow)?;
    let mut out = Tensor::zeros(os);
    let wdata = weight.data();
    let band = (4096 / ow).clamp(1, oh);

    for n in 0..is.n {
        let (padded, hp, wp) = pad_sample(input, n, ph, pw);
        let per_sample = ws.n * oh * ow;
        let sample_out = &mut out.data_mut()[n * per_sample..(n + 1) * per_sample];
        sample_out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
            for y0 in (0..oh).step_by(band) {
                let y1 = (y0 + band).min(oh);
                for ci in 0..ws.c {
                    let pin = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdata[((co * ws.c + ci) * kh + ky) * kw + kx];
                            for oy in y0..y1 {
                                let row = &pin[(oy * stride + ky) * wp..(oy * stride + ky + 1) * wp];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    for (o, &v) in orow.iter_mut().zip(&row[kx..kx + ow]) {
                                        *o = *o + wv * v;
                                    }
                                } else {
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        *o = *o + wv * row[ox * stride + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[co];
                for o in plane.iter_mut() {
                    *o = *o + bv;
                }
            }
        });
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let (is, ws, gs) = (input.shape(), weight.shape(), grad_out.shape());
    let (kh, kw) = (ws.h, ws.w);
    let (ph, pw) = (kh / 2, kw / 2);
    let (oh, ow) = (gs.h, gs.w);
    let wdata = weight.data();

    let padded: Vec<(Vec<T>, usize, usize)> = (0..is.n).map(|n| pad_sample(input, n, ph, pw)).collect();
    let (hp, wp) = (padded[0].1, padded[0].2);

    // dL/dw and dL/db, one task per output channel.
    let mut grad_w = Tensor::zeros(ws);
    grad_w
        .data_mut()
        .par_chunks_mut(ws.c * kh * kw)
        .enumerate()
        .for_each(|(co, wslice)| {
            for (n, (pin_all, _, _)) in padded.iter().enumerate() {
                let g = grad_out.channel(n, co);
                for ci in 0..ws.c {
                    let pin = &pin_all[ci * hp * wp..(ci + 1) * hp * wp];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let row = &pin[(oy * stride + ky) * wp..];
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                for (ox, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * row[ox * stride + kx];
                                }
                            }
                            let slot = &mut wslice[(ci * kh + ky) * kw + kx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });
    let mut grad_b = Tensor::zeros(Shape { n: 1, c: ws.n, h: 1, w: 1 });
    for (co, slot) in grad_b.data_mut().iter_mut().enumerate() {
        let mut acc = T::zero();
        for n in 0..gs.n {
            for &v in grad_out.channel(n, co) {
                acc = acc + v;
            }
        }
        *slot = acc;
    }

    // dL/dx: scatter into the padded frame, then fold reflections back.
    let mut grad_in = Tensor::zeros(is);
    let rows: Vec<usize> = (0..hp).map(|y| reflect_index(y as isize - ph as isize, is.h)).collect();
    let cols: Vec<usize> = (0..wp).map(|x| reflect_index(x as isize - pw as isize, is.w)).collect();
    let per_sample = is.c * is.plane();
    for n in 0..is.n {
        let sample = &mut grad_in.data_mut()[n * per_sample..(n + 1) * per_sample];
        sample.par_chunks_mut(is.plane()).enumerate().for_each(|(ci, gplane)| {
            let mut gp = vec![T::zero(); hp * wp];
            for co in 0..ws.n {
                let g = grad_out.channel(n, co);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdata[((co * ws.c + ci) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let prow = &mut gp[(oy * stride + ky) * wp..(oy * stride + ky + 1) * wp];
                            if stride == 1 {
                                for (p, &gv) in prow[kx..kx + ow].iter_mut().zip(grow) {
                                    *p = *p + wv * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let p = &mut prow[ox * stride + kx];
                                    *p = *p + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            for (py, &sy) in rows.iter().enumerate() {
                for (px, &sx) in cols.iter().enumerate() {
                    let slot = &mut gplane[sy * is.w + sx];
                    *slot = *slot + gp[py * wp + px];
                }
            }
        });
    }
    ConvGrads { input: grad_in, weight: grad_w, bias: grad_b }
}

/// Per-(sample, channel) statistics cached by the instance-norm forward.
pub struct InstanceNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, InstanceNormCache<T>)> {
    let s = input.shape();
    if gain.len() != s.c || bias.len() != s.c {
        return Err(Error::shape(format!(
            "instance_norm on {s}: gain has {} and bias {} entries, expected {}",
            gain.len(),
            bias.len(),
            s.c
        )));
    }
    let count = T::from_usize(s.plane());
    let mut out = Tensor::zeros(s);
    let mut normalized = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * s.c);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let x = input.channel(n, c);
            let mean = x.iter().fold(T::zero(), |a, &v| a + v) / count;
            let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let (g, b) = (gain.data()[c], bias.data()[c]);
            let start = (n * s.c + c) * p;
            let xn = &mut normalized.data_mut()[start..start + p];
            for (dst, &v) in xn.iter_mut().zip(x) {
                *dst = (v - mean) * inv;
            }
            let xn = &normalized.data()[start..start + p];
            for (dst, &v) in out.data_mut()[start..start + p].iter_mut().zip(xn) {
                *dst = g * v + b;
            }
        }
    }
    Ok((out, InstanceNormCache { normalized, inv_std }))
}

/// Returns `(d_input, d_gain, d_bias)`.
pub fn instance_norm_backward<T: Scalar>(
    gain: &Tensor<T>,
    cache: &InstanceNormCache<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let p = s.plane();
    let count = T::from_usize(p);
    let mut dx = Tensor::zeros(s);
    let mut dg = Tensor::zeros(gain.shape());
    let mut db = Tensor::zeros(gain.shape());
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.channel(n, c);
            let xn = cache.normalized.channel(n, c);
            let gamma = gain.data()[c];
            let inv = cache.inv_std[n * s.c + c];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&gv, &xv) in g.iter().zip(xn) {
                sum_g = sum_g + gv;
                sum_gx = sum_gx + gv * xv;
            }
            dg.data_mut()[c] = dg.data()[c] + sum_gx;
            db.data_mut()[c] = db.data()[c] + sum_g;
            let (sum_dxh, sum_dxh_x) = (gamma * sum_g, gamma * sum_gx);
            let start = (n * s.c + c) * p;
            for ((dst, &gv), &xv) in dx.data_mut()[start..start + p].iter_mut().zip(g).zip(xn) {
                *dst = inv / count * (count * gamma * gv - sum_dxh - xv * sum_dxh_x);
            }
        }
    }
    (dx, dg, db)
}

pub fn nearest_upsample2x_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let os = Shape { h: s.h * 2, w: s.w * 2, ..s };
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.channel(n, c);
            for y in 0..os.h {
                let row = &plane[(y / 2) * s.w..(y / 2 + 1) * s.w];
                out.extend((0..os.w).map(|x| row[x / 2]));
            }
        }
    }
    Tensor::from_vec(os, out).expect("upsample shape")
}

pub fn nearest_upsample2x_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let ow = grad_out.shape().w;
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = grad_out.channel(n, c);
            for y in 0..input_shape.h {
                for x in 0..input_shape.w {
                    let (a, b) = (2 * y * ow + 2 * x, (2 * y + 1) * ow + 2 * x);
                    let v = g[a] + g[a + 1] + g[b] + g[b + 1];
                    let i = input_shape.index(n, c, y, x);
                    dx.data_mut()[i] = v;
                }
            }
        }
    }
    dx
}

/// One axis of a bilinear resampling: `(lower index, upper index, fraction)`.
pub(crate) fn bilinear_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = T::from_usize(src) / T::from_usize(dst);
    let half = T::from_f64(0.5);
    (0..dst)
        .map(|i| {
            let pos = ((T::from_usize(i) + half) * scale - half).max(T::zero());
            let i0 = pos.floor().as_f64() as usize;
            let i0 = i0.min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { T::zero() } else { pos - T::from_usize(i0) };
            (i0, i1, frac)
        })
        .collect()
}

/// Half-pixel-centred bilinear resampling with edge clamping.
pub fn bilinear_resize_forward<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, out_h, out_w)?;
    let ty = bilinear_taps::<T>(s.h, out_h);
    let tx = bilinear_taps::<T>(s.w, out_w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let p = input.channel(n, c);
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let (v00, v01) = (p[y0 * s.w + x0], p[y0 * s.w + x1]);
                    let (v10, v11) = (p[y1 * s.w + x0], p[y1 * s.w + x1]);
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    out.push(top + fy * (bot - top));
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn bilinear_resize_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let gs = grad_out.shape();
    let ty = bilinear_taps::<T>(s.h, gs.h);
    let tx = bilinear_taps::<T>(s.w, gs.w);
    let one = T::one();
    let mut dx = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.channel(n, c);
            let start = (n * s.c + c) * p;
            let d = &mut dx.data_mut()[start..start + p];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g[oy * gs.w + ox];
                    let (gt, gb) = (gv * (one - fy), gv * fy);
                    d[y0 * s.w + x0] = d[y0 * s.w + x0] + gt * (one - fx);
                    d[y0 * s.w + x1] = d[y0 * s.w + x1] + gt * fx;
                    d[y1 * s.w + x0] = d[y1 * s.w + x0] + gb * (one - fx);
                    d[y1 * s.w + x1] = d[y1 * s.w + x1] + gb * fx;
                }
            }
        }
    }
    dx
}

/// 2×2 / stride-2 max pooling; odd trailing rows/columns form partial windows.
/// Returns the output and, per output element, the flat input index that won
/// (the first maximum in scan order).
pub fn max_pool2_forward<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let s = input.shape();
    let os = Shape { h: s.h.div_ceil(2), w: s.w.div_ceil(2), ..s };
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = s.index(n, c, 2 * oy, 2 * ox);
                    for y in 2 * oy..(2 * oy + 2).min(s.h) {
                        for x in 2 * ox..(2 * ox + 2).min(s.w) {
                            let i = s.index(n, c, y, x);
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(data[best]);
                    arg.push(best);
                }
            }
        }
    }
    (Tensor::from_vec(os, out).expect("pool shape"), arg)
}

pub fn avg_pool2_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let os = Shape { h: s.h.div_ceil(2), w: s.w.div_ceil(2), ..s };
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let (mut acc, mut k) = (T::zero(), 0usize);
                    for y in 2 * oy..(2 * oy + 2).min(s.h) {
                        for x in 2 * ox..(2 * ox + 2).min(s.w) {
                            acc = acc + input.at(n, c, y, x);
                            k += 1;
                        }
                    }
                    out.push(acc / T::from_usize(k));
                }
            }
        }
    }
    Tensor::from_vec(os, out).expect("pool shape")
}

pub fn avg_pool2_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let os = grad_out.shape();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let ys = 2 * oy..(2 * oy + 2).min(s.h);
                    let xs = 2 * ox..(2 * ox + 2).min(s.w);
                    let k = T::from_usize(ys.len() * xs.len());
                    let gv = grad_out.at(n, c, oy, ox) / k;
                    for y in ys {
                        for x in xs.clone() {
                            let i = s.index(n, c, y, x);
                            dx.data_mut()[i] = gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Unnormalized Gram matrices, one `c×c` block per sample: output shape
/// `(n, 1, c, c)` with `G[i][j] = Σ_p F_i[p]·F_j[p]`.
pub fn gram_forward<T: Scalar>(features: &Tensor<T>) -> Tensor<T> {
    let s = features.shape();
    let os = Shape { n: s.n, c: 1, h: s.c, w: s.c };
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for i in 0..s.c {
            let fi = features.channel(n, i);
            for j in i..s.c {
                let fj = features.channel(n, j);
                let dot = fi.iter().zip(fj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                let d = out.data_mut();
                d[os.index(n, 0, i, j)] = dot;
                d[os.index(n, 0, j, i)] = dot;
            }
        }
    }
    out
}

pub fn gram_backward<T: Scalar>(features: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = features.shape();
    let mut dx = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for i in 0..s.c {
            let start = (n * s.c + i) * p;
            let mut acc = vec![T::zero(); p];
            for j in 0..s.c {
                let coeff = grad_out.at(n, 0, i, j) + grad_out.at(n, 0, j, i);
                let fj = features.channel(n, j);
                for (a, &v) in acc.iter_mut().zip(fj) {
                    *a = *a + coeff * v;
                }
            }
            dx.data_mut()[start..start + p].copy_from_slice(&acc);
        }
    }
    dx
}

/// `out[o] = Σ_i matrix[o][i]·x[i] + offset[o]` applied per pixel.
pub fn channel_mix_forward<T: Scalar>(
    input: &Tensor<T>,
    matrix: &[T],
    offsets: &[T],
) -> Result<Tensor<T>> {
    let s = input.shape();
    let out_c = offsets.len();
    if out_c == 0 || matrix.len() != out_c * s.c {
        return Err(Error::shape(format!(
            "channel mix: {}-entry matrix and {} offsets do not fit input {s}",
            matrix.len(),
            out_c
        )));
    }
    let os = Shape::new(s.n, out_c, s.h, s.w)?;
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for o in 0..out_c {
            let row = &matrix[o * s.c..(o + 1) * s.c];
            for px in 0..s.plane() {
                let mut acc = T::zero();
                for (i, &m) in row.iter().enumerate() {
                    acc = acc + m * input.channel(n, i)[px];
                }
                out.push(acc + offsets[o]);
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn channel_mix_backward<T: Scalar>(input_shape: Shape, matrix: &[T], grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let out_c = grad_out.shape().c;
    let mut dx = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for i in 0..s.c {
            let start = (n * s.c + i) * p;
            for o in 0..out_c {
                let m = matrix[o * s.c + i];
                let g = grad_out.channel(n, o);
                for (d, &gv) in dx.data_mut()[start..start + p].iter_mut().zip(g) {
                    *d = *d + m * gv;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(), v).unwrap()
    }

    #[test]
    fn reflect_folds() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(5, 4), 1);
        assert_eq!(reflect_index(-4, 3), 0);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn identity_kernel() {
        let x = t((1, 1, 3, 4), (0..12).map(|v| v as f64 * 0.5).collect());
        let w = t((1, 1, 1, 1), vec![1.0]);
        let y = conv2d_forward(&x, &w, None, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_twos() {
        let x = t((1, 1, 3, 3), vec![2.0; 9]);
        let w = t((1, 1, 3, 3), vec![1.0; 9]);
        let y = conv2d_forward(&x, &w, None, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn strided_output_extent() {
        let x = t((1, 2, 4, 4), vec![1.0; 32]);
        let w = t((3, 2, 3, 3), vec![0.1; 54]);
        let y = conv2d_forward(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape().dims(), [1, 3, 2, 2]);
        let x5 = t((1, 2, 5, 7), vec![1.0; 70]);
        assert_eq!(conv2d_forward(&x5, &w, None, 2).unwrap().shape().dims(), [1, 3, 3, 4]);
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let x = t((1, 2, 4, 4), vec![1.0; 32]);
        let w = t((1, 3, 3, 3), vec![1.0; 27]);
        let err = conv2d_forward(&x, &w, None, 1).unwrap_err().to_string();
        assert!(err.contains("(1, 2, 4, 4)") && err.contains("(1, 3, 3, 3)"), "{err}");
    }

    #[test]
    fn instance_norm_two_values() {
        let x = t((1, 1, 1, 2), vec![1.0, 3.0]);
        let one = t((1, 1, 1, 1), vec![1.0]);
        let zero = t((1, 1, 1, 1), vec![0.0]);
        let (y, _) = instance_norm_forward(&x, &one, &zero, 1e-5).unwrap();
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + e).abs() < 1e-15);
        assert!((y.data()[1] - e).abs() < 1e-15);
    }

    #[test]
    fn instance_norm_constant_and_zero_gain() {
        let x = t((1, 1, 2, 2), vec![5.0; 4]);
        let one = t((1, 1, 1, 1), vec![1.0]);
        let zero = t((1, 1, 1, 1), vec![0.0]);
        let (y, _) = instance_norm_forward(&x, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = t((1, 1, 2, 2), vec![1.0, -4.0, 2.5, 9.0]);
        let seven = t((1, 1, 1, 1), vec![7.0]);
        let (y, _) = instance_norm_forward(&x, &zero, &seven, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn nearest_replicates() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = nearest_upsample2x_forward(&x);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_row_ramp() {
        let x = t((1, 1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]);
        let y = bilinear_resize_forward(&x, 4, 4).unwrap();
        for r in 0..4 {
            assert_eq!(&y.data()[r * 4..r * 4 + 4], &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn bilinear_constant_preserved() {
        let x = t((1, 2, 4, 4), vec![0.1; 32]);
        let down = bilinear_resize_forward(&x, 2, 2).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.1));
        let up = bilinear_resize_forward(&x, 7, 9).unwrap();
        let back = bilinear_resize_forward(&up, 4, 4).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn gram_of_ones() {
        let f = t((1, 2, 2, 2), vec![1.0; 8]);
        assert_eq!(gram_forward(&f).data(), &[4.0, 4.0, 4.0, 4.0]);
        let z = t((1, 3, 2, 2), vec![0.0; 12]);
        assert!(gram_forward(&z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_partial_windows() {
        let x = t((1, 1, 3, 3), vec![1.0, 5.0, 2.0, 3.0, 4.0, 9.0, 7.0, 0.0, 6.0]);
        let (y, _) = max_pool2_forward(&x);
        assert_eq!(y.data(), &[5.0, 9.0, 7.0, 6.0]);
        let a = avg_pool2_forward(&x);
        assert_eq!(a.data(), &[13.0 / 4.0, 5.5, 3.5, 6.0]);
    }
}
