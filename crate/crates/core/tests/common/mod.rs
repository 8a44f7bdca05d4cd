#![allow(dead_code)]

use mtnet::autograd::Var;
use mtnet::{Result, Scalar, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

pub fn uniform<T: Scalar>(s: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_vec(s, (0..s.numel()).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect()).unwrap()
}

/// Mirror index without repeating the edge sample.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Direct convolution with mirrored borders, output extent `⌈size/stride⌉`.
pub fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (oh, ow) = ((xs.h + stride - 1) / stride, (xs.w + stride - 1) / stride);
    let (ph, pw) = ((ws.h / 2) as isize, (ws.w / 2) as isize);
    let os = shape(xs.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..ws.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = mirror((oy * stride) as isize + ky as isize - ph, xs.h);
                                let ix = mirror((ox * stride) as isize + kx as isize - pw, xs.w);
                                acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy, ix);
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[co];
                    }
                    out.data_mut()[os.index(n, co, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

/// `G[i][j] = Σ_p F[i,p]·F[j,p]` per sample.
pub fn gram_oracle(f: &Tensor<f64>) -> Tensor<f64> {
    let s = f.shape();
    let os = shape(s.n, 1, s.c, s.c);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for i in 0..s.c {
            for j in 0..s.c {
                let mut acc = 0.0;
                for y in 0..s.h {
                    for x in 0..s.w {
                        acc += f.at(n, i, y, x) * f.at(n, j, y, x);
                    }
                }
                out.data_mut()[os.index(n, 0, i, j)] = acc;
            }
        }
    }
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Half-pixel-centre bilinear resampling with edge clamping: output index
/// `i` reads source coordinate `max(0, (i + ½)·in/out − ½)`.
pub fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let s = x.shape();
    let os = shape(s.n, s.c, oh, ow);
    let coord = |i: usize, src: usize, dst: usize| {
        let p = ((i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5).max(0.0);
        let lo = (p.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, if hi == lo { 0.0 } else { p - lo as f64 })
    };
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                let (y0, y1, ty) = coord(oy, s.h, oh);
                for ox in 0..ow {
                    let (x0, x1, tx) = coord(ox, s.w, ow);
                    let top = lerp(x.at(n, c, y0, x0), x.at(n, c, y0, x1), tx);
                    let bottom = lerp(x.at(n, c, y1, x0), x.at(n, c, y1, x1), tx);
                    out.data_mut()[os.index(n, c, oy, ox)] = lerp(top, bottom, ty);
                }
            }
        }
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference check of `f(inputs)·R` summed, over every input
/// coordinate. Returns the relative error between analytic and numeric
/// gradients.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    step: f64,
    seed: u64,
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
) -> f64 {
    let consts: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    let out_shape = f(&consts).unwrap().shape();
    let weights = Var::constant(uniform(out_shape, -1.0, 1.0, &mut rng(seed)));
    let objective = |vars: &[Var<f64>]| f(vars).unwrap().mul(&weights).unwrap().sum();

    let params: Vec<Var<f64>> = inputs.iter().map(|t| Var::parameter(t.clone())).collect();
    objective(&params).backward().unwrap();
    let analytic: Vec<f64> = params.iter().flat_map(|p| p.grad().into_vec()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let eval = |delta: f64| {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, u)| {
                        let mut u = u.clone();
                        if k == i {
                            u.data_mut()[j] += delta;
                        }
                        Var::constant(u)
                    })
                    .collect();
                objective(&vars).value().item()
            };
            numeric.push((eval(step) - eval(-step)) / (2.0 * step));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Smooth synthetic photograph: gradients plus a few soft discs.
pub fn synthetic_content(h: usize, w: usize) -> Tensor<f32> {
    let s = shape(1, 3, h, w);
    let mut data = Vec::with_capacity(s.numel());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
                let disc = |cx: f32, cy: f32, r: f32| {
                    let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                    (1.0 - (d / r).min(1.0)).powi(2)
                };
                let base = match c {
                    0 => 0.2 + 0.6 * u,
                    1 => 0.3 + 0.4 * v,
                    _ => 0.7 - 0.5 * u * v,
                };
                let shapes = 0.5 * disc(0.3, 0.35, 0.25) - 0.4 * disc(0.7, 0.65, 0.2);
                data.push((base + shapes * (c as f32 + 1.0) / 3.0).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(s, data).unwrap()
}

/// High-contrast diagonal stripes in two colours.
pub fn synthetic_style(h: usize, w: usize, period: usize, palette: [[f32; 3]; 2]) -> Tensor<f32> {
    let s = shape(1, 3, h, w);
    let mut data = Vec::with_capacity(s.numel());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let band = ((x + y) / period) % 2;
                data.push(palette[band][c]);
            }
        }
    }
    Tensor::from_vec(s, data).unwrap()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}
