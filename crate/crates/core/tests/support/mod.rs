//! Reference implementations used as test oracles. Everything here is
//! written directly from the definitions in f64, independent of the
//! library's im2col/GEMM code paths.

#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// NHWC shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }
}

/// Direct convolution. `w` is `(co, k, k, ci)`, zero padding `pad`.
pub fn conv2d(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    co: usize,
    k: usize,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Shape) {
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let ys = Shape::new(xs.n, oh, ow, co);
    let mut y = vec![0.0; ys.len()];
    for n in 0..xs.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = b[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                continue;
                            }
                            for i in 0..xs.c {
                                acc += x[xs.idx(n, iy as usize, ix as usize, i)]
                                    * w[((o * k + ky) * k + kx) * xs.c + i];
                            }
                        }
                    }
                    y[ys.idx(n, oy, ox, o)] = acc;
                }
            }
        }
    }
    (y, ys)
}

/// Transposed convolution by scattering every input pixel through the
/// kernel. `w` is `(ci, k, k, co)`; output size
/// `(h - 1) * stride + k - 2 * pad + output_padding`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    co: usize,
    k: usize,
    b: &[f64],
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> (Vec<f64>, Shape) {
    let oh = (xs.h - 1) * stride + k + output_padding - 2 * pad;
    let ow = (xs.w - 1) * stride + k + output_padding - 2 * pad;
    let ys = Shape::new(xs.n, oh, ow, co);
    let mut y = vec![0.0; ys.len()];
    for n in 0..xs.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    y[ys.idx(n, oy, ox, o)] = b[o];
                }
            }
        }
        for iy in 0..xs.h {
            for ix in 0..xs.w {
                for ky in 0..k {
                    for kx in 0..k {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        let ox = (ix * stride + kx) as isize - pad as isize;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        for i in 0..xs.c {
                            let v = x[xs.idx(n, iy, ix, i)];
                            for o in 0..co {
                                y[ys.idx(n, oy as usize, ox as usize, o)] += v * w[((i * k + ky) * k + kx) * co + o];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, ys)
}

/// Per-sample, per-channel normalization over the spatial plane with the
/// biased variance.
pub fn instance_norm(x: &[f64], xs: Shape, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let plane = (xs.h * xs.w) as f64;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let mut mean = 0.0;
            for p in 0..xs.h * xs.w {
                mean += x[(n * xs.h * xs.w + p) * xs.c + c];
            }
            mean /= plane;
            let mut var = 0.0;
            for p in 0..xs.h * xs.w {
                var += (x[(n * xs.h * xs.w + p) * xs.c + c] - mean).powi(2);
            }
            var /= plane;
            let inv = 1.0 / (var + eps).sqrt();
            for p in 0..xs.h * xs.w {
                let i = (n * xs.h * xs.w + p) * xs.c + c;
                y[i] = gamma[c] * (x[i] - mean) * inv + beta[c];
            }
        }
    }
    y
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn mean_sq_to(x: &[f64], target: f64) -> f64 {
    mean(&x.iter().map(|v| (v - target).powi(2)).collect::<Vec<_>>())
}

pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    mean(&a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Gradient-check error: the largest absolute deviation divided by the
/// largest numeric gradient magnitude (with a floor of 1e-8).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    let dev = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    dev / scale
}

pub fn uniform(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values in `[-hi, -gap] ∪ [gap, hi]`, away from the kinks of
/// ReLU-like functions.
pub fn away_from_zero(rng: &mut impl Rng, len: usize, gap: f64, hi: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Number of window offsets `(ox, oy)` whose window ends strictly inside
/// the image (`ox + bx < x`, `oy + by < y`), found by trying every offset.
pub fn enumerate_offsets(x: u64, y: u64, bx: u64, by: u64) -> u64 {
    let mut count = 0;
    for oy in 0..y {
        for ox in 0..x {
            if ox + bx < x && oy + by < y {
                count += 1;
            }
        }
    }
    count
}

/// Per-pixel count of tiles covering each pixel, by painting every tile.
pub fn cover_counts(width: usize, height: usize, tiles: &[(usize, usize, usize, usize)]) -> Vec<u32> {
    let mut counts = vec![0u32; width * height];
    for &(x0, y0, w, h) in tiles {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                counts[y * width + x] += 1;
            }
        }
    }
    counts
}
