//! Separable bicubic resampling with the Keys kernel (`a = -0.5`).
//!
//! Coordinates follow the pixel-centre convention of the usual reference
//! resizer: output pixel `i` (1-based) samples input position
//! `i / scale + (1 - 1 / scale) / 2`. When shrinking with antialiasing on,
//! the kernel is stretched by `1 / scale` and its height scaled by `scale`.

use crate::image::ImageRGB;

const KEYS_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let ax = x.abs();
    let a = KEYS_A;
    if ax <= 1.0 {
        (a + 2.0) * ax.powi(3) - (a + 3.0) * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        a * ax.powi(3) - 5.0 * a * ax.powi(2) + 8.0 * a * ax - 4.0 * a
    } else {
        0.0
    }
}

/// How taps that fall outside the image are mapped back inside.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EdgeMode {
    /// Nearest edge pixel.
    #[default]
    Clamp,
    /// Mirror with the edge pixel repeated (`… b a | a b c …`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizeOptions {
    pub antialias: bool,
    pub edge: EdgeMode,
}

impl Default for ResizeOptions {
    fn default() -> Self {
        ResizeOptions {
            antialias: true,
            edge: EdgeMode::Clamp,
        }
    }
}

/// Taps and normalised weights for every output position along one axis.
#[derive(Clone, Debug)]
pub struct Contributions {
    pub taps: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

fn map_index(i: i64, len: usize, edge: EdgeMode) -> usize {
    let n = len as i64;
    match edge {
        EdgeMode::Clamp => i.clamp(0, n - 1) as usize,
        EdgeMode::Reflect => {
            let period = 2 * n;
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - 1 - m }) as usize
        }
    }
}

pub fn contributions(in_len: usize, out_len: usize, opts: ResizeOptions) -> Contributions {
    let scale = out_len as f64 / in_len as f64;
    let shrink = opts.antialias && scale < 1.0;
    let width = if shrink { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as usize + 2;
    let mut indices = Vec::with_capacity(out_len * taps);
    let mut weights = Vec::with_capacity(out_len * taps);
    for i in 1..=out_len {
        let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as i64;
        let start = weights.len();
        for t in 0..taps as i64 {
            // 1-based source position
            let j = left + t;
            let d = u - j as f64;
            let w = if shrink {
                scale * cubic_kernel(scale * d)
            } else {
                cubic_kernel(d)
            };
            weights.push(w);
            indices.push(map_index(j - 1, in_len, opts.edge));
        }
        let sum: f64 = weights[start..].iter().sum();
        for w in &mut weights[start..] {
            *w /= sum;
        }
    }
    Contributions {
        taps,
        indices,
        weights,
    }
}

/// Antialiased bicubic resize with clamped edges; output clamped to `[0, 1]`.
pub fn bicubic_resize(img: &ImageRGB, out_h: usize, out_w: usize) -> ImageRGB {
    bicubic_resize_with(img, out_h, out_w, ResizeOptions::default())
}

/// Rows are resampled first, then columns, in `f64`.
pub fn bicubic_resize_with(img: &ImageRGB, out_h: usize, out_w: usize, opts: ResizeOptions) -> ImageRGB {
    assert!(out_h >= 1 && out_w >= 1, "output size must be positive");
    let (in_h, in_w) = img.dims();
    let src = img.pixels();

    // vertical pass: out_h × in_w
    let cv = contributions(in_h, out_h, opts);
    let mut mid = vec![0.0f64; out_h * in_w * 3];
    for y in 0..out_h {
        let idx = &cv.indices[y * cv.taps..(y + 1) * cv.taps];
        let wts = &cv.weights[y * cv.taps..(y + 1) * cv.taps];
        let row = &mut mid[y * in_w * 3..(y + 1) * in_w * 3];
        for (&sy, &w) in idx.iter().zip(wts) {
            if w == 0.0 {
                continue;
            }
            let srow = &src[sy * in_w * 3..(sy + 1) * in_w * 3];
            for (d, &s) in row.iter_mut().zip(srow) {
                *d += w * s as f64;
            }
        }
    }

    // horizontal pass
    let ch = contributions(in_w, out_w, opts);
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        let row = &mid[y * in_w * 3..(y + 1) * in_w * 3];
        for x in 0..out_w {
            let idx = &ch.indices[x * ch.taps..(x + 1) * ch.taps];
            let wts = &ch.weights[x * ch.taps..(x + 1) * ch.taps];
            let mut acc = [0.0f64; 3];
            for (&sx, &w) in idx.iter().zip(wts) {
                for c in 0..3 {
                    acc[c] += w * row[sx * 3 + c];
                }
            }
            out.extend(acc.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
        }
    }
    ImageRGB::from_pixels(out_h, out_w, out).expect("resize output size")
}
