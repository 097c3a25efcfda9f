//! Y-channel PSNR/SSIM with border cropping, self-ensemble inference and
//! whole-dataset evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::arch::{super_resolve, ModelParams};
use crate::data::{degrade, list_pngs};
use crate::error::{Error, Result};
use crate::image::{load_png, rgb_to_y, Dihedral, ImageRGB, Plane};
use crate::resize::bicubic_resize;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const PEAK: f64 = 255.0;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(op: &'static str, sr: &ImageRGB, hr: &ImageRGB, crop: usize) -> Result<()> {
    if sr.dims() != hr.dims() {
        return Err(Error::dim(
            op,
            format!("SR is {}x{} but HR is {}x{}", sr.height(), sr.width(), hr.height(), hr.width()),
        ));
    }
    let (h, w) = hr.dims();
    if 2 * crop >= h.min(w) {
        return Err(Error::dim(op, format!("crop {crop} leaves nothing of a {h}x{w} image")));
    }
    Ok(())
}

/// PSNR between two planes given in `[0, 1]`, measured on the 255 scale.
pub fn psnr_planes(a: &Plane, b: &Plane) -> f64 {
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (PEAK * (p - q)).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

pub fn psnr_y(sr: &ImageRGB, hr: &ImageRGB, crop: usize) -> Result<f64> {
    check_pair("psnr_y", sr, hr, crop)?;
    Ok(psnr_planes(&rgb_to_y(sr).shave(crop), &rgb_to_y(hr).shave(crop)))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" filtering with the normalised Gaussian window.
fn filter_valid(data: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * data[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every valid 11×11 window position, 255 scale.
pub fn ssim_planes(a: &Plane, b: &Plane) -> Result<f64> {
    let (h, w) = (a.height, a.width);
    if (b.height, b.width) != (h, w) {
        return Err(Error::dim("ssim", format!("{}x{} vs {}x{}", h, w, b.height, b.width)));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim("ssim", format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let x: Vec<f64> = a.data.iter().map(|v| v * PEAK).collect();
    let y: Vec<f64> = b.data.iter().map(|v| v * PEAK).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, h, w, &g);
    let mu_y = filter_valid(&y, h, w, &g);
    let xx = filter_valid(&prod(&x, &x), h, w, &g);
    let yy = filter_valid(&prod(&y, &y), h, w, &g);
    let xy = filter_valid(&prod(&x, &y), h, w, &g);
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = xx[i] - mx * mx;
        let sy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((2.0 * (mx * my) + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

pub fn ssim_y(sr: &ImageRGB, hr: &ImageRGB, crop: usize) -> Result<f64> {
    check_pair("ssim_y", sr, hr, crop)?;
    ssim_planes(&rgb_to_y(sr).shave(crop), &rgb_to_y(hr).shave(crop))
}

/// Mean of `T⁻¹(forward(T(lr)))` over the eight dihedral transforms.
pub fn self_ensemble(forward: impl Fn(&ImageRGB) -> Result<ImageRGB>, lr: &ImageRGB) -> Result<ImageRGB> {
    self_ensemble_ordered(forward, lr, &Dihedral::ALL)
}

/// [`self_ensemble`] with an explicit transform order.
pub fn self_ensemble_ordered(
    forward: impl Fn(&ImageRGB) -> Result<ImageRGB>,
    lr: &ImageRGB,
    order: &[Dihedral],
) -> Result<ImageRGB> {
    let mut acc: Option<(usize, usize, Vec<f64>)> = None;
    for &t in order {
        let out = t.inverse().apply(&forward(&t.apply(lr))?);
        match &mut acc {
            None => acc = Some((out.height(), out.width(), out.pixels().iter().map(|&v| v as f64).collect())),
            Some((h, w, sum)) => {
                if out.dims() != (*h, *w) {
                    return Err(Error::dim(
                        "self_ensemble",
                        format!("transform {} produced {}x{}, expected {h}x{w}", t.index(), out.height(), out.width()),
                    ));
                }
                sum.iter_mut().zip(out.pixels()).for_each(|(s, &v)| *s += v as f64);
            }
        }
    }
    let (h, w, sum) = acc.ok_or_else(|| Error::Config("empty transform list".into()))?;
    let n = order.len() as f64;
    ImageRGB::from_pixels(h, w, sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Anything that maps an LR image to an SR image.
pub trait Upscaler: Sync {
    fn name(&self) -> String;
    fn upscale(&self, lr: &ImageRGB, scale: u32) -> Result<ImageRGB>;
}

pub struct Bicubic;

impl Upscaler for Bicubic {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn upscale(&self, lr: &ImageRGB, scale: u32) -> Result<ImageRGB> {
        let s = scale as usize;
        Ok(bicubic_resize(lr, lr.height() * s, lr.width() * s))
    }
}

/// Returns its input; only meaningful at scale 1.
pub struct Identity;

impl Upscaler for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn upscale(&self, lr: &ImageRGB, scale: u32) -> Result<ImageRGB> {
        if scale != 1 {
            return Err(Error::UnsupportedFactor {
                factor: scale,
                detail: "identity only supports scale 1".into(),
            });
        }
        Ok(lr.clone())
    }
}

pub struct ModelUpscaler {
    pub params: ModelParams<f32>,
    pub ensemble: bool,
}

impl ModelUpscaler {
    pub fn plain(&self, lr: &ImageRGB, scale: u32) -> Result<ImageRGB> {
        let out = super_resolve(&lr.to_tensor::<f32>(), &self.params, scale)?;
        Ok(ImageRGB::from_tensor(&out, 0)?.clamped())
    }
}

impl Upscaler for ModelUpscaler {
    fn name(&self) -> String {
        if self.ensemble {
            "mdcn+".into()
        } else {
            "mdcn".into()
        }
    }

    fn upscale(&self, lr: &ImageRGB, scale: u32) -> Result<ImageRGB> {
        if self.ensemble {
            self_ensemble(|x| self.plain(x, scale), lr)
        } else {
            self.plain(lr, scale)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Round LR input and SR output to 8 bits, as if saved to disk.
    pub quantize: bool,
    /// Border removed before measuring; defaults to the scale factor.
    pub crop: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            quantize: true,
            crop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub scale: u32,
    pub crop: usize,
    pub images: Vec<ImageScore>,
    /// `(file, reason)` for images that could not be evaluated.
    pub skipped: Vec<(String, String)>,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n, mut any) = (0.0, 0usize, false);
    for v in values {
        any = true;
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    match (any, n) {
        (false, _) => f64::NAN,
        (true, 0) => f64::INFINITY,
        _ => sum / n as f64,
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

impl EvalReport {
    /// Mean PSNR over images with finite PSNR; `inf` if every image is exact.
    pub fn mean_psnr(&self) -> f64 {
        finite_mean(self.images.iter().map(|s| s.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        finite_mean(self.images.iter().map(|s| s.ssim))
    }

    pub fn infinite_count(&self) -> usize {
        self.images.iter().filter(|s| s.psnr.is_infinite()).count()
    }

    pub fn to_text(&self) -> String {
        let width = self.images.iter().map(|s| s.name.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} x{} on {} (crop {})",
            self.method, self.scale, self.dataset, self.crop
        );
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>7}", "image", "PSNR", "SSIM");
        for s in &self.images {
            let _ = writeln!(out, "{:<width$}  {:>8}  {:>7.4}", s.name, fmt_db(s.psnr), s.ssim);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>7.4}",
            "average",
            fmt_db(self.mean_psnr()),
            self.mean_ssim()
        );
        let inf = self.infinite_count();
        if inf > 0 && inf < self.images.len() {
            let _ = writeln!(out, "note: {inf} image(s) with infinite PSNR left out of the average");
        }
        for (name, reason) in &self.skipped {
            let _ = writeln!(out, "skipped {name}: {reason}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,method,scale,image,psnr,ssim\n");
        let row = |out: &mut String, name: &str, p: f64, s: f64| {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                self.dataset,
                self.method,
                self.scale,
                name,
                if p.is_infinite() { "inf".into() } else { format!("{p:.6}") },
                s
            );
        };
        for s in &self.images {
            row(&mut out, &s.name, s.psnr, s.ssim);
        }
        row(&mut out, "average", self.mean_psnr(), self.mean_ssim());
        out
    }
}

/// Degrades each HR image, upscales it and scores the result.
pub fn evaluate_pair(up: &dyn Upscaler, hr: &ImageRGB, scale: u32, opts: EvalOptions) -> Result<(f64, f64)> {
    let (mut lr, hr) = degrade(hr, scale)?;
    if opts.quantize {
        lr = lr.quantized();
    }
    let mut sr = up.upscale(&lr, scale)?;
    if opts.quantize {
        sr = sr.quantized();
    }
    let crop = opts.crop.unwrap_or(scale as usize);
    Ok((psnr_y(&sr, &hr, crop)?, ssim_y(&sr, &hr, crop)?))
}

/// Evaluates every PNG in `hr_dir`, in lexicographic order.
pub fn evaluate_dataset(up: &dyn Upscaler, hr_dir: &Path, scale: u32, opts: EvalOptions) -> Result<EvalReport> {
    let files = list_pngs(hr_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG images in {}", hr_dir.display())));
    }
    let results: Vec<(PathBuf, Result<(f64, f64)>)> = files
        .into_par_iter()
        .map(|path| {
            let r = load_png(&path).and_then(|hr| evaluate_pair(up, &hr, scale, opts));
            (path, r)
        })
        .collect();
    let mut report = EvalReport {
        dataset: hr_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| hr_dir.display().to_string()),
        method: up.name(),
        scale,
        crop: opts.crop.unwrap_or(scale as usize),
        images: Vec::new(),
        skipped: Vec::new(),
    };
    for (path, r) in results {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match r {
            Ok((psnr, ssim)) => report.images.push(ImageScore { name, psnr, ssim }),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                report.skipped.push((name, e.to_string()));
            }
        }
    }
    Ok(report)
}
