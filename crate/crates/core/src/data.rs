//! Bicubic degradation, HR/LR pair datasets and patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{load_png, Dihedral, ImageRGB};
use crate::optim::BatchSource;
use crate::resize::{bicubic_resize_with, ResizeOptions};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Crops `hr` to a multiple of `s` and downsamples it by `1/s`.
///
/// HR block `[s·y, s·y + s) × [s·x, s·x + s)` corresponds to LR pixel `(y, x)`.
pub fn degrade(hr: &ImageRGB, s: u32) -> Result<(ImageRGB, ImageRGB)> {
    degrade_with(hr, s, ResizeOptions::default())
}

pub fn degrade_with(hr: &ImageRGB, s: u32, opts: ResizeOptions) -> Result<(ImageRGB, ImageRGB)> {
    let su = s as usize;
    let (h, w) = hr.dims();
    if su == 0 || h < su || w < su {
        return Err(Error::UnusableImage {
            height: h,
            width: w,
            scale: s,
        });
    }
    let (ch, cw) = (h - h % su, w - w % su);
    let cropped = if (ch, cw) == (h, w) {
        hr.clone()
    } else {
        hr.crop(0, 0, ch, cw)?
    };
    let lr = bicubic_resize_with(&cropped, ch / su, cw / su, opts);
    Ok((lr, cropped))
}

/// PNG files in `dir`, sorted lexicographically.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub hr_dir: PathBuf,
    pub scale: u32,
    /// LR-space patch edge.
    pub patch_size: usize,
    pub augment: bool,
}

/// One pre-degraded training image.
#[derive(Clone, Debug)]
pub struct Pair {
    pub lr: ImageRGB,
    pub hr: ImageRGB,
}

/// Training pairs degraded once at full size; patches are cut afterwards.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub pairs: Vec<Pair>,
    pub scale: u32,
    pub patch_size: usize,
    pub augment: bool,
}

impl PairDataset {
    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        let files = list_pngs(&spec.hr_dir)?;
        let images = files.iter().map(load_png).collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no PNG images in {}",
                spec.hr_dir.display()
            )));
        }
        Self::from_images(&images, spec.scale, spec.patch_size, spec.augment)
    }

    pub fn from_images(hr: &[ImageRGB], scale: u32, patch_size: usize, augment: bool) -> Result<Self> {
        if hr.is_empty() {
            return Err(Error::EmptyDataset("no images".into()));
        }
        let mut pairs = Vec::with_capacity(hr.len());
        for img in hr {
            let (lr, hr) = degrade(img, scale)?;
            if lr.height() < patch_size || lr.width() < patch_size {
                return Err(Error::Config(format!(
                    "LR image {}x{} smaller than patch {patch_size}",
                    lr.height(),
                    lr.width()
                )));
            }
            pairs.push(Pair { lr, hr });
        }
        Ok(PairDataset {
            pairs,
            scale,
            patch_size,
            augment,
        })
    }

    /// One aligned LR/HR patch pair at LR position `(top, left)`.
    pub fn patch(&self, index: usize, top: usize, left: usize, t: Dihedral) -> Result<(ImageRGB, ImageRGB)> {
        let pair = &self.pairs[index];
        let (p, s) = (self.patch_size, self.scale as usize);
        let lr = pair.lr.crop(top, left, p, p)?;
        let hr = pair.hr.crop(top * s, left * s, p * s, p * s)?;
        Ok((t.apply(&lr), t.apply(&hr)))
    }

    /// Uniform image, position and (if enabled) dihedral transform per item.
    pub fn sample_batch<T: Scalar>(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyDataset("no images".into()));
        }
        let mut lrs = Vec::with_capacity(batch_size);
        let mut hrs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let i = rng.gen_range(0..self.pairs.len());
            let (h, w) = self.pairs[i].lr.dims();
            let top = rng.gen_range(0..=h - self.patch_size);
            let left = rng.gen_range(0..=w - self.patch_size);
            let t = if self.augment {
                Dihedral::from_index(rng.gen_range(0..8))
            } else {
                Dihedral::IDENTITY
            };
            let (lr, hr) = self.patch(i, top, left, t)?;
            lrs.push(lr.to_tensor());
            hrs.push(hr.to_tensor());
        }
        Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
    }
}

impl<T: Scalar> BatchSource<T> for PairDataset {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        self.sample_batch(batch_size, rng)
    }
}

/// Deterministic procedural test image in the dead-leaves style: occluding
/// discs with power-law radii over a shaded background, so edges appear at
/// every scale. Rendered with 2×2 supersampling.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> ImageRGB {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f32, width as f32);
    let (r_min, r_max) = (1.5f32, (hf.min(wf) / 3.0).max(2.0));
    let count = ((hf * wf) / 12.0).clamp(16.0, 4000.0) as usize;
    // radius density ∝ r^-3, sampled by inverting its CDF
    let (a, b) = (r_min.powi(-2), r_max.powi(-2));
    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..count)
        .map(|_| {
            let u: f32 = rng.gen();
            let r = (a - u * (a - b)).powf(-0.5);
            let base: f32 = rng.gen_range(0.1..0.9);
            let tint = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
            (
                rng.gen_range(-r..hf + r),
                rng.gen_range(-r..wf + r),
                r,
                tint.map(|t: f32| base + t),
            )
        })
        .collect();
    let shade: [f32; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let sample = |y: f32, x: f32| -> [f32; 3] {
        // later discs lie on top
        for &(cy, cx, r, col) in discs.iter().rev() {
            let (dy, dx) = (y - cy, x - cx);
            if dy * dy + dx * dx < r * r {
                return col;
            }
        }
        [
            shade[0] + 0.2 * (x / wf - 0.5),
            shade[1] + 0.2 * (y / hf - 0.5),
            shade[2],
        ]
    };
    ImageRGB::from_fn(height, width, |y, x| {
        let mut acc = [0.0f32; 3];
        for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            let c = sample(y as f32 + oy, x as f32 + ox);
            for k in 0..3 {
                acc[k] += 0.25 * c[k];
            }
        }
        acc.map(|v| v.clamp(0.0, 1.0))
    })
}
