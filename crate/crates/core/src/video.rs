//! Early-fusion multi-frame super-resolution: five-frame windows, a
//! 15-channel head, sequence evaluation and synthetic training sequences.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{super_resolve, ModelParams, RGB};
use crate::data::{degrade, list_pngs};
use crate::error::{Error, Result};
use crate::image::{load_png, Dihedral, ImageRGB};
use crate::metrics::{psnr_y, ssim_y, EvalOptions};
use crate::optim::BatchSource;
use crate::resize::bicubic_resize;
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, Tensor};

pub const WINDOW: usize = 5;
pub const CENTER: usize = 2;
/// Frames per video used for evaluation.
pub const EVAL_FRAMES: usize = 30;
/// Border removed from every side before scoring video frames.
pub const EVAL_CROP: usize = 8;

/// Five consecutive frames `t-2 ..= t+2` of equal size.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameWindow {
    frames: [ImageRGB; WINDOW],
}

impl FrameWindow {
    pub fn new(frames: [ImageRGB; WINDOW]) -> Result<Self> {
        let d = frames[0].dims();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != d) {
            return Err(Error::dim(
                "frame_window",
                format!("frame {i} is {}x{}, frame 0 is {}x{}", f.height(), f.width(), d.0, d.1),
            ));
        }
        Ok(FrameWindow { frames })
    }

    pub fn frames(&self) -> &[ImageRGB; WINDOW] {
        &self.frames
    }

    pub fn center(&self) -> &ImageRGB {
        &self.frames[CENTER]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Same transform on every frame.
    pub fn transformed(&self, t: Dihedral) -> Self {
        FrameWindow {
            frames: self.frames.clone().map(|f| t.apply(&f)),
        }
    }
}

/// `1×15×H×W`, channels `[t-2 RGB, t-1 RGB, t RGB, t+1 RGB, t+2 RGB]`.
pub fn fuse_frames<T: Scalar>(window: &FrameWindow) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = window.frames.iter().map(|f| f.to_tensor()).collect();
    concat_channels(&parts.iter().collect::<Vec<_>>())
}

/// Source indices of the window centred on `t`, clamped to the sequence.
pub fn window_indices(len: usize, t: usize) -> [usize; WINDOW] {
    let t = t.min(len.saturating_sub(1)) as i64;
    let last = len.saturating_sub(1) as i64;
    std::array::from_fn(|k| (t + k as i64 - CENTER as i64).clamp(0, last) as usize)
}

pub fn window_at(frames: &[ImageRGB], t: usize) -> Result<FrameWindow> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("empty frame sequence".into()));
    }
    FrameWindow::new(window_indices(frames.len(), t).map(|i| frames[i].clone()))
}

/// Frame files of a video directory in frame-number order. Names must carry
/// a frame number and the numbers must be consecutive.
pub fn sequence_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no frames in {}", dir.display())));
    }
    let mut numbered: Vec<(u64, PathBuf)> = files
        .into_iter()
        .map(|p| match frame_number(&p) {
            Some(n) => Ok((n, p)),
            None => Err(Error::Image {
                path: p,
                reason: "file name has no frame number".into(),
            }),
        })
        .collect::<Result<_>>()?;
    numbered.sort_by_key(|(n, _)| *n);
    if let Some(w) = numbered.windows(2).find(|w| w[1].0 != w[0].0 + 1) {
        return Err(Error::EmptyDataset(format!(
            "{}: frames missing between {} and {}",
            dir.display(),
            w[0].0,
            w[1].0
        )));
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

pub fn load_sequence(dir: &Path) -> Result<Vec<ImageRGB>> {
    sequence_files(dir)?.iter().map(load_png).collect()
}

fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Maps a window of LR frames to the SR centre frame.
pub trait VideoUpscaler: Sync {
    fn name(&self) -> String;
    fn upscale(&self, window: &FrameWindow, scale: u32) -> Result<ImageRGB>;
}

/// Bicubic upsampling of the centre frame.
pub struct BicubicVideo;

impl VideoUpscaler for BicubicVideo {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn upscale(&self, window: &FrameWindow, scale: u32) -> Result<ImageRGB> {
        let (h, w) = window.dims();
        let s = scale as usize;
        Ok(bicubic_resize(window.center(), h * s, w * s))
    }
}

/// A network applied to fused windows (15 input channels) or to the centre
/// frame alone (3 input channels).
pub struct VideoModel {
    pub params: ModelParams<f32>,
    /// Average over the eight dihedral transforms of the whole window.
    pub ensemble: bool,
}

impl VideoModel {
    pub fn input<T: Scalar>(&self, window: &FrameWindow) -> Result<Tensor<T>> {
        match self.params.config.in_channels {
            c if c == RGB * WINDOW => fuse_frames(window),
            c if c == RGB => Ok(window.center().to_tensor()),
            c => Err(Error::Config(format!("video model needs 3 or 15 input channels, not {c}"))),
        }
    }

    fn plain(&self, window: &FrameWindow, scale: u32) -> Result<ImageRGB> {
        let out = super_resolve(&self.input::<f32>(window)?, &self.params, scale)?;
        Ok(ImageRGB::from_tensor(&out, 0)?.clamped())
    }
}

impl VideoUpscaler for VideoModel {
    fn name(&self) -> String {
        if self.params.config.in_channels == RGB {
            "mdcn (single frame)".into()
        } else {
            "mdcn (multi-frame)".into()
        }
    }

    fn upscale(&self, window: &FrameWindow, scale: u32) -> Result<ImageRGB> {
        if !self.ensemble {
            return self.plain(window, scale);
        }
        let mut sum: Vec<f64> = Vec::new();
        let mut dims = (0, 0);
        for t in Dihedral::ALL {
            let out = t.inverse().apply(&self.plain(&window.transformed(t), scale)?);
            if sum.is_empty() {
                dims = out.dims();
                sum = vec![0.0; out.pixels().len()];
            }
            sum.iter_mut().zip(out.pixels()).for_each(|(s, &v)| *s += v as f64);
        }
        ImageRGB::from_pixels(dims.0, dims.1, sum.into_iter().map(|s| (s / 8.0) as f32).collect())
    }
}

/// Title-cased video name for table rows.
fn display_name(dir: &Path) -> String {
    let raw = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut c = raw.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => raw,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScore {
    pub name: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoReport {
    pub method: String,
    pub scale: u32,
    pub crop: usize,
    pub videos: Vec<VideoScore>,
    pub excluded: Vec<(String, String)>,
}

impl VideoReport {
    pub fn mean_psnr(&self) -> f64 {
        self.videos.iter().map(|v| v.psnr).sum::<f64>() / self.videos.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.videos.iter().map(|v| v.ssim).sum::<f64>() / self.videos.len() as f64
    }

    /// One row per video plus `Average`, each `PSNR/SSIM`.
    pub fn to_text(&self) -> String {
        let width = self.videos.iter().map(|v| v.name.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{} x{} (crop {})", self.method, self.scale, self.crop);
        let _ = writeln!(out, "{:<width$}  {:>14}", "video", "PSNR/SSIM");
        let cell = |p: f64, s: f64| {
            if p.is_infinite() {
                format!("inf/{s:.4}")
            } else {
                format!("{p:.2}/{s:.4}")
            }
        };
        for v in &self.videos {
            let _ = writeln!(out, "{:<width$}  {:>14}", v.name, cell(v.psnr, v.ssim));
        }
        if !self.videos.is_empty() {
            let _ = writeln!(out, "{:<width$}  {:>14}", "Average", cell(self.mean_psnr(), self.mean_ssim()));
        }
        for (name, reason) in &self.excluded {
            let _ = writeln!(out, "excluded {name}: {reason}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,scale,video,frames,psnr,ssim\n");
        for v in &self.videos {
            let _ = writeln!(out, "{},{},{},{},{:.6},{:.6}", self.method, self.scale, v.name, v.frames, v.psnr, v.ssim);
        }
        if !self.videos.is_empty() {
            let total: usize = self.videos.iter().map(|v| v.frames).sum();
            let _ = writeln!(
                out,
                "{},{},Average,{},{:.6},{:.6}",
                self.method,
                self.scale,
                total,
                self.mean_psnr(),
                self.mean_ssim()
            );
        }
        out
    }
}

/// Scores one HR sequence: degrade, upscale every frame from its window,
/// crop and average over frames.
pub fn evaluate_sequence(
    up: &dyn VideoUpscaler,
    hr: &[ImageRGB],
    scale: u32,
    crop: usize,
    opts: EvalOptions,
) -> Result<(f64, f64)> {
    let hr = &hr[..hr.len().min(EVAL_FRAMES)];
    let pairs: Vec<(ImageRGB, ImageRGB)> = hr
        .iter()
        .map(|f| {
            degrade(f, scale).map(|(lr, hr)| (if opts.quantize { lr.quantized() } else { lr }, hr))
        })
        .collect::<Result<_>>()?;
    let lr: Vec<ImageRGB> = pairs.iter().map(|p| p.0.clone()).collect();
    let scores: Vec<(f64, f64)> = (0..pairs.len())
        .into_par_iter()
        .map(|t| {
            let mut sr = up.upscale(&window_at(&lr, t)?, scale)?;
            if opts.quantize {
                sr = sr.quantized();
            }
            Ok((psnr_y(&sr, &pairs[t].1, crop)?, ssim_y(&sr, &pairs[t].1, crop)?))
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

/// Evaluates each video directory over its first 30 frames with an 8-pixel
/// border crop. Videos that fail to load are excluded with a warning.
pub fn vsr_evaluate(up: &dyn VideoUpscaler, video_dirs: &[PathBuf], scale: u32, opts: EvalOptions) -> Result<VideoReport> {
    if video_dirs.is_empty() {
        return Err(Error::EmptyDataset("no video directories".into()));
    }
    let crop = opts.crop.unwrap_or(EVAL_CROP);
    let mut report = VideoReport {
        method: up.name(),
        scale,
        crop,
        videos: Vec::new(),
        excluded: Vec::new(),
    };
    for dir in video_dirs {
        let name = display_name(dir);
        let result = load_sequence(dir).and_then(|frames| {
            let n = frames.len().min(EVAL_FRAMES);
            evaluate_sequence(up, &frames, scale, crop, opts).map(|(p, s)| (n, p, s))
        });
        match result {
            Ok((frames, psnr, ssim)) => report.videos.push(VideoScore { name, frames, psnr, ssim }),
            Err(e) => {
                eprintln!("warning: excluding {}: {e}", dir.display());
                report.excluded.push((name, e.to_string()));
            }
        }
    }
    Ok(report)
}

/// Subdirectories of `root` in lexicographic order.
pub fn list_video_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// HR frames cut from `still` along a straight path: frame `k` starts at
/// `origin + k·velocity` (integer HR pixels, i.e. sub-pixel after
/// downsampling by a factor larger than the step).
pub fn translated_sequence(
    still: &ImageRGB,
    frames: usize,
    height: usize,
    width: usize,
    origin: (usize, usize),
    velocity: (usize, usize),
) -> Result<Vec<ImageRGB>> {
    (0..frames)
        .map(|k| still.crop(origin.0 + k * velocity.0, origin.1 + k * velocity.1, height, width))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameMode {
    /// Fused five-frame input, 15 channels.
    MultiFrame,
    /// Centre frame only, 3 channels.
    CenterOnly,
}

/// One pre-degraded sequence.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub lr: Vec<ImageRGB>,
    pub hr: Vec<ImageRGB>,
}

/// Patch sampler over LR/HR sequences. In both modes the target is the HR
/// centre frame, so the two modes see identical targets for the same seed.
#[derive(Clone, Debug)]
pub struct SequenceDataset {
    pub sequences: Vec<Sequence>,
    pub scale: u32,
    pub patch_size: usize,
    pub augment: bool,
    pub mode: FrameMode,
}

impl SequenceDataset {
    pub fn from_hr(hr: Vec<Vec<ImageRGB>>, scale: u32, patch_size: usize, augment: bool, mode: FrameMode) -> Result<Self> {
        if hr.is_empty() || hr.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptyDataset("no frames".into()));
        }
        let mut sequences = Vec::with_capacity(hr.len());
        for frames in hr {
            let mut seq = Sequence {
                lr: Vec::with_capacity(frames.len()),
                hr: Vec::with_capacity(frames.len()),
            };
            for f in &frames {
                let (lr, hr) = degrade(f, scale)?;
                if lr.height() < patch_size || lr.width() < patch_size {
                    return Err(Error::Config(format!(
                        "LR frame {}x{} smaller than patch {patch_size}",
                        lr.height(),
                        lr.width()
                    )));
                }
                seq.lr.push(lr);
                seq.hr.push(hr);
            }
            sequences.push(seq);
        }
        Ok(SequenceDataset {
            sequences,
            scale,
            patch_size,
            augment,
            mode,
        })
    }

    pub fn with_mode(&self, mode: FrameMode) -> Self {
        SequenceDataset { mode, ..self.clone() }
    }

    /// Input tensor and HR centre patch for window `t` of sequence `i`.
    pub fn item<T: Scalar>(&self, i: usize, t: usize, top: usize, left: usize, tf: Dihedral) -> Result<(Tensor<T>, Tensor<T>)> {
        let seq = &self.sequences[i];
        let (p, s) = (self.patch_size, self.scale as usize);
        let idx = window_indices(seq.lr.len(), t);
        let patches: Vec<ImageRGB> = idx
            .iter()
            .map(|&k| seq.lr[k].crop(top, left, p, p).map(|c| tf.apply(&c)))
            .collect::<Result<_>>()?;
        let hr = tf.apply(&seq.hr[t].crop(top * s, left * s, p * s, p * s)?);
        let input = match self.mode {
            FrameMode::MultiFrame => {
                let window = FrameWindow::new(patches.try_into().expect("five patches"))?;
                fuse_frames(&window)?
            }
            FrameMode::CenterOnly => patches[CENTER].to_tensor(),
        };
        Ok((input, hr.to_tensor()))
    }

    pub fn sample_batch<T: Scalar>(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut xs = Vec::with_capacity(batch_size);
        let mut ys = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let i = rng.gen_range(0..self.sequences.len());
            let seq = &self.sequences[i];
            let t = rng.gen_range(0..seq.lr.len());
            let (h, w) = seq.lr[t].dims();
            let top = rng.gen_range(0..=h - self.patch_size);
            let left = rng.gen_range(0..=w - self.patch_size);
            let tf = if self.augment {
                Dihedral::from_index(rng.gen_range(0..8))
            } else {
                Dihedral::IDENTITY
            };
            let (x, y) = self.item(i, t, top, left, tf)?;
            xs.push(x);
            ys.push(y);
        }
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
    }
}

impl<T: Scalar> BatchSource<T> for SequenceDataset {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        self.sample_batch(batch_size, rng)
    }
}
