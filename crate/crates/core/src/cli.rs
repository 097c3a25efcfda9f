//! Command-line front end: configuration resolution and the `train`, `sr`,
//! `eval` and `inspect` commands.
//!
//! Settings resolve as defaults, then a flat `key = value` file, then flags.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::{count_params, passes_for, ModelParams, NetConfig, RGB};
use crate::checkpoint;
use crate::data::{synthetic_image, DatasetSpec, PairDataset};
use crate::error::{Error, Result};
use crate::image::{load_png, save_png};
use crate::metrics::{evaluate_dataset, Bicubic, EvalOptions, Identity, ModelUpscaler, Upscaler};
use crate::optim::{fit, LossHistory, LossKind, TrainConfig};
use crate::video::{
    list_video_dirs, load_sequence, sequence_files, translated_sequence, vsr_evaluate, window_at, BicubicVideo,
    FrameMode, SequenceDataset, VideoModel, VideoUpscaler, WINDOW,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MDCN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mdcn", version, about = "Mixed-dense connection networks for image and video super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Super-resolve images (or frame directories with --video).
    Sr(SrArgs),
    /// Score a checkpoint or the bicubic baseline on a dataset.
    Eval(EvalArgs),
    /// Print the parameter table and channel schedule of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// HR image directory, video root, or `synthetic[:N]`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scale: Option<u32>,
    #[arg(long)]
    pub feat: Option<usize>,
    #[arg(long)]
    pub growth: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub units: Option<usize>,
    #[arg(long)]
    pub global_skip: Option<bool>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// LR patch edge.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub halve_every: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
    /// Start from this checkpoint (×4/×8/×3 or video fine-tuning).
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Train the 15-channel multi-frame model.
    #[arg(long)]
    pub video: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Upscaling factor; defaults to the checkpoint's trained scale.
    #[arg(long, alias = "scale")]
    pub factor: Option<u32>,
    #[arg(long)]
    pub ensemble: bool,
    /// Inputs are directories of numbered frames.
    #[arg(long)]
    pub video: bool,
    /// Output file (single image input) or directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint path, `bicubic` or `identity`.
    #[arg(long)]
    pub model: String,
    /// HR image directory, or a root of video directories with --video.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scale: Option<u32>,
    #[arg(long)]
    pub ensemble: bool,
    #[arg(long)]
    pub video: bool,
    /// Border crop; defaults to the scale (8 for video).
    #[arg(long)]
    pub crop: Option<usize>,
    /// Measure on unrounded floating-point output.
    #[arg(long)]
    pub no_quantize: bool,
    /// Directory for the text and CSV reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

/// Fully resolved training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: String,
    pub out_dir: PathBuf,
    pub tag: String,
    pub augment: bool,
    pub video: bool,
    pub warm_start: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::reference(),
            train: TrainConfig::default(),
            data: "synthetic".into(),
            out_dir: PathBuf::from("runs"),
            tag: "mdcn".into(),
            augment: true,
            video: false,
            warm_start: None,
            checkpoint_every: 1000,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for `{key}`: expected true or false"))),
    }
}

/// `key = value` pairs; `#` starts a comment; dashes in keys read as underscores.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Sets one key; unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let n = &mut self.net;
        match key {
            "feat" => n.feat = parse_value(key, value)?,
            "growth" => n.growth = parse_value(key, value)?,
            "blocks" => n.blocks = parse_value(key, value)?,
            "units" => n.units = parse_value(key, value)?,
            "scale" => n.scale = parse_value(key, value)?,
            "global_skip" => n.global_skip = parse_bool(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "iters" | "max_iters" => t.max_iters = parse_value(key, value)?,
            "batch" | "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr" | "lr0" => t.lr0 = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "eps" => t.eps = parse_value(key, value)?,
            "loss" => t.loss = parse_value(key, value)?,
            "patch" | "patch_size" => t.patch_size = parse_value(key, value)?,
            "halve_every" => t.halve_every = parse_value(key, value)?,
            "log_every" => t.log_every = parse_value(key, value)?,
            "clip_norm" => {
                t.clip_norm = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "data" => self.data = value.trim().to_string(),
            "out" | "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "tag" => self.tag = value.trim().to_string(),
            "augment" => self.augment = parse_bool(key, value)?,
            "video" => self.video = parse_bool(key, value)?,
            "warm_start" => {
                self.warm_start = match value.trim() {
                    "" | "none" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults, then the `--config` file, then flags.
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let mut pairs = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                parse_config_text(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(flag_pairs(args));
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut rc = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (k, v) in pairs {
            rc.set(k, v)?;
            seen.insert(k.as_str());
        }
        if rc.video {
            rc.net.in_channels = RGB * WINDOW;
            if !seen.contains("batch") && !seen.contains("batch_size") {
                rc.train.batch_size = TrainConfig::video().batch_size;
            }
        }
        rc.validate()?;
        Ok(rc)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        passes_for(&self.net, self.net.scale)?;
        let t = &self.train;
        if t.batch_size == 0 || t.patch_size == 0 {
            return Err(Error::Config("`batch` and `patch` must be positive".into()));
        }
        if t.lr0.is_nan() || t.lr0 <= 0.0 {
            return Err(Error::Config(format!("`lr` must be positive, got {}", t.lr0)));
        }
        if t.log_every == 0 || t.halve_every == 0 {
            return Err(Error::Config("`log_every` and `halve_every` must be positive".into()));
        }
        if self.checkpoint_every == 0 || !self.checkpoint_every.is_multiple_of(t.log_every) {
            return Err(Error::Config(format!(
                "`checkpoint_every` ({}) must be a positive multiple of `log_every` ({})",
                self.checkpoint_every, t.log_every
            )));
        }
        Ok(())
    }

    /// The resolved configuration in config-file syntax.
    pub fn echo(&self) -> String {
        let (n, t) = (&self.net, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("feat", n.feat.to_string());
        kv("growth", n.growth.to_string());
        kv("blocks", n.blocks.to_string());
        kv("units", n.units.to_string());
        kv("scale", n.scale.to_string());
        kv("global_skip", n.global_skip.to_string());
        kv("video", self.video.to_string());
        kv("seed", t.seed.to_string());
        kv("iters", t.max_iters.to_string());
        kv("batch", t.batch_size.to_string());
        kv("patch", t.patch_size.to_string());
        kv("lr", format!("{:e}", t.lr0));
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", format!("{:e}", t.eps));
        kv("halve_every", t.halve_every.to_string());
        kv("loss", t.loss.to_string());
        kv("clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("log_every", t.log_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("augment", self.augment.to_string());
        kv("data", self.data.clone());
        kv("out", self.out_dir.display().to_string());
        kv("tag", self.tag.clone());
        kv(
            "warm_start",
            self.warm_start.as_ref().map_or("none".into(), |p| p.display().to_string()),
        );
        s
    }
}

fn flag_pairs(a: &TrainArgs) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, val: Option<String>| {
        if let Some(val) = val {
            v.push((k.to_string(), val));
        }
    };
    push("data", a.data.clone());
    push("out", a.out.as_ref().map(|p| p.display().to_string()));
    push("tag", a.tag.clone());
    push("seed", a.seed.map(|x| x.to_string()));
    push("scale", a.scale.map(|x| x.to_string()));
    push("feat", a.feat.map(|x| x.to_string()));
    push("growth", a.growth.map(|x| x.to_string()));
    push("blocks", a.blocks.map(|x| x.to_string()));
    push("units", a.units.map(|x| x.to_string()));
    push("global_skip", a.global_skip.map(|x| x.to_string()));
    push("iters", a.iters.map(|x| x.to_string()));
    push("batch", a.batch.map(|x| x.to_string()));
    push("lr", a.lr.map(|x| x.to_string()));
    push("loss", a.loss.map(|x| x.to_string()));
    push("patch", a.patch.map(|x| x.to_string()));
    push("halve_every", a.halve_every.map(|x| x.to_string()));
    push("log_every", a.log_every.map(|x| x.to_string()));
    push("checkpoint_every", a.checkpoint_every.map(|x| x.to_string()));
    push("augment", a.augment.map(|x| x.to_string()));
    push("warm_start", a.warm_start.as_ref().map(|p| p.display().to_string()));
    if a.video {
        push("video", Some("true".into()));
    }
    v
}

/// Applies `MDCN_THREADS` to the global worker pool, if set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = parse_value(THREADS_ENV, &raw)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("{THREADS_ENV}: {e}")))
}

/// `<tag>_iter<NNNNNN>.mdcn`
pub fn checkpoint_name(tag: &str, iter: usize) -> String {
    format!("{tag}_iter{iter:06}.mdcn")
}

pub fn latest_name(tag: &str) -> String {
    format!("{tag}_latest.mdcn")
}

fn synthetic_count(data: &str) -> Result<Option<usize>> {
    match data.strip_prefix("synthetic") {
        None => Ok(None),
        Some("") => Ok(Some(8)),
        Some(rest) => match rest.strip_prefix(':') {
            Some(n) => parse_value("data", n).map(Some),
            None => Ok(None),
        },
    }
}

/// Synthetic HR frames drift one pixel per frame in each direction.
const SYNTHETIC_VELOCITY: (usize, usize) = (1, 1);
const SYNTHETIC_FRAMES: usize = 7;

fn image_dataset(rc: &RunConfig) -> Result<PairDataset> {
    let s = rc.net.scale as usize;
    let p = rc.train.patch_size;
    match synthetic_count(&rc.data)? {
        Some(count) => {
            let side = (p * s + 16).max(96);
            let images: Vec<_> = (0..count).map(|i| synthetic_image(side, side, rc.train.seed + i as u64)).collect();
            PairDataset::from_images(&images, rc.net.scale, p, rc.augment)
        }
        None => PairDataset::from_spec(&DatasetSpec {
            hr_dir: PathBuf::from(&rc.data),
            scale: rc.net.scale,
            patch_size: p,
            augment: rc.augment,
        }),
    }
}

fn video_dataset(rc: &RunConfig) -> Result<SequenceDataset> {
    let s = rc.net.scale as usize;
    let p = rc.train.patch_size;
    let sequences = match synthetic_count(&rc.data)? {
        Some(count) => {
            let side = (p * s + 8).max(64);
            let margin = SYNTHETIC_FRAMES * SYNTHETIC_VELOCITY.0.max(SYNTHETIC_VELOCITY.1);
            (0..count)
                .map(|i| {
                    let still = synthetic_image(side + margin, side + margin, rc.train.seed + i as u64);
                    translated_sequence(&still, SYNTHETIC_FRAMES, side, side, (0, 0), SYNTHETIC_VELOCITY)
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let dirs = list_video_dirs(Path::new(&rc.data))?;
            if dirs.is_empty() {
                return Err(Error::EmptyDataset(format!("no video directories in {}", rc.data)));
            }
            dirs.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>>>()?
        }
    };
    SequenceDataset::from_hr(sequences, rc.net.scale, p, rc.augment, FrameMode::MultiFrame)
}

/// Initial parameters: a fresh model, or a warm-start checkpoint retargeted
/// to the requested scale and input width.
pub fn initial_params(rc: &RunConfig) -> Result<ModelParams<f32>> {
    match &rc.warm_start {
        None => ModelParams::init(rc.net, rc.train.seed),
        Some(path) => {
            let base = checkpoint::load(path)?;
            let b = base.config;
            let n = rc.net;
            if (b.feat, b.growth, b.blocks, b.units, b.global_skip) != (n.feat, n.growth, n.blocks, n.units, n.global_skip) {
                return Err(Error::Config(format!(
                    "warm start {} has feat={} growth={} blocks={} units={} global_skip={}, which differs from the requested body",
                    path.display(),
                    b.feat,
                    b.growth,
                    b.blocks,
                    b.units,
                    b.global_skip
                )));
            }
            base.retarget(n.scale, n.in_channels, rc.train.seed)
        }
    }
}

/// Outcome of [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: LossHistory,
    pub checkpoints: Vec<PathBuf>,
    pub latest: PathBuf,
}

pub fn cmd_train(rc: &RunConfig) -> Result<TrainOutcome> {
    rc.validate()?;
    fs::create_dir_all(&rc.out_dir)?;
    let mut params = initial_params(rc)?;
    let passes = passes_for(&params.config, rc.net.scale)?;
    let latest = rc.out_dir.join(latest_name(&rc.tag));
    let mut checkpoints = Vec::new();
    let mut save_error = None;
    let mut on_log = |rec: &crate::optim::LossRecord, p: &ModelParams<f32>| {
        let done = rec.iter + 1;
        println!("iter {done:>8}  lr {:.3e}  loss {:.6e}", rec.lr, rec.loss);
        if done.is_multiple_of(rc.checkpoint_every) || done == rc.train.max_iters {
            let path = rc.out_dir.join(checkpoint_name(&rc.tag, done));
            let r = checkpoint::save(p, &path).and_then(|_| fs::copy(&path, &latest).map(|_| ()).map_err(Error::from));
            match r {
                Ok(()) => checkpoints.push(path),
                Err(e) => save_error = Some(e),
            }
        }
    };
    let history = if rc.video {
        fit(&mut params, &mut video_dataset(rc)?, &rc.train, passes, &mut on_log)
    } else {
        fit(&mut params, &mut image_dataset(rc)?, &rc.train, passes, &mut on_log)
    };
    if let Some(e) = save_error {
        return Err(e);
    }
    let history = history?;
    if rc.train.max_iters == 0 {
        let path = rc.out_dir.join(checkpoint_name(&rc.tag, 0));
        checkpoint::save(&params, &path)?;
        fs::copy(&path, &latest)?;
        checkpoints.push(path);
    }
    fs::write(rc.out_dir.join(format!("{}_loss.txt", rc.tag)), history.to_table())?;
    Ok(TrainOutcome {
        params,
        history,
        checkpoints,
        latest,
    })
}

/// Writes SR outputs and returns their paths.
pub fn cmd_sr(args: &SrArgs) -> Result<Vec<PathBuf>> {
    let params = checkpoint::load(&args.checkpoint)?;
    let factor = args.factor.unwrap_or(params.config.scale);
    passes_for(&params.config, factor).map_err(|e| match e {
        Error::UnsupportedFactor { factor, detail } => Error::UnsupportedFactor {
            factor,
            detail: format!("{} {detail}", args.checkpoint.display()),
        },
        e => e,
    })?;
    let mut written = Vec::new();
    if args.video {
        let model = VideoModel {
            params,
            ensemble: args.ensemble,
        };
        for dir in &args.inputs {
            let files = sequence_files(dir)?;
            let frames = files.iter().map(load_png).collect::<Result<Vec<_>>>()?;
            let out_dir = args.out.join(dir.file_name().unwrap_or_default());
            fs::create_dir_all(&out_dir)?;
            for (t, file) in files.iter().enumerate() {
                let sr = model.upscale(&window_at(&frames, t)?, factor)?;
                let path = out_dir.join(file.file_name().unwrap_or_default());
                save_png(&sr, &path)?;
                written.push(path);
            }
        }
        return Ok(written);
    }
    if params.config.in_channels != RGB {
        return Err(Error::Config(format!(
            "{} is a {}-channel model; pass --video",
            args.checkpoint.display(),
            params.config.in_channels
        )));
    }
    let model = ModelUpscaler {
        params,
        ensemble: args.ensemble,
    };
    let single_file = args.inputs.len() == 1
        && args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !single_file {
        fs::create_dir_all(&args.out)?;
    }
    for input in &args.inputs {
        let sr = model.upscale(&load_png(input)?, factor)?;
        let path = if single_file {
            args.out.clone()
        } else {
            args.out.join(input.file_name().unwrap_or_default())
        };
        save_png(&sr, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the evaluation, prints the table and writes reports if `--out` is set.
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let opts = EvalOptions {
        quantize: !args.no_quantize,
        crop: args.crop,
    };
    let params = match args.model.as_str() {
        "bicubic" | "identity" => None,
        path => Some(checkpoint::load(path)?),
    };
    let (text, csv, stem) = if args.video {
        let scale = args.scale.unwrap_or(4);
        let up: Box<dyn VideoUpscaler> = match params {
            None if args.model == "bicubic" => Box::new(BicubicVideo),
            None => return Err(Error::Config("identity is not available for video".into())),
            Some(params) => Box::new(VideoModel {
                params,
                ensemble: args.ensemble,
            }),
        };
        let dirs = list_video_dirs(&args.data)?;
        let report = vsr_evaluate(up.as_ref(), &dirs, scale, opts)?;
        (report.to_text(), report.to_csv(), format!("video_x{scale}"))
    } else {
        let up: Box<dyn Upscaler> = match params {
            None if args.model == "bicubic" => Box::new(Bicubic),
            None => Box::new(Identity),
            Some(params) => Box::new(ModelUpscaler {
                params,
                ensemble: args.ensemble,
            }),
        };
        let default_scale = if args.model == "identity" { 1 } else { 2 };
        let scale = args.scale.unwrap_or(default_scale);
        let report = evaluate_dataset(up.as_ref(), &args.data, scale, opts)?;
        let stem = format!("{}_x{scale}", report.dataset);
        (report.to_text(), report.to_csv(), stem)
    };
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let method = match args.model.as_str() {
            m @ ("bicubic" | "identity") => m.to_string(),
            path => Path::new(path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into()),
        };
        let suffix = if args.ensemble { "_ensemble" } else { "" };
        fs::write(out.join(format!("{stem}_{method}{suffix}.txt")), &text)?;
        fs::write(out.join(format!("{stem}_{method}{suffix}.csv")), &csv)?;
    }
    Ok(text)
}

/// Parameter table, total, per-block channel schedule and supported factors.
pub fn inspect_report(params: &ModelParams<f32>) -> String {
    let cfg = params.config;
    let table = count_params(params);
    let width = table.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "config: feat={} growth={} blocks={} units={} scale={} in_channels={} global_skip={}",
        cfg.feat, cfg.growth, cfg.blocks, cfg.units, cfg.scale, cfg.in_channels, cfg.global_skip
    );
    let _ = writeln!(s, "{:<width$}  {:>16}  {:>10}", "name", "shape", "count");
    for r in &table.rows {
        let _ = writeln!(s, "{:<width$}  {:>16}  {:>10}", r.name, r.shape.to_string(), r.count);
    }
    let _ = writeln!(s, "total parameters: {}", table.total);
    let schedule: Vec<String> = cfg.width_schedule().iter().map(|w| w.to_string()).collect();
    let _ = writeln!(s, "block schedule: {}", schedule.join(","));
    let factors: Vec<String> = [2u32, 3, 4, 8]
        .into_iter()
        .filter_map(|f| passes_for(&cfg, f).ok().map(|p| format!("x{f} ({p} pass{})", if p == 1 { "" } else { "es" })))
        .collect();
    let _ = writeln!(s, "factors: {}", factors.join(", "));
    s
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<String> {
    Ok(inspect_report(&checkpoint::load(&args.checkpoint)?))
}

/// Dispatches a parsed command line, printing results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let rc = RunConfig::resolve(&args)?;
            println!("# resolved configuration");
            print!("{}", rc.echo());
            let out = cmd_train(&rc)?;
            println!("latest checkpoint: {}", out.latest.display());
        }
        Command::Sr(args) => {
            println!(
                "# sr checkpoint={} factor={} ensemble={} video={}",
                args.checkpoint.display(),
                args.factor.map_or("default".into(), |f| f.to_string()),
                args.ensemble,
                args.video
            );
            for p in cmd_sr(&args)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval(args) => {
            println!(
                "# eval model={} data={} scale={} ensemble={} video={} quantize={}",
                args.model,
                args.data.display(),
                args.scale.map_or("default".into(), |s| s.to_string()),
                args.ensemble,
                args.video,
                !args.no_quantize
            );
            print!("{}", cmd_eval(&args)?);
        }
        Command::Inspect(args) => print!("{}", cmd_inspect(&args)?),
    }
    Ok(())
}

/// One-line rendering of an error for the process exit path.
pub fn error_line(e: &Error) -> String {
    format!("error: {e}").replace('\n', " ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_the_reference_setup() {
        let rc = RunConfig::from_pairs(&[]).unwrap();
        assert_eq!(rc.net, NetConfig::reference());
        assert_eq!(rc.train, TrainConfig::default());
    }

    #[test]
    fn later_values_win() {
        let rc = RunConfig::from_pairs(&pairs(&[("feat", "16"), ("feat", "8"), ("loss", "l2")])).unwrap();
        assert_eq!(rc.net.feat, 8);
        assert_eq!(rc.train.loss, LossKind::L2);
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "# micro\nfeat = 16\ngrowth=8\nlr = 1e-3\nhalve-every = 50\n").unwrap();
        let args = TrainArgs {
            config: Some(file),
            feat: Some(12),
            ..TrainArgs::default()
        };
        let rc = RunConfig::resolve(&args).unwrap();
        assert_eq!((rc.net.feat, rc.net.growth), (12, 8));
        assert_eq!(rc.train.lr0, 1e-3);
        assert_eq!(rc.train.halve_every, 50);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_pairs(&pairs(&[("width", "3")])).unwrap_err();
        assert!(e.to_string().contains("`width`"), "{e}");
        let e = RunConfig::from_pairs(&pairs(&[("feat", "many")])).unwrap_err();
        assert!(e.to_string().contains("`feat`"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let rc = RunConfig::from_pairs(&pairs(&[("feat", "16"), ("clip_norm", "0.5"), ("seed", "42"), ("video", "true")])).unwrap();
        let again = RunConfig::from_pairs(&parse_config_text(&rc.echo()).unwrap()).unwrap();
        assert_eq!(again, rc);
        assert!(rc.echo().contains("seed = 42"));
    }

    #[test]
    fn video_switches_input_width_and_batch() {
        let rc = RunConfig::from_pairs(&pairs(&[("video", "true")])).unwrap();
        assert_eq!(rc.net.in_channels, 15);
        assert_eq!(rc.train.batch_size, 8);
        let rc = RunConfig::from_pairs(&pairs(&[("video", "true"), ("batch", "3")])).unwrap();
        assert_eq!(rc.train.batch_size, 3);
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        assert!(RunConfig::from_pairs(&pairs(&[("scale", "5")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("checkpoint_every", "15")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("lr", "0")])).is_err());
        assert!(parse_config_text("feat 3").is_err());
    }

    #[test]
    fn checkpoint_names() {
        assert_eq!(checkpoint_name("x2", 1200), "x2_iter001200.mdcn");
        assert_eq!(latest_name("x2"), "x2_latest.mdcn");
    }

    #[test]
    fn synthetic_data_source() {
        assert_eq!(synthetic_count("synthetic").unwrap(), Some(8));
        assert_eq!(synthetic_count("synthetic:3").unwrap(), Some(3));
        assert_eq!(synthetic_count("/data/div2k").unwrap(), None);
        assert!(synthetic_count("synthetic:x").is_err());
    }

    #[test]
    fn inspect_lists_schedule() {
        let p = ModelParams::<f32>::zeros(NetConfig::reference()).unwrap();
        let r = inspect_report(&p);
        assert!(r.contains("block schedule: 64,100,136,172,208,244,280"), "{r}");
        assert!(r.contains("x8 (3 passes)"));
        assert!(r.contains(&format!("total parameters: {}", count_params(&p).total)));
    }

    #[test]
    fn error_lines_are_single_line() {
        let e = Error::Config("a\nb".into());
        assert!(!error_line(&e).contains('\n'));
    }
}
