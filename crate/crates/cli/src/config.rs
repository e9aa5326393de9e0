//! Plain-text run configuration: `key = value` lines, `#` comments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use xbound::attention::Weighting;
use xbound::network::SCALES;
use xbound::{AdamWConfig, LossWeights, ModelConfig, SynthParams};

/// A problem with the invocation or configuration rather than with the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Accelerator,
}

impl FromStr for Device {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cpu" => Ok(Self::Cpu),
            "accelerator" => Ok(Self::Accelerator),
            _ => Err(format!("unknown device `{s}` (expected cpu or accelerator)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Ablation,
    Lambda,
    Blocks,
}

impl FromStr for SweepKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "lambda" => Ok(Self::Lambda),
            "blocks" => Ok(Self::Blocks),
            _ => Err(format!("unknown sweep `{s}` (expected ablation, lambda or blocks)")),
        }
    }
}

/// Every tunable of a run. Defaults are the desk-scale setup.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub input_size: usize,
    pub channels: [usize; SCALES],
    pub heads: [usize; SCALES],
    pub n_im: usize,
    pub n_ex: usize,
    pub kv_strides: [usize; SCALES],
    pub encoder_depth: usize,
    pub x_bound: bool,
    pub x_weighting: Weighting,

    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub val_every: usize,
    pub augment: bool,
    pub log_every: usize,

    pub keypoint_radius: usize,
    pub keypoint_k: usize,
    pub threshold: f64,

    pub seed: u64,
    pub device: Device,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train_split: Option<PathBuf>,
    pub val_split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,

    pub synth_count: usize,
    pub synth_harmonics: usize,
    pub synth_blur: f64,
    pub synth_contrast: f64,
    pub synth_hair: usize,
    pub synth_radius_min: f64,
    pub synth_radius_max: f64,

    pub sweep: SweepKind,
    pub sweep_lambdas: Vec<f64>,
    /// `(n_im, n_ex)` grid points.
    pub sweep_blocks: Vec<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let opt = AdamWConfig::default();
        let synth = SynthParams::default();
        Self {
            input_size: model.input_size,
            channels: model.channels,
            heads: model.heads,
            n_im: model.n_im,
            n_ex: model.n_ex,
            kv_strides: model.kv_strides,
            encoder_depth: model.encoder_depth,
            x_bound: model.x_bound,
            x_weighting: model.x_weighting,
            lambda: LossWeights::default().lambda,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            batch_size: 4,
            epochs: 200,
            max_steps: 0,
            val_every: 1,
            augment: true,
            log_every: 25,
            keypoint_radius: 2,
            keypoint_k: 30,
            threshold: 0.5,
            seed: 0,
            device: Device::Cpu,
            data: None,
            out: None,
            train_split: None,
            val_split: None,
            checkpoint: None,
            predictions: None,
            synth_count: 8,
            synth_harmonics: synth.harmonics,
            synth_blur: synth.blur_sigma,
            synth_contrast: synth.contrast,
            synth_hair: synth.hair_strokes,
            synth_radius_min: synth.radius_range.0,
            synth_radius_max: synth.radius_range.1,
            sweep: SweepKind::Ablation,
            sweep_lambdas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            sweep_blocks: vec![(1, 1), (1, 2), (2, 1), (2, 2)],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| usage(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_scales(key: &str, value: &str) -> anyhow::Result<[usize; SCALES]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| usage(format!("`{key}` needs exactly {SCALES} comma-separated values")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_blocks(key: &str, value: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| usage(format!("`{key}` entries look like n_im:n_ex, got `{pair}`")))?;
            Ok((parse(key, a.trim())?, parse(key, b.trim())?))
        })
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value.trim();
        match key.trim() {
            "input_size" => self.input_size = parse(key, v)?,
            "channels" => self.channels = parse_scales(key, v)?,
            "heads" => self.heads = parse_scales(key, v)?,
            "n_im" => self.n_im = parse(key, v)?,
            "n_ex" => self.n_ex = parse(key, v)?,
            "kv_strides" => self.kv_strides = parse_scales(key, v)?,
            "encoder_depth" => self.encoder_depth = parse(key, v)?,
            "x_bound" => self.x_bound = parse(key, v)?,
            "x_weighting" => self.x_weighting = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "keypoint_radius" => self.keypoint_radius = parse(key, v)?,
            "keypoint_k" => self.keypoint_k = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "device" => self.device = parse(key, v)?,
            "data" => self.data = parse_path(v),
            "out" => self.out = parse_path(v),
            "train_split" => self.train_split = parse_path(v),
            "val_split" => self.val_split = parse_path(v),
            "checkpoint" => self.checkpoint = parse_path(v),
            "predictions" => self.predictions = parse_path(v),
            "synth_count" => self.synth_count = parse(key, v)?,
            "synth_harmonics" => self.synth_harmonics = parse(key, v)?,
            "synth_blur" => self.synth_blur = parse(key, v)?,
            "synth_contrast" => self.synth_contrast = parse(key, v)?,
            "synth_hair" => self.synth_hair = parse(key, v)?,
            "synth_radius_min" => self.synth_radius_min = parse(key, v)?,
            "synth_radius_max" => self.synth_radius_max = parse(key, v)?,
            "sweep" => self.sweep = parse(key, v)?,
            "sweep_lambdas" => self.sweep_lambdas = parse_list(key, v)?,
            "sweep_blocks" => self.sweep_blocks = parse_blocks(key, v)?,
            other => return Err(usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(key, value)
                .map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> anyhow::Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got `{spec}`")))?;
        self.set(key, value)
    }

    pub fn model(&self) -> anyhow::Result<ModelConfig> {
        let m = ModelConfig {
            input_size: self.input_size,
            channels: self.channels,
            heads: self.heads,
            n_im: self.n_im,
            n_ex: self.n_ex,
            kv_strides: self.kv_strides,
            encoder_depth: self.encoder_depth,
            x_bound: self.x_bound,
            x_weighting: self.x_weighting,
        };
        m.validate().map_err(|e| usage(e.to_string()))?;
        Ok(m)
    }

    pub fn loss_weights(&self) -> anyhow::Result<LossWeights> {
        LossWeights::new(self.lambda).map_err(|e| usage(e.to_string()))
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn synth_params(&self, seed: u64) -> SynthParams {
        SynthParams {
            size: self.input_size,
            harmonics: self.synth_harmonics,
            radius_range: (self.synth_radius_min, self.synth_radius_max),
            blur_sigma: self.synth_blur,
            contrast: self.synth_contrast,
            hair_strokes: self.synth_hair,
            seed,
        }
    }

    /// Checks cross-field constraints of the training setup.
    pub fn validate_training(&self) -> anyhow::Result<()> {
        self.model()?;
        self.loss_weights()?;
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(usage("batch_size and val_every must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(usage("lr must be positive and weight_decay non-negative"));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(usage("nothing to train: epochs and max_steps are both 0"));
        }
        if self.keypoint_radius == 0 || self.keypoint_k == 0 {
            return Err(usage("keypoint_radius and keypoint_k must be at least 1"));
        }
        Ok(())
    }
}
