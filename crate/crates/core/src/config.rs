//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::boxes::{DecodeConfig, DEFAULT_NMS_IOU};
use crate::ccpe::{ContrastConfig, DEFAULT_STRIDES};
use crate::error::{Error, Result};
use crate::loss::DEFAULT_BOX_WEIGHT;
use crate::metrics::{EvalLevel, DEFAULT_AP_IOU, DEFAULT_SCORE_THRESHOLD};
use crate::model::{ModelConfig, TemporalMode};
use crate::param::SgdConfig;
use crate::sampling::{SamplingConfig, SamplingMode};
use crate::scalar::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// CPU-sized defaults.
    Desk,
    /// Hyperparameters of the full-scale setup.
    Full,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    /// Optimizer steps; ignored when `epochs > 0`.
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub input_size: usize,
    pub flip: bool,
    pub dtype: DType,
    pub box_weight: f64,
    /// Global gradient-norm cap (0 = off).
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to `MIN_LR_RATIO · lr` over the run.
    Cosine,
}

pub const MIN_LR_RATIO: f64 = 0.05;

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!(
                "unknown lr_schedule `{other}` (expected constant or cosine)"
            ))),
        }
    }
}

impl TrainConfig {
    /// Learning rate of 0-based step `step` out of `total`: linear warmup,
    /// then the schedule.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.sgd.lr;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let min = base * MIN_LR_RATIO;
                min + (base - min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub score_threshold: f64,
    pub level: EvalLevel,
    pub decode: DecodeConfig,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn level_name(l: EvalLevel) -> &'static str {
    match l {
        EvalLevel::Bbox => "bbox",
        EvalLevel::Image => "image",
        EvalLevel::Video => "video",
        EvalLevel::All => "all",
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Sampling ratios for 128² inputs: the full-scale ratios times 336 / 8400,
/// the cell-count ratio between 128² and 640² inputs. Unscaled, every mode
/// would select all negatives of a desk batch.
pub const DESK_SAMPLING: SamplingConfig = SamplingConfig {
    mode: SamplingMode::Snsm,
    alpha1: 0.4,
    alpha2: 7.6,
    floor: 16,
    baseline_ratio: 8.0,
};

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk_strides = ContrastConfig::fitted_strides(128);
        let (batch_size, input_size, strides) = match preset {
            Preset::Desk => (8, 128, desk_strides),
            Preset::Full => (64, 640, DEFAULT_STRIDES.to_vec()),
        };
        RunConfig {
            preset,
            model: ModelConfig {
                embed: ContrastConfig {
                    strides_h: strides.clone(),
                    strides_v: strides,
                    ..ContrastConfig::default()
                },
                ..ModelConfig::default()
            },
            sampling: match preset {
                Preset::Desk => DESK_SAMPLING,
                Preset::Full => SamplingConfig::default(),
            },
            train: TrainConfig {
                sgd: SgdConfig::default(),
                batch_size,
                steps: 300,
                epochs: 0,
                seed: 0,
                input_size,
                flip: true,
                dtype: DType::F32,
                box_weight: DEFAULT_BOX_WEIGHT,
                grad_clip: 10.0,
                lr_schedule: LrSchedule::Cosine,
                warmup_steps: 0,
                checkpoint_every: 0,
            },
            eval: EvalConfig {
                iou_thresh: DEFAULT_AP_IOU,
                score_threshold: DEFAULT_SCORE_THRESHOLD,
                level: EvalLevel::All,
                decode: DecodeConfig {
                    nms_iou: DEFAULT_NMS_IOU,
                    ..DecodeConfig::default()
                },
                batch_size: 8,
            },
            data_dir: None,
            out_dir: None,
        }
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.sampling;
        let t = &self.train;
        let e = &self.eval;
        vec![
            ("preset", self.preset.name().into()),
            ("base_channels", m.base_channels.to_string()),
            ("window_size", m.window_size.to_string()),
            ("heads", list(&m.heads)),
            ("blocks_per_stage", m.blocks_per_stage.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("temporal_mode", m.temporal_mode.name().into()),
            ("strides_h", list(&m.embed.strides_h)),
            ("strides_v", list(&m.embed.strides_v)),
            ("embed_channels", m.embed.base_channels.to_string()),
            ("mask_channels", m.embed.mask_channels.to_string()),
            ("sampling_mode", s.mode.name().into()),
            ("alpha1", s.alpha1.to_string()),
            ("alpha2", s.alpha2.to_string()),
            ("floor", s.floor.to_string()),
            ("baseline_ratio", s.baseline_ratio.to_string()),
            ("lr", t.sgd.lr.to_string()),
            ("momentum", t.sgd.momentum.to_string()),
            ("weight_decay", t.sgd.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("steps", t.steps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("input_size", t.input_size.to_string()),
            ("flip", t.flip.to_string()),
            ("dtype", t.dtype.name().into()),
            ("box_weight", t.box_weight.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("lr_schedule", t.lr_schedule.name().into()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("iou_thresh", e.iou_thresh.to_string()),
            ("score_threshold", e.score_threshold.to_string()),
            ("eval_level", level_name(e.level).into()),
            ("nms_iou", e.decode.nms_iou.to_string()),
            ("decode_score_floor", e.decode.score_threshold.to_string()),
            ("max_detections", e.decode.max_detections.to_string()),
            ("eval_batch_size", e.batch_size.to_string()),
            ("data_dir", path_text(&self.data_dir)),
            ("out_dir", path_text(&self.out_dir)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    /// Parses a config file. `preset` is applied first wherever it appears;
    /// later keys override it. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            let k = k.trim();
            if pairs.iter().any(|(_, seen, _)| *seen == k) {
                return Err(Error::Config(format!("line {}: key `{k}` repeated", i + 1)));
            }
            pairs.push((i + 1, k, v.trim()));
        }
        let preset = match pairs.iter().find(|(_, k, _)| *k == "preset") {
            None => Preset::Desk,
            Some((_, _, "desk")) => Preset::Desk,
            Some((_, _, "full")) => Preset::Full,
            Some((n, _, v)) => return Err(Error::Config(format!("line {n}: unknown preset `{v}` (expected desk or full)"))),
        };
        let mut cfg = Self::preset(preset);
        for (n, k, v) in pairs {
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {n}: {msg}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides on top of this config, then validates.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                return Err(Error::Config("preset can only be chosen in the config file".into()));
            }
            self.set(k, v)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.sampling;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "preset" => {}
            "base_channels" => m.base_channels = num(key, v)?,
            "window_size" => m.window_size = num(key, v)?,
            "heads" => {
                let h: Vec<usize> = nums(key, v)?;
                m.heads = h.try_into().map_err(|_| Error::Config("heads takes exactly three values".into()))?;
            }
            "blocks_per_stage" => m.blocks_per_stage = num(key, v)?,
            "mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "num_classes" => m.num_classes = num(key, v)?,
            "temporal_mode" => {
                m.temporal_mode = TemporalMode::parse(v)?;
                m.embed.in_channels = m.temporal_mode.channels();
            }
            "strides_h" => m.embed.strides_h = nums(key, v)?,
            "strides_v" => m.embed.strides_v = nums(key, v)?,
            "embed_channels" => m.embed.base_channels = num(key, v)?,
            "mask_channels" => m.embed.mask_channels = num(key, v)?,
            "sampling_mode" => s.mode = SamplingMode::parse(v)?,
            "alpha1" => s.alpha1 = num(key, v)?,
            "alpha2" => s.alpha2 = num(key, v)?,
            "floor" => s.floor = num(key, v)?,
            "baseline_ratio" => s.baseline_ratio = num(key, v)?,
            "lr" => t.sgd.lr = num(key, v)?,
            "momentum" => t.sgd.momentum = num(key, v)?,
            "weight_decay" => t.sgd.weight_decay = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "steps" => t.steps = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "input_size" => t.input_size = num(key, v)?,
            "flip" => t.flip = num(key, v)?,
            "dtype" => t.dtype = DType::parse(v).ok_or_else(|| Error::Config(format!("unknown dtype `{v}` (expected f32 or f64)")))?,
            "box_weight" => t.box_weight = num(key, v)?,
            "grad_clip" => t.grad_clip = num(key, v)?,
            "lr_schedule" => t.lr_schedule = LrSchedule::parse(v)?,
            "warmup_steps" => t.warmup_steps = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "iou_thresh" => e.iou_thresh = num(key, v)?,
            "score_threshold" => e.score_threshold = num(key, v)?,
            "eval_level" => e.level = EvalLevel::parse(v)?,
            "nms_iou" => e.decode.nms_iou = num(key, v)?,
            "decode_score_floor" => e.decode.score_threshold = num(key, v)?,
            "max_detections" => e.decode.max_detections = num(key, v)?,
            "eval_batch_size" => e.batch_size = num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let size = self.train.input_size;
        self.model.embed.validate(size, size)?;
        self.sampling.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if size == 0 || !size.is_multiple_of(32) {
            return Err(Error::Config(format!("input_size {size} must be a positive multiple of 32")));
        }
        for (name, v) in [
            ("lr", t.sgd.lr),
            ("momentum", t.sgd.momentum),
            ("weight_decay", t.sgd.weight_decay),
            ("box_weight", t.box_weight),
            ("grad_clip", t.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        let e = &self.eval;
        for (name, v) in [
            ("iou_thresh", e.iou_thresh),
            ("score_threshold", e.score_threshold),
            ("nms_iou", e.decode.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn nums<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.steps, 300);
        assert_eq!(c.train.input_size, 128);
        assert_eq!(c.model.embed.strides_h, vec![1, 2, 4, 8, 16]);
        assert_eq!(c.train.sgd.lr, 0.01);
        // 16² + 8² + 4² cells at 128² against 80² + 40² + 20² at 640²
        let scale = (16 * 16 + 8 * 8 + 4 * 4) as f64 / (80 * 80 + 40 * 40 + 20 * 20) as f64;
        assert!((c.sampling.alpha1 - 10.0 * scale).abs() < 1e-12);
        assert!((c.sampling.alpha2 - 190.0 * scale).abs() < 1e-12);
        assert!((c.sampling.baseline_ratio - 200.0 * scale).abs() < 1e-12);
        c.validate().unwrap();
    }

    #[test]
    fn full_preset() {
        let c = RunConfig::parse("seed = 3\npreset = full\n").unwrap();
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.input_size, 640);
        assert_eq!(c.model.embed.strides_h, DEFAULT_STRIDES.to_vec());
        assert_eq!(c.train.seed, 3);
        assert_eq!(
            (c.sampling.alpha1, c.sampling.alpha2, c.sampling.baseline_ratio),
            (10.0, 190.0, 200.0)
        );
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.sampling.mode = SamplingMode::Ohem;
        c.train.sgd.lr = 0.0125;
        c.data_dir = Some("some/dir".into());
        c.model.temporal_mode = TemporalMode::Concat2;
        c.model.embed.in_channels = 6;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("lr 0.1").is_err());
        assert!(RunConfig::parse("lr = fast").is_err());
        assert!(RunConfig::parse("lr = 0.1\nlr = 0.2").is_err());
        assert!(RunConfig::parse("strides_h = 1,2,64").is_err());
        let e = RunConfig::parse("# comment\n\nseed = 1 # trailing\nbogus = 2").unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
    }
}
