//! Windowed-attention backbone, path-aggregation neck and decoupled head.

mod attention;
mod backbone;
mod head;
mod neck;

pub use attention::WindowAttentionBlock;
pub use backbone::{Backbone, Stage};
pub use head::{Head, LevelHead};
pub use neck::Pafpn;

use crate::autodiff::{Graph, Var};
use crate::ccpe::{Ccpe, ContrastConfig};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Input frame stacking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TemporalMode {
    #[default]
    Single,
    /// Current frame `t` stacked with frame `t − 2` of the same video.
    Concat2,
}

impl TemporalMode {
    pub fn channels(self) -> usize {
        match self {
            TemporalMode::Single => 3,
            TemporalMode::Concat2 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemporalMode::Single => "single",
            TemporalMode::Concat2 => "concat2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TemporalMode::Single),
            "concat2" => Ok(TemporalMode::Concat2),
            other => Err(Error::Config(format!(
                "unknown temporal mode `{other}` (expected single or concat2)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Stage widths are `[2, 4, 8] × base_channels`.
    pub base_channels: usize,
    pub window_size: usize,
    pub heads: [usize; 3],
    pub blocks_per_stage: usize,
    pub mlp_ratio: usize,
    pub strides: [usize; 3],
    pub num_classes: usize,
    pub temporal_mode: TemporalMode,
    pub embed: ContrastConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 24,
            window_size: 4,
            heads: [2, 4, 8],
            blocks_per_stage: 2,
            mlp_ratio: 4,
            strides: [8, 16, 32],
            num_classes: 1,
            temporal_mode: TemporalMode::Single,
            embed: ContrastConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn stage_channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [2 * c, 4 * c, 8 * c]
    }

    pub fn head_width(&self) -> usize {
        2 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.window_size == 0 || self.mlp_ratio == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("model widths, window and depth must be positive".into()));
        }
        for (c, h) in self.stage_channels().iter().zip(&self.heads) {
            if *h == 0 || c % h != 0 {
                return Err(Error::Config(format!("stage width {c} is not divisible by {h} heads")));
            }
        }
        if self.strides != [8, 16, 32] {
            return Err(Error::Config(format!("level strides must be [8, 16, 32], got {:?}", self.strides)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.embed.in_channels != self.temporal_mode.channels() {
            return Err(Error::Config(format!(
                "embedding expects {} input channels but temporal mode {} supplies {}",
                self.embed.in_channels,
                self.temporal_mode.name(),
                self.temporal_mode.channels()
            )));
        }
        if self.embed.patch_stride != 4 {
            return Err(Error::Config("the embedding must have stride 4".into()));
        }
        Ok(())
    }
}

/// Three pyramid levels at strides 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMaps {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
}

impl FeatureMaps {
    pub fn levels(&self) -> [Var; 3] {
        [self.p2, self.p3, self.p4]
    }
}

/// Raw logits and box regression for one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    /// `[B, h, w, 1]`
    pub conf: Var,
    /// `[B, h, w, num_classes]`
    pub cls: Var,
    /// `[B, h, w, 4]` as `(dx, dy, dw, dh)`.
    pub box_raw: Var,
    pub stride: usize,
}

pub type HeadOutputs = Vec<LevelOutput>;

/// Complete detector: contrast embedding, backbone, neck and head.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub embed: Ccpe,
    pub backbone: Backbone,
    pub neck: Pafpn,
    pub head: Head,
}

impl Detector {
    /// `input_size` is the smallest square input the model must accept;
    /// contrast strides are validated against it.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, input_size: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if input_size == 0 || !input_size.is_multiple_of(32) {
            return Err(Error::Config(format!("input size {input_size} must be a positive multiple of 32")));
        }
        let embed = Ccpe::new(store, cfg.embed.clone(), (input_size, input_size), rng)?;
        let backbone = Backbone::new(store, cfg, cfg.embed.out_channels(), rng)?;
        let neck = Pafpn::new(store, cfg, rng)?;
        let head = Head::new(store, cfg, rng)?;
        Ok(Detector {
            cfg: cfg.clone(),
            embed,
            backbone,
            neck,
            head,
        })
    }

    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<FeatureMaps> {
        let e = self.embed.forward(g, images)?;
        let p = self.backbone.forward(g, e)?;
        self.neck.forward(g, &p)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<HeadOutputs> {
        let p = self.features(g, images)?;
        self.head.forward(g, &p)
    }

    /// Number of prediction cells per image for an `h × w` input, in the
    /// flat level-major layout used by assignment and sampling.
    pub fn cell_count(&self, h: usize, w: usize) -> usize {
        level_shapes(h, w, &self.cfg.strides).iter().map(|(a, b)| a * b).sum()
    }
}

/// `(rows, cols)` of each level for an `h × w` input.
pub fn level_shapes(h: usize, w: usize, strides: &[usize; 3]) -> [(usize, usize); 3] {
    strides.map(|s| (h / s, w / s))
}
