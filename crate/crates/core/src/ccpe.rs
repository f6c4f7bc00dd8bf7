//! Cross contrast patch embedding.
//!
//! A stride-4 patch convolution produces `F` with 48 channels. The
//! horizontal branch shifts `F` left by every stride `s` (circularly),
//! convolves each difference `F − F_s` into a one-channel contrast mask, and
//! fuses `concat(F, masks)` back to 48 channels. The vertical branch repeats
//! this with row shifts on the horizontal output. The embedding is
//! `norm(concat(F, vertical))` with 96 channels.
//!
//! The 3×3 convolutions inside both branches pad circularly, matching the
//! circular shifts, so a spatially constant input stays constant through the
//! horizontal branch and every contrast mask vanishes on it.

use crate::autodiff::{Axis, Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, LayerNorm};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const DEFAULT_STRIDES: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub strides_h: Vec<usize>,
    pub strides_v: Vec<usize>,
    pub in_channels: usize,
    pub base_channels: usize,
    pub patch_stride: usize,
    pub mask_channels: usize,
    /// Layer norm over the concatenated output.
    pub use_norm: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            strides_h: DEFAULT_STRIDES.to_vec(),
            strides_v: DEFAULT_STRIDES.to_vec(),
            in_channels: 3,
            base_channels: 48,
            patch_stride: 4,
            mask_channels: 1,
            use_norm: true,
        }
    }
}

impl ContrastConfig {
    pub fn out_channels(&self) -> usize {
        2 * self.base_channels
    }

    /// Default strides that fit an input of `size × size`.
    pub fn fitted_strides(size: usize) -> Vec<usize> {
        DEFAULT_STRIDES.iter().copied().filter(|&s| s < size / 4).collect()
    }

    /// Rejects configurations whose strides do not fit the smallest
    /// supported input (`min_h × min_w` pixels).
    pub fn validate(&self, min_h: usize, min_w: usize) -> Result<()> {
        if !matches!(self.in_channels, 3 | 6) {
            return Err(Error::Config(format!(
                "ccpe input channels must be 3 or 6, got {}",
                self.in_channels
            )));
        }
        if self.patch_stride == 0 || self.base_channels == 0 || self.mask_channels == 0 {
            return Err(Error::Config("ccpe widths and patch stride must be positive".into()));
        }
        let (fh, fw) = (min_h / self.patch_stride, min_w / self.patch_stride);
        let limit = fh.min(fw);
        for (name, strides) in [("strides_h", &self.strides_h), ("strides_v", &self.strides_v)] {
            if strides.is_empty() {
                return Err(Error::Config(format!("ccpe {name} is empty")));
            }
            if let Some(&s) = strides.iter().find(|&&s| s == 0 || s >= limit) {
                return Err(Error::Config(format!(
                    "ccpe {name} contains {s}; strides must lie in 1..{limit} for {min_h}x{min_w} inputs"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ContrastBranch {
    pub axis: Axis,
    pub strides: Vec<usize>,
    pub masks: Vec<Conv>,
    pub fuse: Conv,
}

/// Fused branch output plus the per-stride contrast masks.
pub struct ContrastOutput {
    pub fused: Var,
    pub masks: Vec<Var>,
}

impl ContrastBranch {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        axis: Axis,
        strides: &[usize],
        cfg: &ContrastConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = cfg.base_channels;
        let masks = strides
            .iter()
            .enumerate()
            .map(|(i, _)| {
                Conv::same(store, &format!("{name}.mask{i}"), 3, c, cfg.mask_channels, rng).map(|conv| conv.with_padding(Padding::Circular))
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse =
            Conv::same(store, &format!("{name}.fuse"), 3, c + strides.len() * cfg.mask_channels, c, rng)?.with_padding(Padding::Circular);
        Ok(ContrastBranch {
            axis,
            strides: strides.to_vec(),
            masks,
            fuse,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<ContrastOutput> {
        let len = match self.axis {
            Axis::Width => g.shape(x)[2],
            Axis::Height => g.shape(x)[1],
        };
        let mut masks = Vec::with_capacity(self.strides.len());
        for (&s, conv) in self.strides.iter().zip(&self.masks) {
            if s >= len {
                return Err(Error::Config(format!(
                    "contrast stride {s} does not fit a feature axis of length {len}"
                )));
            }
            let shifted = g.circular_shift(x, self.axis, s)?;
            let diff = g.sub(x, shifted)?;
            masks.push(conv.forward(g, diff)?);
        }
        let mut parts = vec![x];
        parts.extend_from_slice(&masks);
        let cat = g.concat(&parts)?;
        let fused = self.fuse.forward(g, cat)?;
        Ok(ContrastOutput { fused, masks })
    }

    pub fn param_count(&self) -> usize {
        self.masks.iter().map(Conv::param_count).sum::<usize>() + self.fuse.param_count()
    }

    fn macs(&self, h: usize, w: usize, channels: usize) -> usize {
        // subtraction per stride plus the convolutions
        self.strides.len() * h * w * channels + self.masks.iter().map(|m| m.macs(h, w)).sum::<usize>() + self.fuse.macs(h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Ccpe {
    pub cfg: ContrastConfig,
    pub patch: Conv,
    pub horizontal: ContrastBranch,
    pub vertical: ContrastBranch,
    pub norm: Option<LayerNorm>,
}

/// Every intermediate of one embedding pass.
pub struct CcpeTrace {
    pub patch: Var,
    pub horizontal: ContrastOutput,
    pub vertical: ContrastOutput,
    pub output: Var,
}

impl Ccpe {
    /// Registers parameters under `ccpe.*`. `min_input` is the smallest
    /// `(height, width)` the module must accept.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: ContrastConfig, min_input: (usize, usize), rng: &mut Rng) -> Result<Self> {
        cfg.validate(min_input.0, min_input.1)?;
        let c = cfg.base_channels;
        let p = cfg.patch_stride;
        let patch = Conv::new(store, "ccpe.patch", p, cfg.in_channels, c, p, 0, rng)?;
        let horizontal = ContrastBranch::new(store, "ccpe.h", Axis::Width, &cfg.strides_h, &cfg, rng)?;
        let vertical = ContrastBranch::new(store, "ccpe.v", Axis::Height, &cfg.strides_v, &cfg, rng)?;
        let norm = if cfg.use_norm {
            Some(LayerNorm::new(store, "ccpe.norm", cfg.out_channels())?)
        } else {
            None
        };
        Ok(Ccpe {
            cfg,
            patch,
            horizontal,
            vertical,
            norm,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, h, w, c] = shape else {
            return Err(Error::invalid("ccpe", format!("expected NHWC input, got {shape:?}")));
        };
        let p = self.cfg.patch_stride;
        if h % p != 0 || w % p != 0 {
            return Err(Error::invalid("ccpe", format!("input {h}x{w} not divisible by {p}")));
        }
        if c != self.cfg.in_channels {
            return Err(Error::invalid(
                "ccpe",
                format!("input has {c} channels, module built for {}", self.cfg.in_channels),
            ));
        }
        Ok(())
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<CcpeTrace> {
        self.check_input(g.shape(images))?;
        let f = self.patch.forward(g, images)?;
        let horizontal = self.horizontal.forward(g, f)?;
        let vertical = self.vertical.forward(g, horizontal.fused)?;
        let cat = g.concat(&[f, vertical.fused])?;
        let output = match &self.norm {
            Some(n) => n.forward(g, cat)?,
            None => cat,
        };
        Ok(CcpeTrace {
            patch: f,
            horizontal,
            vertical,
            output,
        })
    }

    /// `[B,H,W,cin] → [B,H/4,W/4,96]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        Ok(self.trace(g, images)?.output)
    }

    pub fn param_count(&self) -> usize {
        self.patch.param_count()
            + self.horizontal.param_count()
            + self.vertical.param_count()
            + if self.norm.is_some() { 2 * self.cfg.out_channels() } else { 0 }
    }

    /// Multiply-accumulates for one `h × w` image.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let p = self.cfg.patch_stride;
        let (fh, fw) = (h / p, w / p);
        let c = self.cfg.base_channels;
        self.patch.macs(h, w) + self.horizontal.macs(fh, fw, c) + self.vertical.macs(fh, fw, c)
    }
}

/// Parameters of the plain patch embedding CCPE replaces: a `p×p` stride-`p`
/// convolution straight to `out_channels`, followed by a layer norm.
pub fn vanilla_patch_embed_params(in_channels: usize, out_channels: usize, patch: usize) -> usize {
    patch * patch * in_channels * out_channels + out_channels + 2 * out_channels
}

pub fn vanilla_patch_embed_macs(in_channels: usize, out_channels: usize, patch: usize, h: usize, w: usize) -> usize {
    (h / patch) * (w / patch) * patch * patch * in_channels * out_channels
}
