use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::attention::WindowAttentionBlock;
use super::{FeatureMaps, ModelConfig};

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Conv,
    pub blocks: Vec<WindowAttentionBlock>,
}

/// Three stages of {stride-2 3×3 conv, two window-attention blocks} on top
/// of the stride-4 embedding, emitting maps at strides 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, in_channels: usize, rng: &mut Rng) -> Result<Self> {
        let channels = cfg.stage_channels();
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(3);
        for (i, (&c, &heads)) in channels.iter().zip(&cfg.heads).enumerate() {
            let down = Conv::new(store, &format!("backbone.s{i}.down"), 3, cin, c, 2, 1, rng)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|j| WindowAttentionBlock::new(store, &format!("backbone.s{i}.b{j}"), c, heads, cfg.window_size, cfg.mlp_ratio, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
            cin = c;
        }
        Ok(Backbone { stages })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, embedding: Var) -> Result<FeatureMaps> {
        let mut x = embedding;
        let mut outs = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            let (_, h, w, _) = g.value(x).nhwc()?;
            if h < 2 || w < 2 {
                return Err(Error::invalid(
                    "backbone",
                    format!("stage {i} input {h}x{w} is too small to downsample"),
                ));
            }
            x = stage.down.forward(g, x)?;
            for block in &stage.blocks {
                x = block.forward(g, x)?;
            }
            outs.push(x);
        }
        Ok(FeatureMaps {
            p2: outs[0],
            p3: outs[1],
            p4: outs[2],
        })
    }
}
