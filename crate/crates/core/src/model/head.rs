use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::Conv;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{FeatureMaps, LevelOutput, ModelConfig};

/// Initial foreground probability of the confidence and class outputs.
pub const PRIOR_PROBABILITY: f64 = 0.01;
/// Scale applied to the initial weights of the final 1×1 prediction convs.
const PREDICTION_INIT_SCALE: f64 = 0.01;

fn init_prediction<T: Scalar>(store: &mut ParamStore<T>, conv: &Conv, bias: f64) {
    let scale = T::from_f64c(PREDICTION_INIT_SCALE);
    let w = &mut store.get_mut(conv.w).value;
    w.data_mut().iter_mut().for_each(|v| *v *= scale);
    let b = &mut store.get_mut(conv.b).value;
    b.data_mut().iter_mut().for_each(|v| *v = T::from_f64c(bias));
}

/// Decoupled anchor-free head for one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelHead {
    pub cls_stem: Conv,
    pub reg_stem: Conv,
    pub conf: Conv,
    pub cls: Conv,
    pub bbox: Conv,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub levels: Vec<LevelHead>,
    pub strides: [usize; 3],
}

impl Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let hidden = cfg.head_width();
        let levels = cfg
            .stage_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let n = format!("head.l{i}");
                let lh = LevelHead {
                    cls_stem: Conv::same(store, &format!("{n}.cls_stem"), 3, c, hidden, rng)?,
                    reg_stem: Conv::same(store, &format!("{n}.reg_stem"), 3, c, hidden, rng)?,
                    conf: Conv::same(store, &format!("{n}.conf"), 1, hidden, 1, rng)?,
                    cls: Conv::same(store, &format!("{n}.cls"), 1, hidden, cfg.num_classes, rng)?,
                    bbox: Conv::same(store, &format!("{n}.box"), 1, hidden, 4, rng)?,
                };
                let prior = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
                init_prediction(store, &lh.conf, prior);
                init_prediction(store, &lh.cls, prior);
                init_prediction(store, &lh.bbox, 0.0);
                Ok(lh)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Head {
            levels,
            strides: cfg.strides,
        })
    }

    /// Per level: SiLU 3×3 stem → (confidence, class) logits, and a second
    /// SiLU 3×3 stem → raw box regression.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &FeatureMaps) -> Result<Vec<LevelOutput>> {
        let maps: [Var; 3] = [p.p2, p.p3, p.p4];
        let mut out = Vec::with_capacity(3);
        for ((lh, &x), &stride) in self.levels.iter().zip(&maps).zip(&self.strides) {
            let a = lh.cls_stem.forward(g, x)?;
            let a = g.silu(a)?;
            let conf = lh.conf.forward(g, a)?;
            let cls = lh.cls.forward(g, a)?;
            let r = lh.reg_stem.forward(g, x)?;
            let r = g.silu(r)?;
            let box_raw = lh.bbox.forward(g, r)?;
            out.push(LevelOutput {
                conf,
                cls,
                box_raw,
                stride,
            });
        }
        Ok(out)
    }
}
