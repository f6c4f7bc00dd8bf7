use crate::autodiff::Graph;
use crate::error::Result;
use crate::nn::Conv;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{FeatureMaps, ModelConfig};

/// Path-aggregation fusion: a top-down pass (nearest 2× upsampling of a
/// 1×1 lateral projection, added to the finer map), then a bottom-up pass
/// (stride-2 3×3 conv added to the coarser map), then 3×3 smoothing per
/// level. Output shapes equal input shapes.
#[derive(Clone, Debug)]
pub struct Pafpn {
    pub lateral4: Conv,
    pub lateral3: Conv,
    pub down2: Conv,
    pub down3: Conv,
    pub smooth: [Conv; 3],
}

impl Pafpn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let [c2, c3, c4] = cfg.stage_channels();
        Ok(Pafpn {
            lateral4: Conv::same(store, "neck.lateral4", 1, c4, c3, rng)?,
            lateral3: Conv::same(store, "neck.lateral3", 1, c3, c2, rng)?,
            down2: Conv::new(store, "neck.down2", 3, c2, c3, 2, 1, rng)?,
            down3: Conv::new(store, "neck.down3", 3, c3, c4, 2, 1, rng)?,
            smooth: [
                Conv::same(store, "neck.smooth2", 3, c2, c2, rng)?,
                Conv::same(store, "neck.smooth3", 3, c3, c3, rng)?,
                Conv::same(store, "neck.smooth4", 3, c4, c4, rng)?,
            ],
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &FeatureMaps) -> Result<FeatureMaps> {
        // top-down
        let l4 = self.lateral4.forward(g, p.p4)?;
        let u4 = g.upsample_nearest2x(l4)?;
        let td3 = g.add(p.p3, u4)?;
        let l3 = self.lateral3.forward(g, td3)?;
        let u3 = g.upsample_nearest2x(l3)?;
        let td2 = g.add(p.p2, u3)?;
        // bottom-up
        let d2 = self.down2.forward(g, td2)?;
        let bu3 = g.add(td3, d2)?;
        let d3 = self.down3.forward(g, bu3)?;
        let bu4 = g.add(p.p4, d3)?;
        Ok(FeatureMaps {
            p2: self.smooth[0].forward(g, td2)?,
            p3: self.smooth[1].forward(g, bu3)?,
            p4: self.smooth[2].forward(g, bu4)?,
        })
    }
}
