//! Mask-weighted detection loss.

use crate::assign::Assignment;
use crate::autodiff::{Graph, IouTarget, Var};
use crate::error::{Error, Result};
use crate::model::LevelOutput;
use crate::sampling::MaskSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BOX_WEIGHT: f64 = 5.0;

/// Total loss node and its components, already normalized by the positive
/// count.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub conf: f64,
    pub cls: f64,
    pub bbox: f64,
    pub num_pos: usize,
}

/// Confidence logits of every cell as `[batch · cells]` in the flat layout.
pub fn flatten_conf<T: Scalar>(g: &Graph<T>, head: &[LevelOutput]) -> Result<Vec<f64>> {
    let tensors: Vec<&Tensor<T>> = head.iter().map(|l| g.value(l.conf)).collect();
    flatten_levels(&tensors)
}

/// Interleaves single-channel level maps `[B,h,w,1]` into per-image runs.
pub fn flatten_levels<T: Scalar>(levels: &[&Tensor<T>]) -> Result<Vec<f64>> {
    let batch = match levels.first() {
        Some(t) => t.nhwc()?.0,
        None => return Ok(Vec::new()),
    };
    let mut out = Vec::new();
    for b in 0..batch {
        for t in levels {
            let (tb, h, w, c) = t.nhwc()?;
            if tb != batch || c != 1 {
                return Err(Error::invalid(
                    "flatten_levels",
                    format!("expected [{batch},h,w,1], got {:?}", t.shape()),
                ));
            }
            out.extend(t.data()[b * h * w..(b + 1) * h * w].iter().map(|v| v.to_f64c()));
        }
    }
    Ok(out)
}

/// `L_conf` over positive and sampled negative cells, `L_cls` and the IoU
/// loss over positive cells; `total = (L_conf + L_cls + λ·L_box) / max(P, 1)`.
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<T>,
    head: &[LevelOutput],
    assign: &Assignment,
    masks: &MaskSet,
    box_weight: f64,
) -> Result<LossTerms> {
    masks.check()?;
    let layout = &assign.layout;
    if masks.pos != assign.positive_mask() || masks.cells != layout.cells_per_image() || masks.batch != assign.batch {
        return Err(Error::Mask("masks were not built from this assignment".into()));
    }
    if head.len() != layout.levels.len() {
        return Err(Error::Mask(format!(
            "{} head levels for {} layout levels",
            head.len(),
            layout.levels.len()
        )));
    }
    let conf_mask = masks.conf_mask();
    let (batch, cells) = (assign.batch, layout.cells_per_image());
    let mut conf_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (l, (lo, grid)) in head.iter().zip(&layout.levels).enumerate() {
        let (b, h, w, _) = g.value(lo.conf).nhwc()?;
        let nc = g.shape(lo.cls)[3];
        if b != batch || h != grid.rows || w != grid.cols || lo.stride != grid.stride {
            return Err(Error::Mask(format!(
                "head level {l} shape {:?} does not match the layout",
                g.shape(lo.conf)
            )));
        }
        let mut conf_t = vec![T::zero(); b * h * w];
        let mut conf_w = vec![T::zero(); b * h * w];
        let mut cls_t = vec![T::zero(); b * h * w * nc];
        let mut cls_w = vec![T::zero(); b * h * w * nc];
        let mut targets = Vec::new();
        for bi in 0..b {
            for r in 0..h {
                for c in 0..w {
                    let cell = layout.index(l, r, c);
                    let flat = bi * cells + cell;
                    let local = (bi * h + r) * w + c;
                    if conf_mask[flat] {
                        conf_w[local] = T::one();
                    }
                    if let Some(gt) = assign.target(bi, cell) {
                        if gt.class >= nc {
                            return Err(Error::Mask(format!("class {} outside {nc} head classes", gt.class)));
                        }
                        conf_t[local] = T::one();
                        cls_w[local * nc..(local + 1) * nc].iter_mut().for_each(|v| *v = T::one());
                        cls_t[local * nc + gt.class] = T::one();
                        targets.push(IouTarget {
                            batch: bi,
                            row: r,
                            col: c,
                            target: gt.bbox.map(T::from_f64c),
                        });
                    }
                }
            }
        }
        let shape1 = [b, h, w, 1];
        let shapec = [b, h, w, nc];
        conf_terms.push(g.bce_with_logits(lo.conf, Tensor::new(&shape1, conf_t)?, Tensor::new(&shape1, conf_w)?)?);
        cls_terms.push(g.bce_with_logits(lo.cls, Tensor::new(&shapec, cls_t)?, Tensor::new(&shapec, cls_w)?)?);
        box_terms.push(g.iou_loss(lo.box_raw, lo.stride as f64, targets)?);
    }
    let num_pos = masks.num_pos();
    let norm = 1.0 / num_pos.max(1) as f64;
    let conf = sum_all(g, &conf_terms)?;
    let cls = sum_all(g, &cls_terms)?;
    let bbox = sum_all(g, &box_terms)?;
    let weighted_box = g.scale(bbox, box_weight)?;
    let s = g.add(conf, cls)?;
    let s = g.add(s, weighted_box)?;
    let total = g.scale(s, norm)?;
    let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64c() * norm;
    Ok(LossTerms {
        total,
        conf: scalar(g, conf),
        cls: scalar(g, cls),
        bbox: scalar(g, bbox),
        num_pos,
    })
}

fn sum_all<T: Scalar>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}
