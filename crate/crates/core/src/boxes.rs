//! Box geometry, cell decoding and non-maximum suppression.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw width/height regressions are clamped to this magnitude before `exp`.
pub const MAX_LOG_SIZE: f64 = 10.0;
pub const DEFAULT_NMS_IOU: f64 = 0.65;

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels.
pub type BoxXyxy = [f64; 4];

pub fn area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn center(b: &BoxXyxy) -> (f64, f64) {
    ((b[0] + b[2]) * 0.5, (b[1] + b[3]) * 0.5)
}

/// Decodes raw `(dx, dy, dw, dh)` at cell `(row, col)` of a stride-`s` map.
pub fn decode_cell(raw: [f64; 4], row: usize, col: usize, stride: usize) -> BoxXyxy {
    let s = stride as f64;
    let cx = (col as f64 + 0.5 + raw[0]) * s;
    let cy = (row as f64 + 0.5 + raw[1]) * s;
    let w = raw[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * s;
    let h = raw[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * s;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Inverse of [`decode_cell`] for boxes whose log-size lies within the clamp.
pub fn encode_cell(b: &BoxXyxy, row: usize, col: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let (cx, cy) = center(b);
    [
        cx / s - col as f64 - 0.5,
        cy / s - row as f64 - 0.5,
        ((b[2] - b[0]) / s).ln(),
        ((b[3] - b[1]) / s).ln(),
    ]
}

pub fn clip(b: &BoxXyxy, width: f64, height: f64) -> BoxXyxy {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoxXyxy,
    pub score: f64,
}

/// Greedy class-agnostic NMS. Returns kept indices ordered by descending
/// score (ties keep input order).
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k].bbox, &boxes[i].bbox) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    /// Cells scoring below this are dropped before NMS.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.001,
            nms_iou: DEFAULT_NMS_IOU,
            max_detections: 100,
        }
    }
}

/// Head values of one level, taken off the graph.
pub struct LevelValues<'a, T> {
    pub conf: &'a Tensor<T>,
    pub cls: &'a Tensor<T>,
    pub box_raw: &'a Tensor<T>,
    pub stride: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes every level for every image of the batch, clips to the
/// `width × height` input and applies NMS. Score is
/// `sigmoid(conf) · max_c sigmoid(cls_c)`.
pub fn decode_detections<T: Scalar>(
    levels: &[LevelValues<'_, T>],
    width: usize,
    height: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<ScoredBox>>> {
    let batch = match levels.first() {
        Some(l) => l.conf.nhwc()?.0,
        None => return Ok(Vec::new()),
    };
    let mut out = Vec::with_capacity(batch);
    for bi in 0..batch {
        let mut cands = Vec::new();
        for lv in levels {
            let (b, h, w, one) = lv.conf.nhwc()?;
            let (_, _, _, nc) = lv.cls.nhwc()?;
            if b != batch || one != 1 || lv.box_raw.shape() != [b, h, w, 4] || lv.cls.shape()[..3] != [b, h, w] {
                return Err(Error::invalid("decode_detections", "head outputs have inconsistent shapes"));
            }
            let conf = lv.conf.data();
            let cls = lv.cls.data();
            let raw = lv.box_raw.data();
            for r in 0..h {
                for c in 0..w {
                    let cell = (bi * h + r) * w + c;
                    let best = cls[cell * nc..(cell + 1) * nc]
                        .iter()
                        .map(|v| v.to_f64c())
                        .fold(f64::NEG_INFINITY, f64::max);
                    let score = sigmoid(conf[cell].to_f64c()) * sigmoid(best);
                    if score.is_nan() || score < cfg.score_threshold || score <= 0.0 {
                        continue;
                    }
                    let q = &raw[cell * 4..cell * 4 + 4];
                    let d = decode_cell([q[0].to_f64c(), q[1].to_f64c(), q[2].to_f64c(), q[3].to_f64c()], r, c, lv.stride);
                    let bbox = clip(&d, width as f64, height as f64);
                    if bbox[2] > bbox[0] && bbox[3] > bbox[1] {
                        cands.push(ScoredBox { bbox, score });
                    }
                }
            }
        }
        let keep = nms(&cands, cfg.nms_iou);
        out.push(keep.into_iter().take(cfg.max_detections).map(|i| cands[i]).collect());
    }
    Ok(out)
}
