//! Box, image and video level evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxXyxy};
use crate::error::{Error, Result};

pub const DEFAULT_AP_IOU: f64 = 0.1;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

/// Report keys in `summary.csv` order.
pub const SUMMARY_KEYS: [&str; 9] = [
    "bbox_ap01",
    "image_auc",
    "video_auc",
    "acc",
    "f1",
    "precision",
    "recall",
    "ttd",
    "detection_rate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMeta {
    pub video_id: String,
    pub frame_index: usize,
    pub is_positive: bool,
    pub fire_start_index: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSet {
    pub detections: Vec<Detection>,
    pub ground_truth: BTreeMap<String, Vec<BoxXyxy>>,
    pub meta: BTreeMap<String, ImageMeta>,
}

impl EvalSet {
    pub fn validate(&self) -> Result<()> {
        for d in &self.detections {
            if !self.meta.contains_key(&d.image_id) {
                return Err(Error::Metric(format!("detection on unknown image `{}`", d.image_id)));
            }
            if !d.score.is_finite() || !(d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3]) {
                return Err(Error::Metric(format!(
                    "invalid detection on `{}`: {:?} score {}",
                    d.image_id, d.bbox, d.score
                )));
            }
        }
        Ok(())
    }
}

/// Named `(x, y)` point sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    fn new(name: &str, x_label: &str, y_label: &str, points: Vec<(f64, f64)>) -> Self {
        Curve {
            name: name.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            points,
        }
    }
}

fn total_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)).then_with(|| {
        a.bbox
            .iter()
            .zip(&b.bbox)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Sorts detections into evaluation order: descending score, then image id,
/// then box coordinates.
pub fn ranking(dets: &[Detection]) -> Vec<&Detection> {
    let mut v: Vec<&Detection> = dets.iter().collect();
    v.sort_by(|a, b| total_order(a, b));
    v
}

/// Greedy TP/FP labelling of already-ordered detections: each one takes the
/// highest-IoU unmatched ground truth of its image when that IoU reaches
/// `iou_thresh`.
pub fn match_detections(ordered: &[&Detection], gt: &BTreeMap<String, Vec<BoxXyxy>>, iou_thresh: f64) -> Vec<bool> {
    let mut used: BTreeMap<&str, Vec<bool>> = gt.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    ordered
        .iter()
        .map(|d| {
            let Some(boxes) = gt.get(&d.image_id) else { return false };
            let taken = used.get_mut(d.image_id.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point average precision `Σ P·ΔR` over true-positive steps, without
/// precision-envelope interpolation, plus the `(recall, precision)` curve.
/// AP is 0 when there is no ground truth.
pub fn ap_from_matches(matches: &[bool], num_gt: usize) -> (f64, Curve) {
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut points = Vec::with_capacity(matches.len());
    for (i, &m) in matches.iter().enumerate() {
        if m {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        if m && num_gt > 0 {
            ap += precision / num_gt as f64;
        }
        points.push((recall, precision));
    }
    (ap, Curve::new("pr_bbox", "recall", "precision", points))
}

pub fn ap_at_iou(set: &EvalSet, iou_thresh: f64) -> (f64, Curve) {
    let ordered = ranking(&set.detections);
    let matches = match_detections(&ordered, &set.ground_truth, iou_thresh);
    let num_gt = set.ground_truth.values().map(Vec::len).sum();
    ap_from_matches(&matches, num_gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Image,
    Video,
}

/// Max detection score per image (0 without detections), or per video as
/// the max over its frames.
pub fn aggregate_scores(set: &EvalSet, level: Level) -> BTreeMap<String, f64> {
    let mut image: BTreeMap<String, f64> = set.meta.keys().map(|k| (k.clone(), 0.0)).collect();
    for d in &set.detections {
        if let Some(s) = image.get_mut(&d.image_id) {
            *s = s.max(d.score);
        }
    }
    match level {
        Level::Image => image,
        Level::Video => {
            let mut video: BTreeMap<String, f64> = BTreeMap::new();
            for (id, m) in &set.meta {
                let e = video.entry(m.video_id.clone()).or_insert(0.0);
                *e = e.max(image[id]);
            }
            video
        }
    }
}

/// Scores split by label: images by `is_positive`, videos positive when any
/// frame is.
pub fn labelled_scores(set: &EvalSet, level: Level) -> (Vec<f64>, Vec<f64>) {
    let scores = aggregate_scores(set, level);
    let mut positive: BTreeMap<&str, bool> = BTreeMap::new();
    for (id, m) in &set.meta {
        let key = match level {
            Level::Image => id.as_str(),
            Level::Video => m.video_id.as_str(),
        };
        *positive.entry(key).or_insert(false) |= m.is_positive;
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (id, s) in &scores {
        if positive[id.as_str()] {
            pos.push(*s);
        } else {
            neg.push(*s);
        }
    }
    (pos, neg)
}

/// Ranks `1..=n` of the pooled sample with tied values sharing their mean
/// rank. Returns the rank sum of the first `first` entries.
fn first_rank_sum(values: &[f64], first: usize) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        sum += mid * idx[i..=j].iter().filter(|&&k| k < first).count() as f64;
        i = j + 1;
    }
    sum
}

/// `P(pos > neg) + ½ P(pos = neg)` via mid-rank sums.
pub fn mann_whitney_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric(format!(
            "AUC undefined with {} positive and {} negative scores",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let pooled: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let u = first_rank_sum(&pooled, pos.len()) - m * (m + 1.0) / 2.0;
    Ok(u / (m * n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
    /// `(recall, precision)` at each distinct threshold, highest first.
    pub pr: Vec<(f64, f64)>,
}

/// Sweeps a `score ≥ t` threshold over every distinct score.
pub fn roc_pr_curves(pos: &[f64], neg: &[f64]) -> Result<Curves> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric("curves need both positive and negative scores".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push((fp as f64 / n, tp as f64 / p));
        pr.push((tp as f64 / p, tp as f64 / (tp + fp) as f64));
    }
    Ok(Curves { roc, pr })
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub acc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion-matrix metrics at `score ≥ threshold`. Precision is 0 when
/// nothing is predicted positive and F1 is 0 when `P + R = 0`.
pub fn classification_metrics(pos: &[f64], neg: &[f64], threshold: f64) -> Result<Classification> {
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::Metric("classification metrics need at least one score".into()));
    }
    let tp = pos.iter().filter(|&&s| s >= threshold).count() as f64;
    let fneg = pos.len() as f64 - tp;
    let fp = neg.iter().filter(|&&s| s >= threshold).count() as f64;
    let tn = neg.len() as f64 - fp;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Classification {
        acc: (tp + tn) / (tp + tn + fp + fneg),
        f1,
        precision,
        recall,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeToDetection {
    /// Mean over detected positive videos; NaN when none was detected.
    pub mean_minutes: f64,
    /// Detected over all positive videos; NaN without positive videos.
    pub detection_rate: f64,
}

/// Per positive video: minutes from the fire-start frame to the first frame
/// at or after it whose image score reaches `threshold`. Videos never
/// detected are left out of the mean and lower the detection rate.
pub fn time_to_detection(set: &EvalSet, threshold: f64, frame_interval_minutes: f64) -> Result<TimeToDetection> {
    let scores = aggregate_scores(set, Level::Image);
    let mut videos: BTreeMap<&str, Vec<(&ImageMeta, f64)>> = BTreeMap::new();
    for (id, m) in &set.meta {
        videos.entry(m.video_id.as_str()).or_default().push((m, scores[id]));
    }
    let (mut detected, mut positive, mut total) = (0usize, 0usize, 0.0);
    for (vid, frames) in videos {
        if !frames.iter().any(|(m, _)| m.is_positive) {
            continue;
        }
        positive += 1;
        let start = frames
            .iter()
            .find_map(|(m, _)| m.fire_start_index)
            .ok_or_else(|| Error::Metric(format!("positive video `{vid}` has no fire_start_index")))?;
        let first = frames
            .iter()
            .filter(|(m, s)| m.frame_index >= start && *s >= threshold)
            .map(|(m, _)| m.frame_index)
            .min();
        if let Some(f) = first {
            detected += 1;
            total += (f - start) as f64 * frame_interval_minutes;
        }
    }
    Ok(TimeToDetection {
        mean_minutes: if detected == 0 { f64::NAN } else { total / detected as f64 },
        detection_rate: if positive == 0 {
            f64::NAN
        } else {
            detected as f64 / positive as f64
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalLevel {
    Bbox,
    Image,
    Video,
    All,
}

impl EvalLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bbox" => Ok(EvalLevel::Bbox),
            "image" => Ok(EvalLevel::Image),
            "video" => Ok(EvalLevel::Video),
            "all" => Ok(EvalLevel::All),
            other => Err(Error::Config(format!(
                "unknown eval level `{other}` (expected bbox, image, video or all)"
            ))),
        }
    }

    fn includes(self, other: EvalLevel) -> bool {
        self == EvalLevel::All || self == other
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub level: EvalLevel,
    pub iou_thresh: f64,
    pub score_threshold: f64,
    pub frame_interval_minutes: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            level: EvalLevel::All,
            iou_thresh: DEFAULT_AP_IOU,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            frame_interval_minutes: 1.0,
        }
    }
}

/// Every metric of one evaluation. Metrics outside the requested level, or
/// undefined on the data (e.g. AUC without negatives), are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bbox_ap01: f64,
    pub image_auc: f64,
    pub video_auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub ttd: f64,
    pub detection_rate: f64,
    pub curves: Vec<Curve>,
    /// Whether box matching ran.
    pub matched_boxes: bool,
}

impl EvalReport {
    pub fn values(&self) -> [(&'static str, f64); 9] {
        [
            ("bbox_ap01", self.bbox_ap01),
            ("image_auc", self.image_auc),
            ("video_auc", self.video_auc),
            ("acc", self.acc),
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
            ("ttd", self.ttd),
            ("detection_rate", self.detection_rate),
        ]
    }
}

fn auc_or_nan(pos: &[f64], neg: &[f64]) -> f64 {
    mann_whitney_auc(pos, neg).unwrap_or(f64::NAN)
}

pub fn evaluate(set: &EvalSet, opts: &EvalOptions) -> Result<EvalReport> {
    set.validate()?;
    let nan = f64::NAN;
    let mut r = EvalReport {
        bbox_ap01: nan,
        image_auc: nan,
        video_auc: nan,
        acc: nan,
        f1: nan,
        precision: nan,
        recall: nan,
        ttd: nan,
        detection_rate: nan,
        curves: Vec::new(),
        matched_boxes: false,
    };
    if opts.level.includes(EvalLevel::Bbox) {
        let (ap, curve) = ap_at_iou(set, opts.iou_thresh);
        r.bbox_ap01 = ap;
        r.curves.push(curve);
        r.matched_boxes = true;
    }
    if opts.level.includes(EvalLevel::Image) {
        let (pos, neg) = labelled_scores(set, Level::Image);
        r.image_auc = auc_or_nan(&pos, &neg);
        if let Ok(c) = classification_metrics(&pos, &neg, opts.score_threshold) {
            (r.acc, r.f1, r.precision, r.recall) = (c.acc, c.f1, c.precision, c.recall);
        }
        push_curves(&mut r.curves, "image", &pos, &neg);
    }
    if opts.level.includes(EvalLevel::Video) {
        let (pos, neg) = labelled_scores(set, Level::Video);
        r.video_auc = auc_or_nan(&pos, &neg);
        let t = time_to_detection(set, opts.score_threshold, opts.frame_interval_minutes)?;
        r.ttd = t.mean_minutes;
        r.detection_rate = t.detection_rate;
        push_curves(&mut r.curves, "video", &pos, &neg);
    }
    Ok(r)
}

fn push_curves(out: &mut Vec<Curve>, level: &str, pos: &[f64], neg: &[f64]) {
    if let Ok(c) = roc_pr_curves(pos, neg) {
        out.push(Curve::new(&format!("pr_{level}"), "recall", "precision", c.pr));
        out.push(Curve::new(
            &format!("roc_{level}"),
            "false positive rate",
            "true positive rate",
            c.roc,
        ));
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// `metric,value` rows in [`SUMMARY_KEYS`] order.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in report.values() {
        writeln!(s, "{k},{v}").expect("string write");
    }
    s
}

/// Parses a `summary.csv`, requiring exactly the [`SUMMARY_KEYS`].
pub fn parse_summary_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("metric,value") {
        return Err(Error::Metric("summary.csv must start with `metric,value`".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| Error::Metric(format!("summary.csv line {}: expected `metric,value`", i + 2)))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Metric(format!("summary.csv line {}: bad value `{v}`", i + 2)))?;
        rows.push((k.to_string(), v));
    }
    let keys: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
    if keys != SUMMARY_KEYS {
        return Err(Error::Metric(format!("summary.csv keys {keys:?} differ from {SUMMARY_KEYS:?}")));
    }
    Ok(rows)
}

pub fn curve_csv(curve: &Curve) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in &curve.points {
        writeln!(s, "{x},{y}").expect("string write");
    }
    s
}

/// 800×600 polyline plot of a curve on the unit square with labelled axes.
pub fn curve_svg(curve: &Curve) -> String {
    let (w, h, m) = (800.0, 600.0, 60.0);
    let px = |x: f64| m + x.clamp(0.0, 1.0) * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="600" viewBox="0 0 800 600">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="800" height="600" fill="white"/>"#).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{t}</text>"#,
            px(t),
            h - m + 18.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{t}</text>"#,
            m - 6.0,
            py(t) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 15.0,
        curve.x_label
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        curve.y_label
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="30" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        curve.name
    )
    .unwrap();
    let pts: Vec<String> = curve.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        pts.join(" ")
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Writes `summary.csv`, `curve_<name>.csv` and optionally `curve_<name>.svg`.
pub fn write_report(dir: &Path, report: &EvalReport, svg: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_file(&dir.join("summary.csv"), &summary_csv(report))?;
    for c in &report.curves {
        write_file(&dir.join(format!("curve_{}.csv", c.name)), &curve_csv(c))?;
        if svg {
            write_file(&dir.join(format!("curve_{}.svg", c.name)), &curve_svg(c))?;
        }
    }
    Ok(())
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut out = Vec::new();
    for d in dets {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}
