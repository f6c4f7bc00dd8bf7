//! Synthetic smoke scenes, JSONL dataset ingestion and batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::FilterType;
use image::{ExtendedColorType, ImageEncoder, ImageFormat, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::GtBox;
use crate::boxes::BoxXyxy;
use crate::error::{Error, Result};
use crate::model::TemporalMode;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FRAMES_PER_VIDEO: usize = 10;
/// Latest frame at which a positive video's fire may start.
pub const MAX_FIRE_START: usize = 3;
/// Plume pixels with composite alpha above this belong to its box.
pub const ALPHA_BOX_THRESHOLD: f64 = 0.05;
/// Letterbox padding grey level.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

const RECORD_KEYS: [&str; 8] = [
    "image_path",
    "width",
    "height",
    "boxes",
    "video_id",
    "frame_index",
    "is_positive",
    "fire_start_index",
];

/// One annotated frame. `image_path` is relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoxXyxy>,
    pub video_id: String,
    pub frame_index: usize,
    pub is_positive: bool,
    pub fire_start_index: Option<usize>,
}

impl ImageRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("empty image {}x{}", self.width, self.height));
        }
        for b in &self.boxes {
            if !b.iter().all(|v| v.is_finite()) {
                return Err(format!("non-finite box {b:?}"));
            }
            if !(b[0] < b[2] && b[1] < b[3]) {
                return Err(format!("box {b:?} must satisfy x1 < x2 and y1 < y2"));
            }
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > self.width as f64 || b[3] > self.height as f64 {
                return Err(format!("box {b:?} outside the {}x{} image", self.width, self.height));
            }
        }
        if self.is_positive != !self.boxes.is_empty() {
            return Err(format!("is_positive={} but {} boxes", self.is_positive, self.boxes.len()));
        }
        if self.is_positive {
            match self.fire_start_index {
                None => return Err("positive frame without fire_start_index".into()),
                Some(s) if self.frame_index < s => {
                    return Err(format!("positive frame {} precedes fire start {s}", self.frame_index));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Stable image identifier: the relative path.
    pub fn id(&self) -> String {
        self.image_path.to_string_lossy().into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image_path)
    }

    pub fn load_image(&self, i: usize) -> Result<RgbImage> {
        let path = self.image_path(i);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
            .map_err(|e| Error::Image {
                path: path.clone(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let r = &self.records[i];
        if (img.width() as usize, img.height() as usize) != (r.width, r.height) {
            return Err(Error::Image {
                path,
                msg: format!(
                    "pixels are {}x{}, annotation says {}x{}",
                    img.width(),
                    img.height(),
                    r.width,
                    r.height
                ),
            });
        }
        Ok(img)
    }
}

/// Reads `annotations.jsonl` (or the file at `path`). Every line must hold
/// exactly the record keys; violations name the offending line.
pub fn load_jsonl_dataset(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = fs::File::open(&file).map_err(|e| Error::io(format!("opening {}", file.display()), e))?;
    let bad = |line: usize, msg: String| Error::Dataset {
        path: file.clone(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", file.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| bad(n, "expected a JSON object".into()))?;
        let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
        let want: BTreeSet<&str> = RECORD_KEYS.into_iter().collect();
        if keys != want {
            let missing: Vec<_> = want.difference(&keys).collect();
            let extra: Vec<_> = keys.difference(&want).collect();
            return Err(bad(n, format!("missing keys {missing:?}, unexpected keys {extra:?}")));
        }
        let rec: ImageRecord = serde_json::from_value(value).map_err(|e| bad(n, e.to_string()))?;
        rec.validate().map_err(|m| bad(n, m))?;
        records.push(rec);
    }
    Ok(Dataset { root, records })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Gradient,
    Noise,
    Clutter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distractor {
    Clouds,
    Fog,
    BrightPatches,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive plume count range for positive videos.
    pub plume_count: (usize, usize),
    pub opacity: (f64, f64),
    /// Gaussian sigma range of a plume's base puff, in pixels.
    pub sigma: (f64, f64),
    pub backgrounds: Vec<Background>,
    pub distractors: Vec<Distractor>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 128,
            plume_count: (1, 2),
            opacity: (0.35, 0.75),
            sigma: (2.5, 5.0),
            backgrounds: vec![Background::Gradient, Background::Noise, Background::Clutter],
            distractors: vec![Distractor::Clouds, Distractor::Fog, Distractor::BrightPatches],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is below 16 pixels", self.image_size)));
        }
        let (lo, hi) = self.opacity;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("plume opacity range ({lo}, {hi}) must lie in [0, 1)")));
        }
        if !(self.sigma.0 > 0.0 && self.sigma.0 <= self.sigma.1) {
            return Err(Error::Config("plume sigma range must be positive and ordered".into()));
        }
        if self.plume_count.0 == 0 || self.plume_count.0 > self.plume_count.1 {
            return Err(Error::Config("plume count range must be ordered and at least 1".into()));
        }
        Ok(())
    }
}

/// One anisotropic Gaussian puff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Puff {
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
}

/// A smoke plume: a chain of puffs drifting upward with widening spread.
#[derive(Clone, Debug, PartialEq)]
pub struct Plume {
    pub puffs: Vec<Puff>,
    pub opacity: f64,
    /// Smoke grey level.
    pub shade: f64,
}

impl Plume {
    /// Composite alpha `opacity · (1 − Π(1 − g_k))` at a pixel centre.
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let mut clear = 1.0;
        for p in &self.puffs {
            let dx = (x - p.cx) / p.sx;
            let dy = (y - p.cy) / p.sy;
            clear *= 1.0 - (-0.5 * (dx * dx + dy * dy)).exp();
        }
        self.opacity * (1.0 - clear)
    }

    pub fn alpha_map(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                out.push(self.alpha_at(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        out
    }

    /// Tight pixel box of `alpha > 0.05`, or `None` when no pixel qualifies.
    pub fn bbox(&self, width: usize, height: usize) -> Option<BoxXyxy> {
        support_box(&self.alpha_map(width, height), width, height, ALPHA_BOX_THRESHOLD)
    }
}

fn support_box(alpha: &[f64], width: usize, height: usize, thresh: f64) -> Option<BoxXyxy> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if alpha[y * width + x] > thresh {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    (x1 != usize::MAX).then_some([x1 as f64, y1 as f64, x2 as f64, y2 as f64])
}

/// Smooth value noise on a coarse lattice.
struct ValueNoise {
    cells: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut Rng) -> Self {
        let values = (0..(cells + 1) * (cells + 1)).map(|_| rng.uniform()).collect();
        ValueNoise { cells, values }
    }

    /// `u, v ∈ [0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells as f64;
        let (fx, fy) = ((u * n).clamp(0.0, n - 1e-9), (v * n).clamp(0.0, n - 1e-9));
        let (ix, iy) = (fx as usize, fy as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(fx - ix as f64), s(fy - iy as f64));
        let g = |x: usize, y: usize| self.values[y * (self.cells + 1) + x];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Everything constant across the frames of one video.
struct VideoScene {
    horizon: f64,
    sky_top: [f64; 3],
    sky_bottom: [f64; 3],
    ground: [f64; 3],
    noise: Option<ValueNoise>,
    ridge: Option<(ValueNoise, f64)>,
    clutter: Vec<([f64; 4], [f64; 3])>,
    clouds: Vec<(Puff, f64, f64)>,
    fog: Option<(f64, f64, f64)>,
    patches: Vec<[f64; 4]>,
    plumes: Vec<PlumeSeed>,
}

#[derive(Clone, Copy)]
struct PlumeSeed {
    base_x: f64,
    base_y: f64,
    sigma: f64,
    wind: f64,
    opacity: f64,
    shade: f64,
    puffs: usize,
}

impl PlumeSeed {
    /// The plume `age` frames after the fire start; it grows and rises.
    fn at_age(&self, age: usize) -> Plume {
        let growth = 1.0 + 0.2 * age as f64;
        let rise = self.sigma * 1.6 * growth;
        let puffs = (0..self.puffs)
            .map(|k| {
                let k = k as f64;
                let spread = 1.0 + 0.45 * k;
                Puff {
                    cx: self.base_x + self.wind * k * rise * 0.5,
                    cy: self.base_y - k * rise,
                    sx: self.sigma * spread * 1.3,
                    sy: self.sigma * spread,
                }
            })
            .collect();
        Plume {
            puffs,
            opacity: self.opacity,
            shade: self.shade,
        }
    }
}

fn jitter(c: [f64; 3], amount: f64, rng: &mut Rng) -> [f64; 3] {
    c.map(|v| (v + rng.uniform_in(-amount, amount)).clamp(0.0, 1.0))
}

impl VideoScene {
    fn new(spec: &SceneSpec, positive: bool, rng: &mut Rng) -> Self {
        let s = spec.image_size as f64;
        let has_bg = |b| spec.backgrounds.contains(&b);
        let has_d = |d| spec.distractors.contains(&d);
        let horizon = rng.uniform_in(0.45, 0.65) * s;
        let sky_top = jitter([0.35, 0.5, 0.8], 0.08, rng);
        let sky_bottom = jitter([0.7, 0.78, 0.88], 0.06, rng);
        let ground = jitter([0.32, 0.34, 0.22], 0.06, rng);
        let noise = has_bg(Background::Noise).then(|| ValueNoise::new(6, rng));
        let ridge = has_bg(Background::Clutter).then(|| (ValueNoise::new(5, rng), rng.uniform_in(0.05, 0.15) * s));
        let mut clutter = Vec::new();
        if has_bg(Background::Clutter) {
            for _ in 0..rng.below(5) {
                let w = rng.uniform_in(0.03, 0.1) * s;
                let h = rng.uniform_in(0.03, 0.12) * s;
                let x = rng.uniform_in(0.0, s - w);
                let y = rng.uniform_in(horizon, s - h);
                clutter.push(([x, y, x + w, y + h], jitter([0.2, 0.22, 0.15], 0.05, rng)));
            }
        }
        let mut clouds = Vec::new();
        if has_d(Distractor::Clouds) {
            for _ in 0..rng.below(4) {
                let sy = rng.uniform_in(0.03, 0.07) * s;
                let puff = Puff {
                    cx: rng.uniform_in(0.0, s),
                    cy: rng.uniform_in(0.08 * s, horizon - 0.1 * s),
                    sx: sy * rng.uniform_in(2.0, 4.0),
                    sy,
                };
                clouds.push((puff, rng.uniform_in(0.4, 0.8), rng.uniform_in(-1.0, 1.0)));
            }
        }
        let fog =
            (has_d(Distractor::Fog) && rng.bernoulli(0.3)).then(|| (horizon, rng.uniform_in(0.08, 0.2) * s, rng.uniform_in(0.15, 0.35)));
        let mut patches = Vec::new();
        if has_d(Distractor::BrightPatches) {
            for _ in 0..rng.below(3) {
                let w = rng.uniform_in(0.02, 0.06) * s;
                let x = rng.uniform_in(0.0, s - w);
                let y = rng.uniform_in(horizon, s - w);
                patches.push([x, y, x + w, y + w * rng.uniform_in(0.5, 1.5)]);
            }
        }
        let mut plumes = Vec::new();
        if positive {
            let (lo, hi) = spec.plume_count;
            for _ in 0..lo + rng.below(hi - lo + 1) {
                plumes.push(PlumeSeed {
                    base_x: rng.uniform_in(0.15, 0.85) * s,
                    base_y: (horizon + rng.uniform_in(0.0, 0.2) * s).min(s - 4.0),
                    sigma: rng.uniform_in(spec.sigma.0, spec.sigma.1) * s / 128.0,
                    wind: rng.uniform_in(-0.6, 0.6),
                    opacity: rng.uniform_in(spec.opacity.0, spec.opacity.1),
                    shade: rng.uniform_in(0.72, 0.9),
                    puffs: 3 + rng.below(3),
                });
            }
        }
        VideoScene {
            horizon,
            sky_top,
            sky_bottom,
            ground,
            noise,
            ridge,
            clutter,
            clouds,
            fog,
            patches,
            plumes,
        }
    }

    /// Renders frame `t`; `age` is frames since the fire start, if burning.
    fn render(&self, size: usize, t: usize, age: Option<usize>) -> (Vec<f64>, Vec<BoxXyxy>) {
        let s = size as f64;
        let mut px = vec![0.0f64; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let ridge_y = match &self.ridge {
                    Some((n, amp)) => self.horizon - amp * n.at(fx / s, 0.5),
                    None => self.horizon,
                };
                let mut c = if fy < ridge_y {
                    let k = (fy / ridge_y).clamp(0.0, 1.0);
                    [0, 1, 2].map(|i| self.sky_top[i] * (1.0 - k) + self.sky_bottom[i] * k)
                } else if fy < self.horizon {
                    [0.36, 0.4, 0.42]
                } else {
                    self.ground
                };
                if let Some(n) = &self.noise {
                    let amp = if fy < self.horizon { 0.03 } else { 0.08 };
                    let v = (n.at(fx / s, fy / s) - 0.5) * amp;
                    c = c.map(|ch| ch + v);
                }
                for (r, col) in &self.clutter {
                    if fx >= r[0] && fx < r[2] && fy >= r[1] && fy < r[3] {
                        c = *col;
                    }
                }
                for (p, a, drift) in &self.clouds {
                    let dx = (fx - p.cx - drift * t as f64) / p.sx;
                    let dy = (fy - p.cy) / p.sy;
                    let alpha = a * (-0.5 * (dx * dx + dy * dy)).exp();
                    c = c.map(|ch| ch * (1.0 - alpha) + 0.96 * alpha);
                }
                if let Some((centre, width, a)) = self.fog {
                    let d = (fy - centre) / width;
                    let alpha = a * (-0.5 * d * d).exp();
                    c = c.map(|ch| ch * (1.0 - alpha) + 0.8 * alpha);
                }
                for r in &self.patches {
                    if fx >= r[0] && fx < r[2] && fy >= r[1] && fy < r[3] {
                        c = [0.98, 0.97, 0.9];
                    }
                }
                px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&c);
            }
        }
        let mut boxes = Vec::new();
        if let Some(age) = age {
            for seed in &self.plumes {
                let plume = seed.at_age(age);
                let alpha = plume.alpha_map(size, size);
                for (i, &a) in alpha.iter().enumerate() {
                    for ch in 0..3 {
                        let v = &mut px[i * 3 + ch];
                        *v = *v * (1.0 - a) + plume.shade * a;
                    }
                }
                if let Some(b) = support_box(&alpha, size, size, ALPHA_BOX_THRESHOLD) {
                    boxes.push(b);
                }
            }
        }
        (px, boxes)
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedDataset {
    pub annotations: PathBuf,
    pub records: usize,
    pub positives: usize,
    /// SHA-256 over the annotation file and every image, in record order.
    pub digest: String,
}

/// Splits `positives` frames over videos of the given lengths as positive
/// suffixes. Returns each video's fire-start frame, or `None` for negative
/// videos.
fn plan_fire_starts(lengths: &[usize], positives: usize, rng: &mut Rng) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    rng.shuffle(&mut order);
    let mut starts = vec![None; lengths.len()];
    let mut left = positives;
    for &v in &order {
        if left == 0 {
            break;
        }
        let drawn = rng.below(MAX_FIRE_START + 1).min(lengths[v].saturating_sub(1));
        let k = (lengths[v] - drawn).min(left);
        starts[v] = Some(lengths[v] - k);
        left -= k;
    }
    // absorb any remainder by moving fire starts earlier
    for &v in &order {
        if left == 0 {
            break;
        }
        let current = starts[v].unwrap_or(lengths[v]);
        let extra = current.min(left);
        starts[v] = Some(current - extra);
        left -= extra;
    }
    starts
}

fn ppm_bytes(pixels: &[f64], size: usize) -> Result<Vec<u8>> {
    let raw: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&raw, size as u32, size as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: PathBuf::new(),
            msg: e.to_string(),
        })?;
    Ok(out)
}

/// Renders `n` frames (videos of ten) with exactly `round(n · fraction)`
/// positive frames, writing `images/*.ppm` and `annotations.jsonl` under
/// `out_dir`.
pub fn generate_synthetic_dataset(spec: &SceneSpec, n: usize, positive_fraction: f64, out_dir: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("at least one image is required".into()));
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::Config(format!("positive fraction {positive_fraction} is outside [0, 1]")));
    }
    let positives = (n as f64 * positive_fraction).round() as usize;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(format!("creating {}", images_dir.display()), e))?;

    let lengths: Vec<usize> = (0..n.div_ceil(FRAMES_PER_VIDEO))
        .map(|v| FRAMES_PER_VIDEO.min(n - v * FRAMES_PER_VIDEO))
        .collect();
    let root = Rng::new(spec.seed, 0);
    let starts = plan_fire_starts(&lengths, positives, &mut root.child(0));
    let mut hasher = Sha256::new();
    let mut lines = String::new();
    let mut image_hashes = Vec::with_capacity(n);
    let size = spec.image_size;
    let mut index = 0;
    for (v, (&len, &start)) in lengths.iter().zip(&starts).enumerate() {
        let scene = VideoScene::new(spec, start.is_some(), &mut root.child(1 + v as u64));
        let video_id = format!("v{v:04}");
        for t in 0..len {
            let age = start.and_then(|s| t.checked_sub(s));
            let (pixels, boxes) = scene.render(size, t, age);
            if age.is_some() && boxes.is_empty() {
                return Err(Error::Config(
                    "a positive frame rendered no visible plume; raise the opacity range".into(),
                ));
            }
            let rel = PathBuf::from(format!("images/{index:05}.ppm"));
            let bytes = ppm_bytes(&pixels, size)?;
            let path = out_dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            image_hashes.push(Sha256::digest(&bytes));
            let rec = ImageRecord {
                image_path: rel,
                width: size,
                height: size,
                is_positive: !boxes.is_empty(),
                boxes,
                video_id: video_id.clone(),
                frame_index: t,
                fire_start_index: start,
            };
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
            index += 1;
        }
    }
    let annotations = out_dir.join(ANNOTATIONS_FILE);
    fs::write(&annotations, &lines).map_err(|e| Error::io(format!("writing {}", annotations.display()), e))?;
    hasher.update(lines.as_bytes());
    for h in image_hashes {
        hasher.update(h);
    }
    Ok(GeneratedDataset {
        annotations,
        records: n,
        positives,
        digest: hex::encode(hasher.finalize()),
    })
}

/// Geometry of an aspect-preserving resize onto a square canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub new_width: usize,
    pub new_height: usize,
    pub pad_x: usize,
    pub pad_y: usize,
    pub size: usize,
}

impl Letterbox {
    pub fn new(width: usize, height: usize, size: usize) -> Self {
        let scale = (size as f64 / width as f64).min(size as f64 / height as f64);
        let new_width = ((width as f64 * scale).round() as usize).clamp(1, size);
        let new_height = ((height as f64 * scale).round() as usize).clamp(1, size);
        Letterbox {
            scale,
            new_width,
            new_height,
            pad_x: (size - new_width) / 2,
            pad_y: (size - new_height) / 2,
            size,
        }
    }

    pub fn forward(&self, b: &BoxXyxy) -> BoxXyxy {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        [
            b[0] * self.scale + px,
            b[1] * self.scale + py,
            b[2] * self.scale + px,
            b[3] * self.scale + py,
        ]
    }

    pub fn inverse(&self, b: &BoxXyxy) -> BoxXyxy {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        [
            (b[0] - px) / self.scale,
            (b[1] - py) / self.scale,
            (b[2] - px) / self.scale,
            (b[3] - py) / self.scale,
        ]
    }

    /// Resizes (bilinear) and pads an image onto the `size × size` canvas,
    /// returning HWC values in `[0, 1]`.
    pub fn apply(&self, img: &RgbImage) -> Vec<f32> {
        let src: Rgb32FImage = image::DynamicImage::ImageRgb8(img.clone()).into_rgb32f();
        let resized = if (self.new_width, self.new_height) == (img.width() as usize, img.height() as usize) {
            src
        } else {
            image::imageops::resize(&src, self.new_width as u32, self.new_height as u32, FilterType::Triangle)
        };
        let n = self.size;
        let mut out = vec![PAD_VALUE; n * n * 3];
        for (x, y, p) in resized.enumerate_pixels() {
            let o = ((y as usize + self.pad_y) * n + x as usize + self.pad_x) * 3;
            out[o..o + 3].copy_from_slice(&p.0);
        }
        out
    }
}

/// Horizontal mirror of a box on a canvas of the given width.
pub fn flip_box(b: &BoxXyxy, width: f64) -> BoxXyxy {
    [width - b[2], b[1], width - b[0], b[3]]
}

fn flip_pixels(px: &mut [f32], size: usize, channels: usize) {
    for row in px.chunks_mut(size * channels) {
        for x in 0..size / 2 {
            for c in 0..channels {
                row.swap(x * channels + c, (size - 1 - x) * channels + c);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOptions {
    pub input_size: usize,
    pub flip: bool,
    pub temporal_mode: TemporalMode,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            input_size: 640,
            flip: false,
            temporal_mode: TemporalMode::Single,
        }
    }
}

/// Network-ready batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, S, S, C]` with `C = 3` or `6`.
    pub images: Tensor<T>,
    pub gts: Vec<Vec<GtBox>>,
    pub positive: Vec<bool>,
    pub indices: Vec<usize>,
    pub letterboxes: Vec<Letterbox>,
}

/// Letterboxed frames, decoded once and reused across batches.
pub struct FrameCache<'a> {
    pub dataset: &'a Dataset,
    pub input_size: usize,
    frames: Vec<Option<(Vec<f32>, Letterbox)>>,
    by_frame: BTreeMap<(&'a str, usize), usize>,
}

impl<'a> FrameCache<'a> {
    pub fn new(dataset: &'a Dataset, input_size: usize) -> Self {
        let by_frame = dataset
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.video_id.as_str(), r.frame_index), i))
            .collect();
        FrameCache {
            dataset,
            input_size,
            frames: vec![None; dataset.len()],
            by_frame,
        }
    }

    fn frame(&mut self, i: usize) -> Result<&(Vec<f32>, Letterbox)> {
        if self.frames[i].is_none() {
            let r = &self.dataset.records[i];
            let lb = Letterbox::new(r.width, r.height, self.input_size);
            let img = self.dataset.load_image(i)?;
            self.frames[i] = Some((lb.apply(&img), lb));
        }
        Ok(self.frames[i].as_ref().expect("filled above"))
    }

    /// Record index of frame `max(t − 2, 0)` of the same video.
    pub fn previous(&self, i: usize) -> Result<usize> {
        let r = &self.dataset.records[i];
        let want = r.frame_index.saturating_sub(2);
        self.by_frame.get(&(r.video_id.as_str(), want)).copied().ok_or_else(|| {
            Error::invalid(
                "make_batch",
                format!("video `{}` has no frame {want} for temporal stacking", r.video_id),
            )
        })
    }

    /// Letterboxes the records at `indices`, optionally flipping each with
    /// probability ½, and stacks the frame two steps back in `concat2` mode.
    pub fn make_batch<T: Scalar>(&mut self, indices: &[usize], opts: &BatchOptions, rng: &mut Rng) -> Result<Batch<T>> {
        if indices.is_empty() {
            return Err(Error::invalid("make_batch", "batch size must be at least 1"));
        }
        if opts.input_size != self.input_size {
            return Err(Error::invalid("make_batch", "input size differs from the cache"));
        }
        let s = self.input_size;
        let ch = opts.temporal_mode.channels();
        let mut data = Vec::with_capacity(indices.len() * s * s * ch);
        let mut gts = Vec::with_capacity(indices.len());
        let mut positive = Vec::with_capacity(indices.len());
        let mut letterboxes = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.dataset.len() {
                return Err(Error::invalid("make_batch", format!("record {i} out of range")));
            }
            let flip = opts.flip && rng.bernoulli(0.5);
            let (cur, lb) = self.frame(i)?.clone();
            let mut px = match opts.temporal_mode {
                TemporalMode::Single => cur,
                TemporalMode::Concat2 => {
                    let j = self.previous(i)?;
                    let prev = &self.frame(j)?.0;
                    cur.chunks(3)
                        .zip(prev.chunks(3))
                        .flat_map(|(a, b)| a.iter().chain(b).copied())
                        .collect()
                }
            };
            if flip {
                flip_pixels(&mut px, s, ch);
            }
            data.extend(px.into_iter().map(|v| T::from_f64c(v as f64)));
            let boxes: Vec<GtBox> = self.dataset.records[i]
                .boxes
                .iter()
                .map(|b| {
                    let b = lb.forward(b);
                    GtBox::new(if flip { flip_box(&b, s as f64) } else { b })
                })
                .collect();
            positive.push(!boxes.is_empty());
            gts.push(boxes);
            letterboxes.push(lb);
        }
        Ok(Batch {
            images: Tensor::new(&[indices.len(), s, s, ch], data)?,
            gts,
            positive,
            indices: indices.to_vec(),
            letterboxes,
        })
    }
}
