//! Negative-location sampling for the confidence loss.

use crate::assign::Assignment;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Every negative cell contributes.
    None,
    /// Uniform sample over all negative cells of the batch.
    Random,
    /// Highest-scoring negative cells of the batch.
    Ohem,
    /// Random negatives on positive images, hardest negatives on negative
    /// images, chosen separately.
    #[default]
    Snsm,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 4] = [SamplingMode::None, SamplingMode::Random, SamplingMode::Ohem, SamplingMode::Snsm];

    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::None => "none",
            SamplingMode::Random => "random",
            SamplingMode::Ohem => "ohem",
            SamplingMode::Snsm => "snsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampling mode `{s}` (expected none, random, ohem or snsm)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    /// Random negatives per positive cell, on each positive image.
    pub alpha1: f64,
    /// Hard negatives per positive cell of the batch, across negative images.
    pub alpha2: f64,
    /// Negatives per image when the batch has no positive cell.
    pub floor: usize,
    /// Negatives per positive cell for the random and OHEM baselines.
    pub baseline_ratio: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mode: SamplingMode::Snsm,
            alpha1: 10.0,
            alpha2: 190.0,
            floor: 16,
            baseline_ratio: 200.0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("baseline_ratio", self.baseline_ratio),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Location masks over a batch, each `[batch · cells]` in the flat layout.
/// In baseline modes the sampled negatives are reported in `neg1` when they
/// lie on a positive image and in `neg2` otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub batch: usize,
    pub cells: usize,
    pub pos: Vec<bool>,
    pub neg1: Vec<bool>,
    pub neg2: Vec<bool>,
    pub positive_images: Vec<bool>,
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&v| v).count()
}

impl MaskSet {
    /// All non-positive cells.
    pub fn init_neg(&self) -> Vec<bool> {
        self.pos.iter().map(|p| !p).collect()
    }

    /// Cells contributing to the confidence loss.
    pub fn conf_mask(&self) -> Vec<bool> {
        self.pos
            .iter()
            .zip(&self.neg1)
            .zip(&self.neg2)
            .map(|((a, b), c)| *a || *b || *c)
            .collect()
    }

    pub fn b_p(&self) -> usize {
        count(&self.positive_images)
    }

    pub fn b_n(&self) -> usize {
        self.batch - self.b_p()
    }

    pub fn num_pos(&self) -> usize {
        count(&self.pos)
    }

    pub fn num_neg1(&self) -> usize {
        count(&self.neg1)
    }

    pub fn num_neg2(&self) -> usize {
        count(&self.neg2)
    }

    /// Sampled negatives of one image.
    pub fn negatives_on(&self, image: usize) -> usize {
        let r = image * self.cells..(image + 1) * self.cells;
        count(&self.neg1[r.clone()]) + count(&self.neg2[r])
    }

    /// Checks the structural invariants: sampled negatives never overlap
    /// positives, `neg1` lives on positive images and `neg2` on negative ones.
    pub fn check(&self) -> Result<()> {
        let n = self.batch * self.cells;
        if [self.pos.len(), self.neg1.len(), self.neg2.len()].iter().any(|&l| l != n) || self.positive_images.len() != self.batch {
            return Err(Error::Mask("mask lengths disagree with batch layout".into()));
        }
        for i in 0..n {
            let img = i / self.cells.max(1);
            if self.pos[i] && (self.neg1[i] || self.neg2[i]) {
                return Err(Error::Mask(format!("cell {i} is both positive and a sampled negative")));
            }
            if self.neg1[i] && !self.positive_images[img] {
                return Err(Error::Mask(format!("neg1 cell {i} lies on negative image {img}")));
            }
            if self.neg2[i] && self.positive_images[img] {
                return Err(Error::Mask(format!("neg2 cell {i} lies on positive image {img}")));
            }
            if self.pos[i] && !self.positive_images[img] {
                return Err(Error::Mask(format!("positive cell {i} lies on negative image {img}")));
            }
        }
        Ok(())
    }
}

fn scaled(alpha: f64, p: usize) -> usize {
    (alpha * p as f64).floor() as usize
}

/// Top-`k` of `pool` by descending score, ties by ascending flat index.
/// Signed zeros compare equal.
fn top_k(pool: &mut [usize], scores: &[f64], k: usize) -> Vec<usize> {
    let key = |c: usize| scores[c] + 0.0;
    pool.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    pool[..k.min(pool.len())].to_vec()
}

/// Builds the masks of `cfg.mode`. `scores` holds the confidence logit of
/// every cell in the flat layout; `positive_images` flags images carrying
/// ground truth.
pub fn build_masks(assign: &Assignment, positive_images: &[bool], scores: &[f64], cfg: &SamplingConfig, rng: &mut Rng) -> Result<MaskSet> {
    cfg.validate()?;
    let batch = assign.batch;
    let cells = assign.layout.cells_per_image();
    if positive_images.len() != batch {
        return Err(Error::Mask(format!(
            "{} positivity flags for a batch of {batch}",
            positive_images.len()
        )));
    }
    if scores.len() != batch * cells {
        return Err(Error::Mask(format!("{} scores for {} cells", scores.len(), batch * cells)));
    }
    let per_image = assign.positives_per_image();
    for (i, (&flag, &p)) in positive_images.iter().zip(&per_image).enumerate() {
        if flag != (p > 0) {
            return Err(Error::Mask(format!("image {i} flagged positive={flag} but has {p} positive cells")));
        }
    }
    let pos = assign.positive_mask();
    let mut set = MaskSet {
        batch,
        cells,
        neg1: vec![false; pos.len()],
        neg2: vec![false; pos.len()],
        pos,
        positive_images: positive_images.to_vec(),
    };
    let p_batch: usize = per_image.iter().sum();
    let negatives = |images: &mut dyn Iterator<Item = usize>, pos: &[bool]| -> Vec<usize> {
        images
            .flat_map(|i| (i * cells..(i + 1) * cells).filter(|&c| !pos[c]).collect::<Vec<_>>())
            .collect()
    };

    match cfg.mode {
        SamplingMode::None => {
            let all = negatives(&mut (0..batch), &set.pos);
            mark_split(&mut set, &all);
        }
        SamplingMode::Snsm => {
            for (i, &p) in per_image.iter().enumerate() {
                if p == 0 {
                    continue;
                }
                let pool = negatives(&mut std::iter::once(i), &set.pos);
                let k = scaled(cfg.alpha1, p).min(pool.len());
                for c in rng.sample_without_replacement(&pool, k) {
                    set.neg1[c] = true;
                }
            }
            let mut pool = negatives(&mut (0..batch).filter(|&i| !positive_images[i]), &set.pos);
            let k = if p_batch == 0 {
                cfg.floor * (batch - count(positive_images))
            } else {
                scaled(cfg.alpha2, p_batch)
            };
            for c in top_k(&mut pool, scores, k) {
                set.neg2[c] = true;
            }
        }
        SamplingMode::Random => {
            let pool = negatives(&mut (0..batch), &set.pos);
            let k = baseline_count(cfg, p_batch, batch).min(pool.len());
            let picked = rng.sample_without_replacement(&pool, k);
            mark_split(&mut set, &picked);
        }
        SamplingMode::Ohem => {
            let mut pool = negatives(&mut (0..batch), &set.pos);
            let k = baseline_count(cfg, p_batch, batch);
            let picked = top_k(&mut pool, scores, k);
            mark_split(&mut set, &picked);
        }
    }
    Ok(set)
}

fn baseline_count(cfg: &SamplingConfig, p_batch: usize, batch: usize) -> usize {
    if p_batch == 0 {
        cfg.floor * batch
    } else {
        scaled(cfg.baseline_ratio, p_batch)
    }
}

fn mark_split(set: &mut MaskSet, cells: &[usize]) {
    for &c in cells {
        if set.positive_images[c / set.cells] {
            set.neg1[c] = true;
        } else {
            set.neg2[c] = true;
        }
    }
}
