//! Random SNSM batches and an independent statement of the mask invariants.

use smokedet::assign::{assign_positives, Assignment, CellLayout, GtBox};
use smokedet::sampling::{MaskSet, SamplingConfig};
use smokedet::Rng;

/// Up to six 128×128 images, half without ground truth, with coarse scores
/// so ties are common.
pub fn random_batch(rng: &mut Rng) -> (Assignment, Vec<f64>) {
    let layout = CellLayout::for_input(128, 128, &[8, 16, 32]);
    let batch = 1 + rng.below(6);
    let gts: Vec<Vec<GtBox>> = (0..batch)
        .map(|_| {
            if rng.bernoulli(0.5) {
                return Vec::new();
            }
            (0..1 + rng.below(3))
                .map(|_| {
                    let (cx, cy) = (rng.uniform_in(1.0, 127.0), rng.uniform_in(1.0, 127.0));
                    let half = rng.uniform_in(0.5, 20.0);
                    GtBox::new([cx - half, cy - half, cx + half, cy + half])
                })
                .collect()
        })
        .collect();
    let a = assign_positives(&gts, &layout, 128, 128).unwrap();
    let scores = (0..batch * layout.cells_per_image())
        .map(|_| (rng.uniform_in(-4.0, 4.0) * 4.0).round())
        .collect();
    (a, scores)
}

pub fn image_flags(a: &Assignment) -> Vec<bool> {
    a.positives_per_image().iter().map(|&p| p > 0).collect()
}

/// Checks an SNSM mask set cell by cell: disjointness, image separation,
/// per-image and per-batch cardinalities, and that `neg2` equals the top-K
/// of a full sort of the negative-image pool (score descending, index
/// ascending).
pub fn check_snsm(a: &Assignment, scores: &[f64], cfg: &SamplingConfig, m: &MaskSet) -> Result<(), String> {
    let cells = a.layout.cells_per_image();
    let n = a.batch * cells;
    let pos = a.positive_mask();
    if m.pos != pos {
        return Err("positive mask differs from the assignment".into());
    }
    let per = a.positives_per_image();
    for c in 0..n {
        let img = c / cells;
        let hits = [m.pos[c], m.neg1[c], m.neg2[c]].iter().filter(|&&v| v).count();
        if hits > 1 {
            return Err(format!("cell {c} is in {hits} sets"));
        }
        if m.neg1[c] && per[img] == 0 {
            return Err(format!("neg1 cell {c} on negative image {img}"));
        }
        if m.neg2[c] && per[img] > 0 {
            return Err(format!("neg2 cell {c} on positive image {img}"));
        }
    }
    for (i, &p) in per.iter().enumerate() {
        let n1 = (i * cells..(i + 1) * cells).filter(|&c| m.neg1[c]).count();
        let want = if p > 0 {
            ((cfg.alpha1 * p as f64).floor() as usize).min(cells - p)
        } else {
            0
        };
        if n1 != want {
            return Err(format!("image {i}: {n1} neg1 cells, expected {want}"));
        }
    }
    let p_batch: usize = per.iter().sum();
    let negative_images = per.iter().filter(|&&p| p == 0).count();
    let mut pool: Vec<usize> = (0..n).filter(|&c| per[c / cells] == 0).collect();
    let k = if p_batch == 0 {
        cfg.floor * negative_images
    } else {
        (cfg.alpha2 * p_batch as f64).floor() as usize
    };
    pool.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).unwrap().then(x.cmp(&y)));
    let mut want = vec![false; n];
    for &c in pool.iter().take(k) {
        want[c] = true;
    }
    if m.neg2 != want {
        return Err(format!("neg2 is not the top-{k} of the negative-image pool"));
    }
    Ok(())
}

/// Checks an OHEM mask set: the sampled negatives (`neg1 ∪ neg2`) equal the
/// top-K of a full sort over every negative cell of the batch.
pub fn check_ohem(a: &Assignment, scores: &[f64], cfg: &SamplingConfig, m: &MaskSet) -> Result<(), String> {
    let cells = a.layout.cells_per_image();
    let n = a.batch * cells;
    let pos = a.positive_mask();
    let p_batch = pos.iter().filter(|&&p| p).count();
    let k = if p_batch == 0 {
        cfg.floor * a.batch
    } else {
        (cfg.baseline_ratio * p_batch as f64).floor() as usize
    };
    let mut pool: Vec<usize> = (0..n).filter(|&c| !pos[c]).collect();
    pool.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).unwrap().then(x.cmp(&y)));
    let mut want = vec![false; n];
    for &c in pool.iter().take(k) {
        want[c] = true;
    }
    for (c, &w) in want.iter().enumerate() {
        if m.neg1[c] && m.neg2[c] {
            return Err(format!("cell {c} in both negative sets"));
        }
        if (m.neg1[c] || m.neg2[c]) != w {
            return Err(format!("sampled negatives are not the top-{k} of the batch pool (cell {c})"));
        }
    }
    Ok(())
}
