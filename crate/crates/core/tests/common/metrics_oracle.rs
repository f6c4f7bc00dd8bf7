//! Reference computations for ranking and detection metrics.

use std::collections::BTreeMap;

use smokedet::boxes::{iou, BoxXyxy};
use smokedet::metrics::{Detection, EvalSet, ImageMeta};
use smokedet::Rng;

/// Direct double sum of the pairwise indicator 1 / ½ / 0.
pub fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

pub fn tied_scores(rng: &mut Rng, n: usize, levels: usize) -> Vec<f64> {
    (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect()
}

pub fn meta(video: &str, frame: usize, positive: bool, start: Option<usize>) -> ImageMeta {
    ImageMeta {
        video_id: video.into(),
        frame_index: frame,
        is_positive: positive,
        fire_start_index: start,
    }
}

pub fn det(image: &str, bbox: BoxXyxy, score: f64) -> Detection {
    Detection {
        image_id: image.into(),
        bbox,
        score,
    }
}

/// Selection-based re-implementation: repeatedly take the best remaining
/// detection under the given ordering key, scan all its image's boxes.
pub fn oracle_ap(dets: &[Detection], gt: &BTreeMap<String, Vec<BoxXyxy>>, order: &[usize], thresh: f64) -> f64 {
    let num_gt: usize = gt.values().map(Vec::len).sum();
    if num_gt == 0 {
        return 0.0;
    }
    let mut used: BTreeMap<String, Vec<bool>> = gt.iter().map(|(k, v)| (k.clone(), vec![false; v.len()])).collect();
    let (mut tp, mut seen, mut ap) = (0.0, 0.0, 0.0);
    for &i in order {
        let d = &dets[i];
        seen += 1.0;
        let mut best = None;
        if let Some(boxes) = gt.get(&d.image_id) {
            for (j, g) in boxes.iter().enumerate() {
                let v = iou(&d.bbox, g);
                if !used[&d.image_id][j] && v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        if let Some((j, _)) = best {
            used.get_mut(&d.image_id).unwrap()[j] = true;
            tp += 1.0;
            ap += (tp / seen) * (1.0 / num_gt as f64);
        }
    }
    ap
}

pub fn canonical_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&dets[a], &dets[b]);
        y.score
            .partial_cmp(&x.score)
            .unwrap()
            .then(x.image_id.cmp(&y.image_id))
            .then(x.bbox.partial_cmp(&y.bbox).unwrap())
    });
    idx
}

/// All orderings that respect descending score (any order inside ties).
pub fn tie_orderings(dets: &[Detection]) -> Vec<Vec<usize>> {
    let base = canonical_order(dets);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in base {
        match groups.last_mut() {
            Some(g) if dets[g[0]].score == dets[i].score => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut out = vec![Vec::new()];
    for g in groups {
        let perms = permutations(&g);
        out = out
            .into_iter()
            .flat_map(|p| perms.iter().map(move |q| [p.clone(), q.clone()].concat()))
            .collect();
    }
    out
}

pub fn permutations(v: &[usize]) -> Vec<Vec<usize>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

pub fn random_instance(rng: &mut Rng, score_levels: usize) -> EvalSet {
    let mut set = EvalSet::default();
    let images = 1 + rng.below(5);
    let mut gts_left = 1 + rng.below(6);
    let rand_box = |rng: &mut Rng| {
        let x = rng.below(40) as f64;
        let y = rng.below(40) as f64;
        [x, y, x + 4.0 + rng.below(20) as f64, y + 4.0 + rng.below(20) as f64]
    };
    for i in 0..images {
        let id = format!("img{i}");
        let n = if i + 1 == images { gts_left } else { rng.below(gts_left + 1) };
        gts_left -= n;
        set.ground_truth.insert(id.clone(), (0..n).map(|_| rand_box(rng)).collect());
        set.meta.insert(id, meta("v", i, n > 0, Some(0)));
    }
    for _ in 0..rng.below(11) {
        let id = format!("img{}", rng.below(images));
        // half the detections jitter a ground truth box, half are random
        let b = match set.ground_truth[&id].first() {
            Some(g) if rng.bernoulli(0.5) => [g[0] + rng.below(5) as f64, g[1], g[2], g[3] + rng.below(5) as f64],
            _ => rand_box(rng),
        };
        set.detections
            .push(det(&id, b, rng.below(score_levels) as f64 / score_levels as f64));
    }
    set
}

/// AP under the canonical order plus its range over every tie ordering.
pub fn ap_oracle(set: &EvalSet, thresh: f64) -> (f64, f64, f64) {
    let canon = oracle_ap(&set.detections, &set.ground_truth, &canonical_order(&set.detections), thresh);
    let all: Vec<f64> = tie_orderings(&set.detections)
        .iter()
        .map(|o| oracle_ap(&set.detections, &set.ground_truth, o, thresh))
        .collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (canon, lo, hi)
}
