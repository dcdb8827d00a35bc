//! Independent reference implementations used by the integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

use nids_core::eval::iou::BBox;
use nids_core::eval::{GroundTruthObject, GroundTruthSet};
use nids_core::matcher::{LabeledProposal, ScoreMatrix};
use rand::Rng;

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    inter / (area(a) + area(b) - inter)
}

/// Box AP by direct enumeration: per id and threshold, greedy matching in
/// score order, then precision at recall r is the best precision reached at
/// any rank with recall >= r.
pub fn brute_force_ap(preds: &[LabeledProposal], gt: &GroundTruthSet) -> f64 {
    let mut ids: Vec<u32> = gt.objects.iter().map(|o| o.instance_id).collect();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for t in 0..10 {
        let thr = (50 + 5 * t) as f64 / 100.0;
        let mut per_id = 0.0;
        for &id in &ids {
            let gts: Vec<&GroundTruthObject> = gt.objects.iter().filter(|o| o.instance_id == id).collect();
            let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].instance_id == Some(id)).collect();
            // insertion sort: descending score, earlier input first on ties
            for i in 1..order.len() {
                let mut j = i;
                while j > 0 && preds[order[j]].score > preds[order[j - 1]].score {
                    order.swap(j, j - 1);
                    j -= 1;
                }
            }
            let mut used = vec![false; gts.len()];
            let mut points: Vec<(f64, f64)> = Vec::new();
            let mut tp = 0;
            for (rank, &pi) in order.iter().enumerate() {
                let p = &preds[pi];
                let mut best: Option<usize> = None;
                let mut best_iou = -1.0;
                for (gi, g) in gts.iter().enumerate() {
                    if used[gi] || g.image_id != p.image_id {
                        continue;
                    }
                    let v = box_iou(&p.bbox, &g.bbox);
                    if v >= thr && v > best_iou {
                        best = Some(gi);
                        best_iou = v;
                    }
                }
                if let Some(gi) = best {
                    used[gi] = true;
                    tp += 1;
                }
                points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
            }
            let mut sum = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                sum += points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            per_id += sum / 101.0;
        }
        total += per_id / ids.len() as f64;
    }
    total / 10.0
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    // coarse integer grid so IoU values land exactly on thresholds now and then
    let x = rng.random_range(0..8) as f64;
    let y = rng.random_range(0..8) as f64;
    let w = rng.random_range(1..6) as f64;
    let h = rng.random_range(1..6) as f64;
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Random scene: up to `max_gt` ground truths and `max_pred` predictions over
/// two images and three ids; predictions often jitter a ground-truth box.
pub fn random_ap_scene<R: Rng>(rng: &mut R, max_pred: usize, max_gt: usize) -> (Vec<LabeledProposal>, GroundTruthSet) {
    let n_gt = rng.random_range(1..=max_gt);
    let objects: Vec<GroundTruthObject> = (0..n_gt)
        .map(|_| GroundTruthObject {
            image_id: rng.random_range(0..2),
            instance_id: rng.random_range(0..3),
            bbox: random_box(rng),
            mask: None,
        })
        .collect();
    let n_pred = rng.random_range(0..=max_pred);
    let preds = (0..n_pred)
        .map(|_| {
            let (image_id, instance_id, bbox) = if rng.random_bool(0.6) {
                let g = &objects[rng.random_range(0..objects.len())];
                let b = g.bbox;
                let dx = rng.random_range(-1..=1) as f64;
                let jittered = BBox::new(b.x_min + dx, b.y_min, b.x_max + dx.max(0.0), b.y_max).unwrap_or(b);
                (g.image_id, if rng.random_bool(0.85) { g.instance_id } else { rng.random_range(0..4) }, jittered)
            } else {
                (rng.random_range(0..2), rng.random_range(0..4), random_box(rng))
            };
            // few distinct scores so ties occur
            let score = rng.random_range(0..6) as f64 / 5.0;
            LabeledProposal { image_id, bbox, mask: None, instance_id: Some(instance_id), score }
        })
        .collect();
    (preds, GroundTruthSet { objects })
}

/// Strict preference of row `q`: higher score, then lower column.
fn row_prefers(s: &ScoreMatrix, q: usize, a: usize, b: usize) -> bool {
    let (x, y) = (s.get(q, a), s.get(q, b));
    x > y || (x == y && a < b)
}

/// Strict preference of column `n`: higher score, then lower row.
fn col_prefers(s: &ScoreMatrix, n: usize, a: usize, b: usize) -> bool {
    let (x, y) = (s.get(a, n), s.get(b, n));
    x > y || (x == y && a < b)
}

/// `m[q]` is the column matched to row q.
pub fn blocking_pair(s: &ScoreMatrix, m: &[Option<usize>]) -> Option<(usize, usize)> {
    let mut owner = vec![None; s.cols()];
    for (q, c) in m.iter().enumerate() {
        if let Some(n) = *c {
            owner[n] = Some(q);
        }
    }
    for q in 0..s.rows() {
        for n in 0..s.cols() {
            if m[q] == Some(n) {
                continue;
            }
            let row_wants = match m[q] {
                None => true,
                Some(cur) => row_prefers(s, q, n, cur),
            };
            let col_wants = match owner[n] {
                None => true,
                Some(cur) => col_prefers(s, n, q, cur),
            };
            if row_wants && col_wants {
                return Some((q, n));
            }
        }
    }
    None
}

/// Every stable matching, found by enumerating all maximum-size injective
/// matchings (smaller matchings always leave an unmatched pair blocking).
pub fn all_stable_matchings(s: &ScoreMatrix) -> Vec<Vec<Option<usize>>> {
    let (rows, cols) = (s.rows(), s.cols());
    let size = rows.min(cols);
    let mut out = Vec::new();
    let mut cur = vec![None; rows];
    let mut used = vec![false; cols];
    fn rec(
        q: usize,
        matched: usize,
        size: usize,
        s: &ScoreMatrix,
        cur: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        let rows = s.rows();
        if q == rows {
            if matched == size && blocking_pair(s, cur).is_none() {
                out.push(cur.clone());
            }
            return;
        }
        // leave row q unmatched only if enough rows remain
        if rows - q > size - matched {
            rec(q + 1, matched, size, s, cur, used, out);
        }
        if matched < size {
            for n in 0..s.cols() {
                if !used[n] {
                    used[n] = true;
                    cur[q] = Some(n);
                    rec(q + 1, matched + 1, size, s, cur, used, out);
                    cur[q] = None;
                    used[n] = false;
                }
            }
        }
    }
    rec(0, 0, size, s, &mut cur, &mut used, &mut out);
    out
}

/// Random score matrix; half the draws use a coarse value set to create ties.
pub fn random_scores<R: Rng>(rng: &mut R, max_side: usize) -> ScoreMatrix {
    let (q, n) = (rng.random_range(1..=max_side), rng.random_range(1..=max_side));
    let coarse = rng.random_bool(0.5);
    let rows = (0..q)
        .map(|_| {
            (0..n)
                .map(|_| if coarse { rng.random_range(0..4) as f64 / 4.0 } else { rng.random_range(-1.0..1.0) })
                .collect()
        })
        .collect();
    ScoreMatrix::from_rows(rows).unwrap()
}
