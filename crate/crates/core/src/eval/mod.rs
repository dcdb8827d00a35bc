//! COCO-style AP evaluation and the synthetic benchmark generator.

pub mod iou;
pub mod synth;

use std::collections::BTreeMap;

use crate::embedding::{cosine, TemplateSet};
use crate::error::{NidsError, Result};
use crate::matcher::{LabeledProposal, ScoreMatrix};
use crate::par;
use iou::{iou_box, iou_mask, BBox, Mask};

/// Number of recall sample points in the interpolated PR curve.
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    Box,
    Mask,
}

impl std::str::FromStr for IouMode {
    type Err = NidsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" | "bbox" => Ok(IouMode::Box),
            "mask" | "segm" => Ok(IouMode::Mask),
            other => Err(NidsError::InvalidConfig(format!("unknown IoU mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub image_id: u32,
    pub instance_id: u32,
    pub bbox: BBox,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruthSet {
    pub fn image_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.image_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.instance_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Interpolated precision at the 101 recall points for one IoU threshold,
/// averaged over instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// Mean over the ten IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<f64>,
    /// AP of every ground-truth id, averaged over thresholds.
    pub per_instance: BTreeMap<u32, f64>,
    pub curves: Vec<PrCurve>,
}

impl ApResult {
    fn empty() -> Self {
        let thresholds = iou_thresholds();
        Self {
            ap: 0.0,
            ap50: 0.0,
            ap75: 0.0,
            per_threshold: vec![0.0; thresholds.len()],
            per_instance: BTreeMap::new(),
            curves: thresholds
                .into_iter()
                .map(|t| PrCurve { iou_threshold: t, precision: vec![0.0; RECALL_POINTS] })
                .collect(),
        }
    }
}

/// Detections of one id in descending score order, with their IoU against
/// every same-image ground truth of that id.
struct IdCase {
    num_gt: usize,
    /// `(gt index, iou)` candidates per ranked prediction.
    ranked: Vec<Vec<(usize, f64)>>,
}

fn overlap(mode: IouMode, p: &LabeledProposal, g: &GroundTruthObject) -> Result<f64> {
    match mode {
        IouMode::Box => iou_box(&p.bbox, &g.bbox),
        IouMode::Mask => {
            let (Some(pm), Some(gm)) = (&p.mask, &g.mask) else {
                return Err(NidsError::MissingRecord("mask for mask-mode evaluation".into()));
            };
            match iou_mask(pm, gm) {
                Err(NidsError::EmptyUnion) => Ok(0.0),
                other => other,
            }
        }
    }
}

/// 101-point interpolated precision from a ranked TP/FP sequence.
fn interpolated_precision(is_tp: &[bool], num_gt: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

fn greedy_match(case: &IdCase, threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; case.num_gt];
    case.ranked
        .iter()
        .map(|cands| {
            let mut best: Option<(usize, f64)> = None;
            for &(g, iou) in cands {
                if taken[g] || iou < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision over IoU thresholds 0.50:0.05:0.95. Predictions without
/// an instance id are ignored; AP is averaged over ids that have ground truth.
pub fn compute_ap(predictions: &[LabeledProposal], gt: &GroundTruthSet, mode: IouMode) -> Result<ApResult> {
    let ids = gt.instance_ids();
    if ids.is_empty() {
        return Ok(ApResult::empty());
    }
    let cases = par::try_map_range(ids.len(), |i| {
        let id = ids[i];
        let gts: Vec<&GroundTruthObject> = gt.objects.iter().filter(|o| o.instance_id == id).collect();
        let mut preds: Vec<&LabeledProposal> = predictions.iter().filter(|p| p.instance_id == Some(id)).collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let ranked = preds
            .iter()
            .map(|p| {
                gts.iter()
                    .enumerate()
                    .filter(|(_, g)| g.image_id == p.image_id)
                    .map(|(gi, g)| overlap(mode, p, g).map(|v| (gi, v)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, NidsError>(IdCase { num_gt: gts.len(), ranked })
    })?;

    let thresholds = iou_thresholds();
    let nt = thresholds.len();
    let curves_flat = par::map_range(ids.len() * nt, |j| {
        let (case, thr) = (&cases[j / nt], thresholds[j % nt]);
        interpolated_precision(&greedy_match(case, thr), case.num_gt)
    });

    let mean = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        (v.iter().sum::<f64>() / v.len() as f64).clamp(lo, hi)
    };
    let mut curves = Vec::with_capacity(nt);
    let mut per_threshold = Vec::with_capacity(nt);
    for (t, &thr) in thresholds.iter().enumerate() {
        let mut precision = vec![0.0; RECALL_POINTS];
        for i in 0..ids.len() {
            for (acc, p) in precision.iter_mut().zip(&curves_flat[i * nt + t]) {
                *acc += p;
            }
        }
        precision.iter_mut().for_each(|p| *p /= ids.len() as f64);
        per_threshold.push(mean(&precision));
        curves.push(PrCurve { iou_threshold: thr, precision });
    }
    let per_instance = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let aps: Vec<f64> = (0..nt).map(|t| mean(&curves_flat[i * nt + t])).collect();
            (id, mean(&aps))
        })
        .collect();
    Ok(ApResult {
        ap: mean(&per_threshold),
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        per_threshold,
        per_instance,
        curves,
    })
}

/// Fraction of rows with a known instance whose argmax column equals it.
pub fn top1_accuracy(scores: &ScoreMatrix, truth: &[Option<usize>]) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (q, t) in truth.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = scores.row(q);
        let mut best = 0;
        for (n, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = n;
            }
        }
        hits += usize::from(best == t);
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Mean same-instance template cosine minus the largest cross-instance one.
pub fn separation_margin(set: &TemplateSet) -> Result<f64> {
    let (n, k) = (set.num_instances(), set.templates_per_instance());
    let (mut same, mut same_count) = (0.0, 0usize);
    let mut cross = f64::NEG_INFINITY;
    for a in 0..n * k {
        for b in a + 1..n * k {
            let c = cosine(set.embeddings()[a].as_slice(), set.embeddings()[b].as_slice())?;
            if a / k == b / k {
                same += c;
                same_count += 1;
            } else {
                cross = cross.max(c);
            }
        }
    }
    if same_count == 0 || cross == f64::NEG_INFINITY {
        return Err(NidsError::InvalidShape("separation needs N >= 2 and K >= 2".into()));
    }
    Ok(same / same_count as f64 - cross)
}
