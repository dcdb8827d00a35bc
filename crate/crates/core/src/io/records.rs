//! Tab-separated detection records, one per line:
//! `image_id  instance_id  score  x_min  y_min  x_max  y_max  mask_record_name`.
//! A missing instance id or mask name is written as `-`. Blank lines and
//! lines starting with `#` are skipped.

use std::fmt::Write as _;

use super::container::TensorContainer;
use crate::error::{NidsError, Result};
use crate::eval::iou::{BBox, Mask};
use crate::eval::{GroundTruthObject, GroundTruthSet};
use crate::matcher::LabeledProposal;

const FIELDS: usize = 8;
const NONE: &str = "-";

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: u32,
    pub instance_id: Option<u32>,
    pub score: f64,
    pub bbox: BBox,
    pub mask_name: Option<String>,
}

pub fn format_records(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let id = r.instance_id.map_or(NONE.to_string(), |i| i.to_string());
        let b = r.bbox;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.image_id,
            id,
            r.score,
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max,
            r.mask_name.as_deref().unwrap_or(NONE)
        );
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: String| NidsError::Parse { line: line_no, msg };
        let f: Vec<&str> = trimmed.split('\t').collect();
        if f.len() != FIELDS {
            return Err(err(format!("expected {FIELDS} tab-separated fields, got {}", f.len())));
        }
        let image_id = f[0].parse().map_err(|_| err(format!("bad image_id {:?}", f[0])))?;
        let instance_id = match f[1] {
            NONE => None,
            s => Some(s.parse().map_err(|_| err(format!("bad instance_id {s:?}")))?),
        };
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("bad {what} {s:?}")))
        };
        let score = num(f[2], "score")?;
        let bbox = BBox::new(num(f[3], "x_min")?, num(f[4], "y_min")?, num(f[5], "x_max")?, num(f[6], "y_max")?)
            .map_err(|e| err(e.to_string()))?;
        let mask_name = match f[7] {
            NONE => None,
            s => Some(s.to_string()),
        };
        out.push(DetectionRecord { image_id, instance_id, score, bbox, mask_name });
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<std::path::Path>) -> Result<Vec<DetectionRecord>> {
    parse_records(&std::fs::read_to_string(path)?)
}

pub fn write_records(path: impl AsRef<std::path::Path>, records: &[DetectionRecord]) -> Result<()> {
    std::fs::write(path, format_records(records))?;
    Ok(())
}

/// Loads a `u8 [H, W]` mask record.
pub fn mask_from_container(masks: &TensorContainer, name: &str) -> Result<Mask> {
    let t = masks.require(name)?;
    let (Some(bytes), [h, w]) = (t.as_u8(), t.dims()) else {
        return Err(NidsError::InvalidShape(format!("mask record {name:?} must be u8 [H, W]")));
    };
    Mask::from_bytes(*w, *h, bytes)
}

fn resolve_mask(r: &DetectionRecord, masks: Option<&TensorContainer>) -> Result<Option<Mask>> {
    match (masks, &r.mask_name) {
        (Some(c), Some(name)) => mask_from_container(c, name).map(Some),
        _ => Ok(None),
    }
}

/// Predictions, with masks pulled from `masks` when both are available.
pub fn to_predictions(records: &[DetectionRecord], masks: Option<&TensorContainer>) -> Result<Vec<LabeledProposal>> {
    records
        .iter()
        .map(|r| {
            Ok(LabeledProposal {
                image_id: r.image_id,
                bbox: r.bbox,
                mask: resolve_mask(r, masks)?,
                instance_id: r.instance_id,
                score: r.score,
            })
        })
        .collect()
}

pub fn to_ground_truth(records: &[DetectionRecord], masks: Option<&TensorContainer>) -> Result<GroundTruthSet> {
    let objects = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let instance_id = r.instance_id.ok_or_else(|| NidsError::Parse {
                line: i + 1,
                msg: "ground-truth record without instance id".into(),
            })?;
            Ok(GroundTruthObject { image_id: r.image_id, instance_id, bbox: r.bbox, mask: resolve_mask(r, masks)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruthSet { objects })
}
