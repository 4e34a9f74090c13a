//! Evaluation metrics: object count accuracy (OCA), single-class average
//! precision (AP) against the source layout, and the mean alignment score
//! (ALN) reported in their place of a learned quality metric.
//!
//! AP is standard single-class detection AP: detections pooled over all
//! records and sorted by confidence, greedily matched within their record
//! to the not-yet-claimed reference box of highest overlap at
//! `IoU >= threshold`, precision-recall curve over the cumulative counts,
//! all-point interpolation (area under the precision envelope). Matching is
//! class-blind: AP measures layout placement; class correctness is OCA's
//! job.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{HarmonyError, Result};
use crate::require;
use crate::scene::{EditKind, SceneSpec};
use crate::scorer::DetectionSet;

/// Outcome of one edit evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// `(scene id, instruction index)` pair.
    pub instruction_id: (usize, usize),
    pub kind: EditKind,
    pub detections: DetectionSet,
    /// The scene the edit should have produced; its boxes are the source
    /// layout the output must preserve.
    pub target: SceneSpec,
    /// Binary count match for this record.
    pub count_match: u8,
    /// Alignment score in `[0, 1]`.
    pub alignment: f64,
    /// Seed the final generation started from.
    pub seed: u64,
}

/// Mean of the per-record binary count matches, as a percentage.
pub fn oca(records: &[EvalRecord]) -> Result<f64> {
    require!(!records.is_empty(), "OCA of an empty record set");
    let hits: usize = records.iter().map(|r| r.count_match as usize).sum();
    Ok(hits as f64 / records.len() as f64 * 100.0)
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Average precision (percentage) of detections against reference layouts
/// at one IoU threshold.
pub fn ap(records: &[EvalRecord], iou_threshold: f64) -> Result<f64> {
    require!(!records.is_empty(), "AP of an empty record set");
    let total_refs: usize = records.iter().map(|r| r.target.boxes.len()).sum();
    if total_refs == 0 {
        return Err(HarmonyError::UndefinedMetric(String::from(
            "AP undefined: no reference boxes in any record",
        )));
    }
    // pool detections: (score, record idx, det idx), deterministic order
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        for (di, det) in rec.detections.detections.iter().enumerate() {
            pool.push((det.score, ri, di));
        }
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut claimed: Vec<Vec<bool>> = records
        .iter()
        .map(|r| vec![false; r.target.boxes.len()])
        .collect();
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(pool.len()); // (recall, precision)
    for (rank, &(_, ri, di)) in pool.iter().enumerate() {
        let det = &records[ri].detections.detections[di];
        let mut best = None;
        let mut best_iou = 0.0;
        for (bi, bx) in records[ri].target.boxes.iter().enumerate() {
            if claimed[ri][bi] {
                continue;
            }
            let v = iou(&det.bbox, bx);
            if v > best_iou {
                best_iou = v;
                best = Some(bi);
            }
        }
        if let Some(bi) = best {
            if best_iou >= iou_threshold {
                claimed[ri][bi] = true;
                tp += 1;
            }
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / total_refs as f64;
        points.push((recall, precision));
    }
    // all-point interpolation: area under the precision envelope
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let envelope = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            area += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    Ok(area * 100.0)
}

/// Mean alignment score (percentage scale is not used here; stays `[0,1]`).
pub fn mean_alignment(records: &[EvalRecord]) -> Result<f64> {
    require!(!records.is_empty(), "ALN of an empty record set");
    Ok(records.iter().map(|r| r.alignment).sum::<f64>() / records.len() as f64)
}

/// Per-kind summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: String,
    pub records: usize,
    pub oca: f64,
    pub ap: f64,
    pub aln: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_kind: Vec<KindSummary>,
    pub overall: KindSummary,
    pub iou_threshold: f64,
}

/// Aggregate records into the per-kind table mirrored by the CLI reports.
pub fn summarize(records: &[EvalRecord], iou_threshold: f64) -> Result<RunSummary> {
    require!(!records.is_empty(), "summary of an empty run");
    let mut per_kind = Vec::new();
    for kind in [EditKind::Class, EditKind::Scene, EditKind::Style] {
        let subset: Vec<EvalRecord> = records
            .iter()
            .filter(|r| r.kind == kind)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        per_kind.push(KindSummary {
            kind: String::from(kind.name()),
            records: subset.len(),
            oca: oca(&subset)?,
            ap: ap(&subset, iou_threshold)?,
            aln: mean_alignment(&subset)?,
        });
    }
    let overall = KindSummary {
        kind: String::from("all"),
        records: records.len(),
        oca: oca(records)?,
        ap: ap(records, iou_threshold)?,
        aln: mean_alignment(records)?,
    };
    Ok(RunSummary {
        per_kind,
        overall,
        iou_threshold,
    })
}

/// Fixed-width text table for a summary, one column group per edit kind.
pub fn format_table(runs: &[(String, RunSummary)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8}   per-kind (OCA/AP/ALN)\n",
        "run", "OCA", "AP", "ALN"
    ));
    for (name, run) in runs {
        out.push_str(&format!(
            "{:<10} {:>8.1} {:>8.1} {:>8.3}  ",
            name, run.overall.oca, run.overall.ap, run.overall.aln
        ));
        for k in &run.per_kind {
            out.push_str(&format!(
                " {}: {:.1}/{:.1}/{:.3}",
                k.kind, k.oca, k.ap, k.aln
            ));
        }
        out.push('\n');
    }
    out
}
