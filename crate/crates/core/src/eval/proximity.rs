use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::iou;
use crate::detector::{Detection, Prediction};
use crate::patch::Placement;

/// Default proximity radius in pixels at a 416×416 input.
pub const DEFAULT_RADIUS: f64 = 150.0;

/// IoU at which an attacked box counts as the same object as a clean box.
pub const SAME_OBJECT_IOU: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassProximity {
    pub clean: usize,
    pub suppressed: usize,
    pub matched: usize,
    pub mean_confidence_delta: f64,
}

/// Confidence changes of clean detections whose centre lies within `radius`
/// of the patch centre.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub radius: f64,
    /// Clean detections near the patch.
    pub clean: usize,
    /// Near-patch clean detections with no same-class attacked box at IoU ≥ 0.5.
    pub suppressed: usize,
    pub matched: usize,
    /// Mean of `attacked − clean` confidence over matched boxes (0 if none).
    pub mean_confidence_delta: f64,
    pub mean_clean_confidence: f64,
    pub per_class: BTreeMap<usize, ClassProximity>,
}

fn near(center: (f64, f64), placement: &Placement, radius: f64) -> bool {
    let (px, py) = placement.center();
    (center.0 - px).hypot(center.1 - py) <= radius
}

/// Compares per-image clean and attacked detections around a fixed placement.
///
/// Within each image, near-patch clean boxes are visited in decreasing
/// confidence and claim the unused same-class attacked box of highest IoU.
pub fn proximity_report(
    clean: &[Vec<Detection>],
    attacked: &[Vec<Detection>],
    placement: &Placement,
    radius: f64,
) -> ProximityReport {
    let mut report = ProximityReport {
        radius,
        ..Default::default()
    };
    let mut delta_sum = 0.0;
    let mut clean_sum = 0.0;
    let mut class_sums: BTreeMap<usize, f64> = BTreeMap::new();
    let empty = Vec::new();
    for (i, clean_dets) in clean.iter().enumerate() {
        let att = attacked.get(i).unwrap_or(&empty);
        let mut used = vec![false; att.len()];
        let mut order: Vec<&Detection> = clean_dets
            .iter()
            .filter(|d| near(d.center(), placement, radius))
            .collect();
        order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        for d in order {
            report.clean += 1;
            clean_sum += d.confidence;
            let entry = report.per_class.entry(d.class_id).or_default();
            entry.clean += 1;
            let best = att
                .iter()
                .enumerate()
                .filter(|(j, a)| !used[*j] && a.class_id == d.class_id)
                .map(|(j, a)| (j, iou(&d.bbox, &a.bbox)))
                .filter(|&(_, v)| v >= SAME_OBJECT_IOU)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    let delta = att[j].confidence - d.confidence;
                    report.matched += 1;
                    delta_sum += delta;
                    entry.matched += 1;
                    *class_sums.entry(d.class_id).or_default() += delta;
                }
                None => {
                    report.suppressed += 1;
                    entry.suppressed += 1;
                }
            }
        }
    }
    if report.matched > 0 {
        report.mean_confidence_delta = delta_sum / report.matched as f64;
    }
    if report.clean > 0 {
        report.mean_clean_confidence = clean_sum / report.clean as f64;
    }
    for (c, entry) in report.per_class.iter_mut() {
        if entry.matched > 0 {
            entry.mean_confidence_delta = class_sums.get(c).copied().unwrap_or(0.0) / entry.matched as f64;
        }
    }
    report
}

/// Mean raw objectness over predictions whose box centre lies within
/// `radius` of the patch centre; `None` when no prediction is that close.
pub fn proximity_objectness(predictions: &[Prediction], placement: &Placement, radius: f64) -> Option<f64> {
    let near: Vec<f64> = predictions
        .iter()
        .filter(|p| near(p.center(), placement, radius))
        .map(|p| p.objectness)
        .collect();
    (!near.is_empty()).then(|| near.iter().sum::<f64>() / near.len() as f64)
}
