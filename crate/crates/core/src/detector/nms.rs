use super::Detection;
use crate::eval::iou;

/// Class-aware greedy non-maximum suppression. A box is dropped when its IoU
/// with an already kept box of the same class exceeds `iou_threshold`.
/// Output is ordered by decreasing confidence (stable for ties).
pub fn non_max_suppression(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
