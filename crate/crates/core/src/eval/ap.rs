use serde::{Deserialize, Serialize};

use crate::detector::{Detection, GroundTruthLabel};
use crate::error::{Error, Result};

/// Intersection over union of two `[x1, y1, x2, y2]` boxes. Degenerate or
/// disjoint boxes give 0.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy score-ranked matching at a fixed IoU threshold, per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchProtocol {
    pub iou_threshold: f64,
}

impl Default for MatchProtocol {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl MatchProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "IoU threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Per-prediction outcome after matching, in descending score order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub score: f64,
    pub image: usize,
    pub index: usize,
    /// Index of the matched ground-truth box within its image, if any.
    pub matched: Option<usize>,
}

/// Ranks the class-`class_id` predictions by score (stable for ties) and
/// greedily matches each to the highest-IoU ground truth of that class in the
/// same image. A prediction is a true positive when that IoU reaches the
/// threshold and the box is still unmatched.
pub fn match_class(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthLabel>],
    class_id: usize,
    protocol: &MatchProtocol,
) -> Vec<Ranked> {
    let mut ranked: Vec<Ranked> = predictions
        .iter()
        .enumerate()
        .flat_map(|(image, dets)| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(move |(index, d)| Ranked {
                    score: d.confidence,
                    image,
                    index,
                    matched: None,
                })
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    for r in &mut ranked {
        let bbox = &predictions[r.image][r.index].bbox;
        let Some(gts) = ground_truth.get(r.image) else { continue };
        let best = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == class_id)
            .map(|(j, g)| (j, iou(bbox, &g.bbox)))
            .fold(None, |best: Option<(usize, f64)>, (j, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v >= protocol.iou_threshold && !used[r.image][j] {
                used[r.image][j] = true;
                r.matched = Some(j);
            }
        }
    }
    ranked
}

/// Average precision of one class as a fraction in `[0, 1]`: the area under
/// the precision-recall curve with all-point interpolation.
///
/// Returns `None` when the class has neither ground truth nor predictions,
/// so it can be excluded from the mean.
pub fn average_precision(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthLabel>],
    class_id: usize,
    protocol: &MatchProtocol,
) -> Option<f64> {
    let npos = ground_truth
        .iter()
        .flatten()
        .filter(|g| g.class_id == class_id)
        .count();
    let ranked = match_class(predictions, ground_truth, class_id, protocol);
    if npos == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(ranked.len() + 2);
    let mut precision = Vec::with_capacity(ranked.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let mut tp = 0usize;
    for (k, r) in ranked.iter().enumerate() {
        tp += r.matched.is_some() as usize;
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    Some(ap)
}

/// AP of one class, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub ground_truth: usize,
    pub predictions: usize,
}

/// Per-class AP and mAP (percent) over `class_ids`. Classes with neither
/// ground truth nor predictions are left out of both.
pub fn evaluate_classes(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthLabel>],
    class_ids: &[usize],
    class_names: &[String],
    protocol: &MatchProtocol,
) -> (Vec<ClassAp>, f64) {
    let per_class: Vec<ClassAp> = class_ids
        .iter()
        .filter_map(|&c| {
            average_precision(predictions, ground_truth, c, protocol).map(|ap| ClassAp {
                class_id: c,
                name: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                ap: 100.0 * ap,
                ground_truth: ground_truth.iter().flatten().filter(|g| g.class_id == c).count(),
                predictions: predictions.iter().flatten().filter(|d| d.class_id == c).count(),
            })
        })
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    (per_class, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: [f64; 4], c: usize, s: f64) -> Detection {
        Detection {
            bbox: b,
            class_id: c,
            objectness: s,
            class_prob: 1.0,
            confidence: s,
        }
    }

    fn gt(b: [f64; 4], c: usize) -> GroundTruthLabel {
        GroundTruthLabel { bbox: b, class_id: c }
    }

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[2.0, 2.0, 3.0, 3.0]), 0.0);
        let half = [0.5, 0.0, 1.5, 1.0];
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &half), iou(&half, &a));
    }

    #[test]
    fn perfect_predictions_score_full_ap() {
        let boxes = [[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 40.0, 30.0]];
        let preds = vec![boxes.iter().map(|b| det(*b, 0, 1.0)).collect()];
        let gts = vec![boxes.iter().map(|b| gt(*b, 0)).collect()];
        assert_eq!(average_precision(&preds, &gts, 0, &MatchProtocol::default()), Some(1.0));
    }

    #[test]
    fn no_predictions_with_ground_truth_scores_zero() {
        let gts = vec![vec![gt([0.0, 0.0, 5.0, 5.0], 0)]];
        assert_eq!(average_precision(&[vec![]], &gts, 0, &MatchProtocol::default()), Some(0.0));
        assert_eq!(average_precision(&[vec![]], &gts, 1, &MatchProtocol::default()), None);
    }

    #[test]
    fn duplicate_predictions_do_not_double_match() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let preds = vec![vec![det(b, 0, 0.9), det(b, 0, 0.8)]];
        let gts = vec![vec![gt(b, 0)]];
        let ranked = match_class(&preds, &gts, 0, &MatchProtocol::default());
        assert_eq!(ranked.iter().filter(|r| r.matched.is_some()).count(), 1);
        // P/R points: (1, 1), (0.5, 1) -> AP 1
        assert_eq!(average_precision(&preds, &gts, 0, &MatchProtocol::default()), Some(1.0));
    }

    #[test]
    fn map_is_mean_over_evaluated_classes() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let preds = vec![vec![det(b, 0, 0.9)]];
        let gts = vec![vec![gt(b, 0), gt([50.0, 50.0, 60.0, 60.0], 1)]];
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let (per, map) = evaluate_classes(&preds, &gts, &[0, 1, 2], &names, &MatchProtocol::default());
        assert_eq!(per.len(), 2);
        assert_eq!(map, 50.0);
    }

    proptest! {
        #[test]
        fn top_scoring_correct_prediction_never_lowers_ap(
            boxes in proptest::collection::vec((0.0f64..40.0, 0.0f64..40.0, 2.0f64..20.0, 2.0f64..20.0, 0.0f64..1.0), 1..6),
            extra in proptest::collection::vec((0.0f64..40.0, 0.0f64..40.0, 2.0f64..20.0, 2.0f64..20.0), 1..4),
        ) {
            let gts: Vec<Vec<GroundTruthLabel>> =
                vec![extra.iter().map(|&(x, y, w, h)| gt([x, y, x + w, y + h], 0)).collect()];
            let mut preds: Vec<Vec<Detection>> =
                vec![boxes.iter().map(|&(x, y, w, h, s)| det([x, y, x + w, y + h], 0, s * 0.99)).collect()];
            let p = MatchProtocol::default();
            let before = average_precision(&preds, &gts, 0, &p).unwrap();
            // a perfect copy of a ground-truth box that no prediction matched
            let ranked = match_class(&preds, &gts, 0, &p);
            let matched: Vec<usize> = ranked.iter().filter_map(|r| r.matched).collect();
            if let Some(free) = (0..gts[0].len()).find(|j| !matched.contains(j)) {
                preds[0].push(det(gts[0][free].bbox, 0, 1.0));
                let after = average_precision(&preds, &gts, 0, &p).unwrap();
                prop_assert!(after >= before - 1e-12, "{before} -> {after}");
            }
        }
    }
}
