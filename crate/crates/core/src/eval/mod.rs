//! Detection metrics, patch-proximity statistics and annotated figures.

mod ap;
mod proximity;
mod render;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, GroundTruthLabel};
use crate::error::{Error, Result};

pub use ap::{average_precision, evaluate_classes, iou, match_class, ClassAp, MatchProtocol, Ranked};
pub use proximity::{
    proximity_objectness, proximity_report, ClassProximity, ProximityReport, DEFAULT_RADIUS, SAME_OBJECT_IOU,
};
pub use render::{class_color, draw_rect, draw_text, glyph, label_text, render_annotated, PALETTE};

/// Detections of one image, in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: u64,
    pub file_name: String,
    pub detections: Vec<Detection>,
}

/// Metrics of one evaluation condition (clean, control or attacked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub protocol: MatchProtocol,
    /// Names of the classes AP was requested for.
    pub class_set: Vec<String>,
    pub per_class: Vec<ClassAp>,
    /// Mean of `per_class[*].ap`, in percent.
    pub map: f64,
    pub images: Vec<ImageDetections>,
    pub proximity: Option<ProximityReport>,
}

impl EvalReport {
    /// Scores `images` against `ground_truth` (same order) over `class_ids`.
    pub fn new(
        condition: impl Into<String>,
        images: Vec<ImageDetections>,
        ground_truth: &[Vec<GroundTruthLabel>],
        class_ids: &[usize],
        class_names: &[String],
        protocol: MatchProtocol,
    ) -> Result<Self> {
        protocol.validate()?;
        if images.len() != ground_truth.len() {
            return Err(Error::Contract(format!(
                "{} detection lists for {} ground-truth images",
                images.len(),
                ground_truth.len()
            )));
        }
        let preds: Vec<Vec<Detection>> = images.iter().map(|i| i.detections.clone()).collect();
        let (per_class, map) = evaluate_classes(&preds, ground_truth, class_ids, class_names, &protocol);
        Ok(Self {
            condition: condition.into(),
            protocol,
            class_set: class_ids
                .iter()
                .map(|&c| class_names.get(c).cloned().unwrap_or_else(|| c.to_string()))
                .collect(),
            per_class,
            map,
            images,
            proximity: None,
        })
    }

    pub fn ap(&self, class_name: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.name == class_name).map(|c| c.ap)
    }

    pub fn detections(&self) -> Vec<Vec<Detection>> {
        self.images.iter().map(|i| i.detections.clone()).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_string_pretty(self)?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Comparison table with one column per condition and rows `mAP` then
/// `AP_<class>` for every class in `rows`. Values are rounded to one decimal;
/// classes excluded from a report are left blank.
pub fn comparison_table(reports: &[EvalReport], rows: &[String]) -> String {
    let mut out = String::from("metric");
    for r in reports {
        out.push(',');
        out.push_str(&r.condition);
    }
    out.push('\n');
    out.push_str("mAP");
    for r in reports {
        let _ = write!(out, ",{:.1}", r.map);
    }
    out.push('\n');
    for name in rows {
        let _ = write!(out, "AP_{name}");
        for r in reports {
            out.push(',');
            if let Some(ap) = r.ap(name) {
                let _ = write!(out, "{ap:.1}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_comparison_table(path: &Path, reports: &[EvalReport], rows: &[String]) -> Result<()> {
    write_file(path, &comparison_table(reports, rows))
}
