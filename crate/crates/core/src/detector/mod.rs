//! Detector adapters: a uniform interface over object detectors exposing an
//! object-vanishing loss, its gradient with respect to image pixels, and
//! thresholded, NMS-filtered predictions.
//!
//! Two implementations ship with the crate: [`MockDetector`], a small
//! convolutional grid predictor used for desk-scale experiments and
//! exhaustive gradient checks, and [`YoloV3`], a darknet-format reference
//! adapter.

mod letterbox;
mod mock;
mod nms;
mod yolo;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use letterbox::{Letterbox, PAD_VALUE};
pub use mock::{objectness_activation, MockDetector, MockSpec};
pub use nms::non_max_suppression;
pub use yolo::{DarknetConfig, YoloV3};

/// Default confidence threshold for reported detections.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
/// Default IoU above which NMS suppresses a same-class box.
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;

/// One detector output box. `bbox` is `[x1, y1, x2, y2]` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub objectness: f64,
    pub class_prob: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn center(&self) -> (f64, f64) {
        ((self.bbox[0] + self.bbox[2]) / 2.0, (self.bbox[1] + self.bbox[3]) / 2.0)
    }
}

/// A ground-truth box for the detector loss. Label sets may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub bbox: [f64; 4],
    pub class_id: usize,
}

/// Raw per-cell (or per-anchor) prediction in detector-input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: [f64; 4],
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

impl Prediction {
    /// `(class_id, probability)` of the most likely class.
    pub fn best_class(&self) -> (usize, f64) {
        self.class_probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.bbox[0] + self.bbox[2]) / 2.0, (self.bbox[1] + self.bbox[3]) / 2.0)
    }
}

/// Shared adapter settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Square network input side in pixels.
    pub input_size: usize,
    pub class_names: Vec<String>,
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl DetectorConfig {
    pub fn new(input_size: usize, class_names: Vec<String>) -> Self {
        Self {
            input_size,
            class_names,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            nms_iou_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

/// Result of one forward (and optional backward) pass on a detector input.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the detector input, when requested.
    pub grad: Option<Tensor>,
    pub predictions: Vec<Prediction>,
}

/// A detector operating on square `input_size` inputs with values in `[0, 1]`.
///
/// `labels` passed to [`Detector::loss`] are in detector-input coordinates;
/// an empty slice selects the object-vanishing objective.
pub trait Detector: Send + Sync {
    fn config(&self) -> &DetectorConfig;

    fn predict(&self, input: &Tensor) -> Result<Vec<Prediction>>;

    fn loss(&self, input: &Tensor, labels: &[GroundTruthLabel], with_grad: bool) -> Result<LossOutput>;

    fn supports_gradient(&self) -> bool {
        true
    }
}

/// Reads a class-names file: one name per line, blank lines ignored.
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.channels() != 3 || image.height() == 0 || image.width() == 0 {
        return Err(Error::Shape(format!(
            "malformed image dimensions {:?}; expected 3xHxW with H, W >= 1",
            image.shape()
        )));
    }
    Ok(())
}

fn letterbox_for(det: &dyn Detector, image: &Tensor) -> Result<Letterbox> {
    check_image(image)?;
    Ok(Letterbox::new(image.height(), image.width(), det.config().input_size))
}

/// Thresholded, NMS-filtered detections from raw predictions in input space.
pub fn postprocess(config: &DetectorConfig, predictions: &[Prediction], letterbox: &Letterbox) -> Vec<Detection> {
    let candidates = predictions
        .iter()
        .filter_map(|p| {
            let (class_id, class_prob) = p.best_class();
            let confidence = p.objectness * class_prob;
            (confidence > config.confidence_threshold).then(|| Detection {
                bbox: letterbox.to_image(p.bbox),
                class_id,
                objectness: p.objectness,
                class_prob,
                confidence,
            })
        })
        .filter(|d| d.bbox[2] > d.bbox[0] && d.bbox[3] > d.bbox[1])
        .collect();
    non_max_suppression(candidates, config.nms_iou_threshold)
}

/// Detections above the confidence threshold, after NMS, in image coordinates.
pub fn detect(det: &dyn Detector, image: &Tensor) -> Result<Vec<Detection>> {
    let lb = letterbox_for(det, image)?;
    let preds = det.predict(&lb.apply(image))?;
    Ok(postprocess(det.config(), &preds, &lb))
}

/// Object-vanishing loss (empty label set) on an image.
pub fn vanish_loss(det: &dyn Detector, image: &Tensor) -> Result<f64> {
    let lb = letterbox_for(det, image)?;
    Ok(det.loss(&lb.apply(image), &[], false)?.loss)
}

/// Per-image loss evaluation with the gradient mapped back to image pixels.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub loss: f64,
    pub grad: Tensor,
    /// Raw predictions in detector-input coordinates.
    pub predictions: Vec<Prediction>,
    pub letterbox: Letterbox,
}

/// Loss and `∂loss/∂pixels` for `labels` given in image coordinates.
pub fn loss_and_gradient(det: &dyn Detector, image: &Tensor, labels: &[GroundTruthLabel]) -> Result<ImageLoss> {
    if !det.supports_gradient() {
        return Err(Error::Unsupported("detector does not expose gradients".into()));
    }
    let lb = letterbox_for(det, image)?;
    let mapped: Vec<GroundTruthLabel> = labels
        .iter()
        .map(|l| GroundTruthLabel {
            bbox: lb.to_input(l.bbox),
            class_id: l.class_id,
        })
        .collect();
    let out = det.loss(&lb.apply(image), &mapped, true)?;
    let grad = out
        .grad
        .ok_or_else(|| Error::Unsupported("detector returned no gradient".into()))?;
    Ok(ImageLoss {
        loss: out.loss,
        grad: lb.backward(&grad),
        predictions: out.predictions,
        letterbox: lb,
    })
}

/// `∂loss/∂pixels`, same shape as `image`.
pub fn image_gradient(det: &dyn Detector, image: &Tensor, labels: &[GroundTruthLabel]) -> Result<Tensor> {
    Ok(loss_and_gradient(det, image, labels)?.grad)
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Converts detections to COCO results, mapping class indices to category
/// ids through `category_ids`.
pub fn to_coco_results(image_id: u64, detections: &[Detection], category_ids: &[u64]) -> Vec<CocoResult> {
    detections
        .iter()
        .filter_map(|d| {
            category_ids.get(d.class_id).map(|&category_id| CocoResult {
                image_id,
                category_id,
                bbox: [d.bbox[0], d.bbox[1], d.bbox[2] - d.bbox[0], d.bbox[3] - d.bbox[1]],
                score: d.confidence,
            })
        })
        .collect()
}

/// A detector whose loss is constant; its gradient is identically zero.
#[derive(Debug, Clone)]
pub struct ConstantDetector {
    pub config: DetectorConfig,
    pub value: f64,
}

impl ConstantDetector {
    pub fn new(input_size: usize, value: f64) -> Self {
        Self {
            config: DetectorConfig::new(input_size, vec!["object".into()]),
            value,
        }
    }
}

impl Detector for ConstantDetector {
    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn predict(&self, _input: &Tensor) -> Result<Vec<Prediction>> {
        Ok(Vec::new())
    }

    fn loss(&self, input: &Tensor, _labels: &[GroundTruthLabel], with_grad: bool) -> Result<LossOutput> {
        let [c, h, w] = input.shape();
        Ok(LossOutput {
            loss: self.value,
            grad: with_grad.then(|| Tensor::zeros(c, h, w)),
            predictions: Vec::new(),
        })
    }
}

/// Analytic loss `Σ v²` over the pixels of a fixed input-space rectangle,
/// with gradient `2v` there and zero elsewhere. It makes no predictions.
#[derive(Debug, Clone)]
pub struct QuadraticDetector {
    pub config: DetectorConfig,
    pub region: [usize; 4],
}

impl QuadraticDetector {
    /// `region` is `[x1, y1, x2, y2]` in detector-input pixels.
    pub fn new(input_size: usize, region: [usize; 4]) -> Self {
        Self {
            config: DetectorConfig::new(input_size, vec!["object".into()]),
            region,
        }
    }

    fn inside(&self, y: usize, x: usize) -> bool {
        let [x1, y1, x2, y2] = self.region;
        (x1..x2).contains(&x) && (y1..y2).contains(&y)
    }
}

impl Detector for QuadraticDetector {
    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn predict(&self, _input: &Tensor) -> Result<Vec<Prediction>> {
        Ok(Vec::new())
    }

    fn loss(&self, input: &Tensor, _labels: &[GroundTruthLabel], with_grad: bool) -> Result<LossOutput> {
        let [c, h, w] = input.shape();
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if self.inside(y, x) {
                        let v = input.get(ch, y, x);
                        loss += v * v;
                        grad.set(ch, y, x, 2.0 * v);
                    }
                }
            }
        }
        Ok(LossOutput {
            loss,
            grad: with_grad.then_some(grad),
            predictions: Vec::new(),
        })
    }
}
