//! A small differentiable grid detector for desk-scale experiments.
//!
//! Three convolutional stages feed a 1×1 head over a square grid of cells:
//!
//! 1. 3×3 pixel features (stride 1),
//! 2. cell pooling (kernel = stride = cell size),
//! 3. 3×3 context over neighbouring cells,
//!
//! followed by a head producing, per cell, an objectness activation, four box
//! offsets and class logits. Objectness is `r²/(1 + r²)` with `r = max(a, 0)`,
//! which is exactly zero for non-positive activations and continuously
//! differentiable everywhere.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig, GroundTruthLabel, LossOutput, Prediction};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, Conv2d, Init, Layer, Network};
use crate::tensor::Tensor;
use crate::weights;

const WEIGHTS_KIND: &str = "mock-detector";

/// Channels before the class logits: objectness + four box offsets.
const HEAD_FIXED: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    pub input_size: usize,
    /// Cell side in pixels; `input_size` must be a multiple of it.
    pub cell: usize,
    pub features: usize,
    pub class_names: Vec<String>,
    /// Activations after the pixel, pooling and context stages.
    pub activations: [Activation; 3],
    /// Default box side, in cells.
    pub anchor: f64,
}

impl MockSpec {
    /// 64×64 input, 8×8 grid of 8-pixel cells.
    pub fn desk(class_names: Vec<String>) -> Self {
        Self {
            input_size: 64,
            cell: 8,
            features: 8,
            class_names,
            activations: [Activation::Tanh; 3],
            anchor: 1.0,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.cell
    }

    fn head_channels(&self) -> usize {
        HEAD_FIXED + self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.cell) {
            return Err(Error::Config(format!(
                "mock input size {} must be a positive multiple of the cell size {}",
                self.input_size, self.cell
            )));
        }
        if self.features == 0 || self.class_names.is_empty() {
            return Err(Error::Config("mock detector needs features and at least one class".into()));
        }
        Ok(())
    }

    fn build(&self) -> Network {
        let f = self.features;
        Network::new(vec![
            Layer::Conv2d(Conv2d::zeros(3, f, 3, 1, 1)),
            Layer::Activation(self.activations[0]),
            Layer::Conv2d(Conv2d::zeros(f, f, self.cell, self.cell, 0)),
            Layer::Activation(self.activations[1]),
            Layer::Conv2d(Conv2d::zeros(f, f, 3, 1, 1)),
            Layer::Activation(self.activations[2]),
            Layer::Conv2d(Conv2d::zeros(f, self.head_channels(), 1, 1, 0)),
        ])
    }
}

/// `r²/(1 + r²)` with `r = max(a, 0)`.
#[inline]
pub fn objectness_activation(a: f64) -> f64 {
    let r = a.max(0.0);
    let q = r * r;
    q / (1.0 + q)
}

#[inline]
fn objectness_derivative(a: f64) -> f64 {
    let r = a.max(0.0);
    let d = 1.0 + r * r;
    2.0 * r / (d * d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockDetector {
    spec: MockSpec,
    config: DetectorConfig,
    net: Network,
}

impl MockDetector {
    pub fn zeros(spec: MockSpec) -> Result<Self> {
        spec.validate()?;
        let config = DetectorConfig::new(spec.input_size, spec.class_names.clone());
        let net = spec.build();
        Ok(Self { spec, config, net })
    }

    /// Random weights (uniform fan-in scaling) with the given objectness bias.
    pub fn random(spec: MockSpec, seed: u64, objectness_bias: f64) -> Result<Self> {
        let mut det = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        det.net.init(Init::FanIn { gain: 1.7 }, &mut rng);
        det.head_mut().bias[0] = objectness_bias;
        Ok(det)
    }

    /// Hand-set weights that respond to saturated colour blobs on a mid-gray
    /// background and are suppressed by dark regions in the 3×3 cell
    /// neighbourhood. Classes 0, 1 and 2 fire on red, green and blue blobs.
    pub fn color_blobs(class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != 3 {
            return Err(Error::Config("colour-blob mock needs exactly three classes".into()));
        }
        let spec = MockSpec {
            activations: [Activation::Sigmoid, Activation::Identity, Activation::Identity],
            // shapes are 12 to 20 pixels across
            anchor: 2.0,
            ..MockSpec::desk(class_names)
        };
        let mut det = Self::zeros(spec)?;
        let cell = det.spec.cell;
        let f = det.spec.features;
        let steep = 20.0;
        let darkness_weight = 1.0;
        let gain = 3.0;
        let threshold = 1.0;
        let class_gain = 4.0;

        let layers = &mut det.net.layers;
        // Pixel stage, centre tap only: channels 0..3 high colour, 3..6 low
        // colour, 6 darkness.
        if let Layer::Conv2d(c) = &mut layers[0] {
            let center = |o: usize, i: usize| (o * 3 + i) * 9 + 4;
            for ch in 0..3 {
                c.weight[center(ch, ch)] = steep;
                c.bias[ch] = -0.65 * steep;
                c.weight[center(3 + ch, ch)] = -steep;
                c.bias[3 + ch] = 0.35 * steep;
                c.weight[center(6, ch)] = -steep / 3.0;
            }
            c.bias[6] = 0.3 * steep;
        }
        // Cell mean of every feature.
        if let Layer::Conv2d(c) = &mut layers[2] {
            let k2 = cell * cell;
            for o in 0..f {
                for t in 0..k2 {
                    c.weight[(o * f + o) * k2 + t] = 1.0 / k2 as f64;
                }
            }
        }
        // Context: channel 0 foreground minus neighbourhood darkness,
        // channels 1..4 signed colour evidence.
        if let Layer::Conv2d(c) = &mut layers[4] {
            let tap = |o: usize, i: usize, ky: usize, kx: usize| ((o * f + i) * 3 + ky) * 3 + kx;
            for i in 0..6 {
                c.weight[tap(0, i, 1, 1)] = 1.0;
            }
            for ky in 0..3 {
                for kx in 0..3 {
                    c.weight[tap(0, 6, ky, kx)] = -darkness_weight;
                }
            }
            for ch in 0..3 {
                c.weight[tap(1 + ch, ch, 1, 1)] = 1.0;
                c.weight[tap(1 + ch, 3 + ch, 1, 1)] = -1.0;
            }
        }
        let head = det.head_mut();
        let fw = f;
        head.weight[0] = gain;
        head.bias[0] = -gain * threshold;
        for k in 0..3 {
            head.weight[(HEAD_FIXED + k) * fw + 1 + k] = class_gain;
        }
        Ok(det)
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn config_mut(&mut self) -> &mut DetectorConfig {
        &mut self.config
    }

    pub fn head_mut(&mut self) -> &mut Conv2d {
        match self.net.layers.last_mut() {
            Some(Layer::Conv2d(c)) => c,
            _ => unreachable!("mock head is a convolution"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, WEIGHTS_KIND, &self.spec, &self.net.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, tensors): (MockSpec, _) = weights::load(path, WEIGHTS_KIND)?;
        let mut det = Self::zeros(spec)?;
        det.net.load_params(&tensors).map_err(|e| Error::Weights {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(det)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = self.spec.input_size;
        if input.shape() != [3, s, s] {
            return Err(Error::Shape(format!(
                "mock detector expects 3x{s}x{s} input, got {:?}",
                input.shape()
            )));
        }
        Ok(())
    }

    /// Raw head activations, `(5 + K) × G × G`.
    pub fn head_output(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        self.net.forward(input)
    }

    /// Objectness per cell, row-major over the grid.
    pub fn cell_objectness(&self, input: &Tensor) -> Result<Vec<f64>> {
        let head = self.head_output(input)?;
        let g = self.spec.grid();
        Ok((0..g * g).map(|i| objectness_activation(head.get(0, i / g, i % g))).collect())
    }

    fn decode(&self, head: &Tensor) -> Vec<Prediction> {
        let g = self.spec.grid();
        let cell = self.spec.cell as f64;
        let k = self.spec.class_names.len();
        let mut out = Vec::with_capacity(g * g);
        for gy in 0..g {
            for gx in 0..g {
                let cx = (gx as f64 + sigmoid(head.get(1, gy, gx))) * cell;
                let cy = (gy as f64 + sigmoid(head.get(2, gy, gx))) * cell;
                let w = self.spec.anchor * cell * head.get(3, gy, gx).exp();
                let h = self.spec.anchor * cell * head.get(4, gy, gx).exp();
                let logits: Vec<f64> = (0..k).map(|c| head.get(HEAD_FIXED + c, gy, gx)).collect();
                out.push(Prediction {
                    bbox: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
                    objectness: objectness_activation(head.get(0, gy, gx)),
                    class_probs: softmax(&logits),
                });
            }
        }
        out
    }

    /// Cells containing a label centre are trained towards objectness 1.
    fn responsible_cells(&self, labels: &[GroundTruthLabel]) -> Vec<bool> {
        let g = self.spec.grid();
        let cell = self.spec.cell as f64;
        let mut mask = vec![false; g * g];
        for l in labels {
            let cx = (l.bbox[0] + l.bbox[2]) / 2.0;
            let cy = (l.bbox[1] + l.bbox[3]) / 2.0;
            let gx = ((cx / cell).floor().max(0.0) as usize).min(g - 1);
            let gy = ((cy / cell).floor().max(0.0) as usize).min(g - 1);
            mask[gy * g + gx] = true;
        }
        mask
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Detector for MockDetector {
    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn predict(&self, input: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self.decode(&self.head_output(input)?))
    }

    /// Squared objectness error: `Σ (obj − t)²` with `t = 1` on cells holding a
    /// label centre and `t = 0` elsewhere. With no labels this is `Σ obj²`.
    fn loss(&self, input: &Tensor, labels: &[GroundTruthLabel], with_grad: bool) -> Result<LossOutput> {
        self.check_input(input)?;
        let g = self.spec.grid();
        let targets = self.responsible_cells(labels);
        let trace = self.net.forward_trace(input)?;
        let head = trace.output();
        let mut loss = 0.0;
        let mut grad_head = Tensor::zeros(head.channels(), g, g);
        for gy in 0..g {
            for gx in 0..g {
                let a = head.get(0, gy, gx);
                let obj = objectness_activation(a);
                let t = if targets[gy * g + gx] { 1.0 } else { 0.0 };
                loss += (obj - t) * (obj - t);
                grad_head.set(0, gy, gx, 2.0 * (obj - t) * objectness_derivative(a));
            }
        }
        let grad = with_grad.then(|| self.net.backward(&trace, &grad_head, None));
        Ok(LossOutput {
            loss,
            grad,
            predictions: self.decode(head),
        })
    }
}
