//! Darknet-format YOLOv3 adapter.
//!
//! Reads a `.cfg` network description and a `.weights` blob, folds batch
//! normalisation into the convolutions, and runs the network with explicit
//! reverse-mode differentiation back to the input pixels.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Detector, DetectorConfig, GroundTruthLabel, LossOutput, Prediction};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::nn::{sigmoid, softplus, Activation, Conv2d};
use crate::tensor::Tensor;

/// Batch-norm epsilon used when folding running statistics.
const BN_EPS: f64 = 1e-5;
const LEAKY: Activation = Activation::LeakyRelu { slope: 0.1 };

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Convolutional {
        batch_normalize: bool,
        filters: usize,
        size: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    Shortcut {
        from: isize,
    },
    Route {
        layers: Vec<isize>,
    },
    Upsample {
        stride: usize,
    },
    Yolo {
        mask: Vec<usize>,
        anchors: Vec<(f64, f64)>,
        classes: usize,
    },
}

/// Parsed `.cfg` file.
#[derive(Debug, Clone, PartialEq)]
pub struct DarknetConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub sections: Vec<Section>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(format!("darknet cfg: {}", msg.into()))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| cfg_err(format!("bad list entry {s:?}"))))
        .collect()
}

impl DarknetConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut blocks: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                blocks.push((name.trim().to_string(), Vec::new()));
            } else if let Some((k, v)) = line.split_once('=') {
                let block = blocks.last_mut().ok_or_else(|| cfg_err("option before first section"))?;
                block.1.push((k.trim().to_string(), v.trim().to_string()));
            } else {
                return Err(cfg_err(format!("unparseable line {line:?}")));
            }
        }
        let mut iter = blocks.into_iter();
        let (first, net) = iter.next().ok_or_else(|| cfg_err("empty file"))?;
        if first != "net" && first != "network" {
            return Err(cfg_err("first section must be [net]"));
        }
        let get = |opts: &[(String, String)], key: &str| opts.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        let num = |opts: &[(String, String)], key: &str, default: usize| -> Result<usize> {
            match get(opts, key) {
                Some(v) => v.parse().map_err(|_| cfg_err(format!("{key}={v} is not an integer"))),
                None => Ok(default),
            }
        };
        let width = num(&net, "width", 416)?;
        let height = num(&net, "height", 416)?;
        let channels = num(&net, "channels", 3)?;

        let mut sections = Vec::new();
        for (name, opts) in iter {
            let section = match name.as_str() {
                "convolutional" => {
                    let size = num(&opts, "size", 1)?;
                    let activation = match get(&opts, "activation").as_deref().unwrap_or("logistic") {
                        "leaky" => LEAKY,
                        "linear" => Activation::Identity,
                        "relu" => Activation::Relu,
                        "logistic" => Activation::Sigmoid,
                        other => return Err(cfg_err(format!("unsupported activation {other}"))),
                    };
                    Section::Convolutional {
                        batch_normalize: num(&opts, "batch_normalize", 0)? != 0,
                        filters: num(&opts, "filters", 1)?,
                        size,
                        stride: num(&opts, "stride", 1)?,
                        pad: if num(&opts, "pad", 0)? != 0 { size / 2 } else { num(&opts, "padding", 0)? },
                        activation,
                    }
                }
                "shortcut" => {
                    if let Some(a) = get(&opts, "activation") {
                        if a != "linear" {
                            return Err(cfg_err(format!("unsupported shortcut activation {a}")));
                        }
                    }
                    let from = get(&opts, "from").ok_or_else(|| cfg_err("shortcut without from"))?;
                    Section::Shortcut {
                        from: from.parse().map_err(|_| cfg_err("bad shortcut from"))?,
                    }
                }
                "route" => Section::Route {
                    layers: parse_list(&get(&opts, "layers").ok_or_else(|| cfg_err("route without layers"))?)?,
                },
                "upsample" => Section::Upsample {
                    stride: num(&opts, "stride", 2)?,
                },
                "yolo" => {
                    let flat: Vec<f64> = parse_list(&get(&opts, "anchors").unwrap_or_default())?;
                    if !flat.len().is_multiple_of(2) {
                        return Err(cfg_err("odd number of anchor values"));
                    }
                    let anchors: Vec<(f64, f64)> = flat.chunks(2).map(|c| (c[0], c[1])).collect();
                    let mask = match get(&opts, "mask") {
                        Some(m) => parse_list(&m)?,
                        None => (0..anchors.len()).collect(),
                    };
                    if mask.iter().any(|&m| m >= anchors.len()) {
                        return Err(cfg_err("yolo mask refers to a missing anchor"));
                    }
                    Section::Yolo {
                        mask,
                        anchors,
                        classes: num(&opts, "classes", 80)?,
                    }
                }
                other => return Err(cfg_err(format!("unsupported section [{other}]"))),
            };
            sections.push(section);
        }
        Ok(Self {
            width,
            height,
            channels,
            sections,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Conv { conv: Conv2d, activation: Activation },
    Shortcut { from: usize },
    Route { from: Vec<usize> },
    Upsample { stride: usize },
    Yolo { anchors: Vec<(f64, f64)>, classes: usize },
}

/// A YOLOv3 network with folded batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct YoloV3 {
    config: DetectorConfig,
    nodes: Vec<Node>,
    /// Output shape of every node.
    shapes: Vec<[usize; 3]>,
}

struct Forward {
    /// Output of every node (conv outputs after activation).
    outputs: Vec<Tensor>,
    /// Pre-activation conv outputs, where applicable.
    pre: Vec<Option<Tensor>>,
    input: Tensor,
}

fn resolve(index: usize, rel: isize) -> Result<usize> {
    let abs = if rel < 0 { index as isize + rel } else { rel };
    if abs < 0 || abs as usize >= index {
        return Err(cfg_err(format!("layer {index} refers to invalid layer {rel}")));
    }
    Ok(abs as usize)
}

fn upsample(x: &Tensor, s: usize) -> Tensor {
    Tensor::from_fn(x.channels(), x.height() * s, x.width() * s, |c, y, xx| x.get(c, y / s, xx / s))
}

fn upsample_backward(g: &Tensor, s: usize) -> Tensor {
    let mut out = Tensor::zeros(g.channels(), g.height() / s, g.width() / s);
    for c in 0..g.channels() {
        for y in 0..g.height() {
            for x in 0..g.width() {
                out.add_at(c, y / s, x / s, g.get(c, y, x));
            }
        }
    }
    out
}

/// Weight source consumed in darknet order.
trait Source {
    fn take(&mut self, n: usize) -> Result<Vec<f64>>;
}

struct Blob<R: Read> {
    reader: R,
}

impl<R: Read> Source for Blob<R> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.reader
            .read_exact(&mut buf)
            .map_err(|e| Error::Config(format!("weights file too short: {e}")))?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }
}

struct Random(ChaCha8Rng);

impl Source for Random {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok((0..n).map(|_| self.0.random_range(0.5..1.5)).collect())
    }
}

impl YoloV3 {
    /// Loads a darknet `.cfg` and `.weights` pair.
    pub fn load(cfg_path: &Path, weights_path: &Path, class_names: Vec<String>) -> Result<Self> {
        let cfg = DarknetConfig::from_file(cfg_path)?;
        let file = std::fs::File::open(weights_path).map_err(|e| Error::io(weights_path, e))?;
        let mut reader = std::io::BufReader::new(file);
        let mut header = [0u8; 12];
        reader.read_exact(&mut header).map_err(|e| Error::io(weights_path, e))?;
        let major = i32::from_le_bytes(header[0..4].try_into().unwrap());
        let minor = i32::from_le_bytes(header[4..8].try_into().unwrap());
        let seen_len = if major * 10 + minor >= 2 { 8 } else { 4 };
        let mut seen = vec![0u8; seen_len];
        reader.read_exact(&mut seen).map_err(|e| Error::io(weights_path, e))?;
        let mut src = Blob { reader };
        let net = Self::build(&cfg, class_names, &mut src).map_err(|e| Error::Weights {
            path: weights_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut rest = Vec::new();
        src.reader.read_to_end(&mut rest).map_err(|e| Error::io(weights_path, e))?;
        if !rest.is_empty() {
            return Err(Error::Weights {
                path: weights_path.to_path_buf(),
                reason: format!("{} trailing bytes after the last layer", rest.len()),
            });
        }
        Ok(net)
    }

    /// Builds the network with random fan-in scaled weights; useful for tests.
    pub fn random(cfg: &DarknetConfig, class_names: Vec<String>, seed: u64, scale: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::build(cfg, class_names, &mut Random(rng.clone()))?;
        for node in &mut net.nodes {
            if let Node::Conv { conv, .. } = node {
                let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f64;
                let s = scale / fan_in.sqrt();
                conv.weight.iter_mut().for_each(|w| *w = s * rng.random_range(-1.0..1.0));
                conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        Ok(net)
    }

    fn build(cfg: &DarknetConfig, class_names: Vec<String>, src: &mut dyn Source) -> Result<Self> {
        if cfg.width != cfg.height {
            return Err(cfg_err("only square network inputs are supported"));
        }
        if cfg.channels != 3 {
            return Err(cfg_err("network input must have 3 channels"));
        }
        let mut nodes = Vec::with_capacity(cfg.sections.len());
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(cfg.sections.len());
        let input_shape = [cfg.channels, cfg.height, cfg.width];
        for (i, section) in cfg.sections.iter().enumerate() {
            let prev = if i == 0 { input_shape } else { shapes[i - 1] };
            let (node, shape) = match section {
                Section::Convolutional {
                    batch_normalize,
                    filters,
                    size,
                    stride,
                    pad,
                    activation,
                } => {
                    let mut conv = Conv2d::zeros(prev[0], *filters, *size, *stride, *pad);
                    let f = *filters;
                    if *batch_normalize {
                        let beta = src.take(f)?;
                        let gamma = src.take(f)?;
                        let mean = src.take(f)?;
                        let var = src.take(f)?;
                        conv.weight = src.take(conv.weight.len())?;
                        let k = conv.weight.len() / f;
                        for o in 0..f {
                            let s = gamma[o] / (var[o] + BN_EPS).sqrt();
                            conv.weight[o * k..(o + 1) * k].iter_mut().for_each(|w| *w *= s);
                            conv.bias[o] = beta[o] - mean[o] * s;
                        }
                    } else {
                        conv.bias = src.take(f)?;
                        conv.weight = src.take(conv.weight.len())?;
                    }
                    let h = (prev[1] + 2 * pad - size) / stride + 1;
                    let w = (prev[2] + 2 * pad - size) / stride + 1;
                    (
                        Node::Conv {
                            conv,
                            activation: *activation,
                        },
                        [f, h, w],
                    )
                }
                Section::Shortcut { from } => {
                    let j = resolve(i, *from)?;
                    if shapes[j] != prev {
                        return Err(cfg_err(format!("shortcut {i} joins mismatched shapes")));
                    }
                    (Node::Shortcut { from: j }, prev)
                }
                Section::Route { layers } => {
                    let from: Vec<usize> = layers.iter().map(|&l| resolve(i, l)).collect::<Result<_>>()?;
                    let first = shapes[from[0]];
                    let mut c = 0;
                    for &j in &from {
                        if shapes[j][1..] != first[1..] {
                            return Err(cfg_err(format!("route {i} joins mismatched spatial sizes")));
                        }
                        c += shapes[j][0];
                    }
                    (Node::Route { from }, [c, first[1], first[2]])
                }
                Section::Upsample { stride } => (Node::Upsample { stride: *stride }, [prev[0], prev[1] * stride, prev[2] * stride]),
                Section::Yolo { mask, anchors, classes } => {
                    if *classes != class_names.len() {
                        return Err(cfg_err(format!(
                            "yolo layer has {classes} classes but {} class names were given",
                            class_names.len()
                        )));
                    }
                    if prev[0] != mask.len() * (5 + classes) {
                        return Err(cfg_err(format!("yolo layer {i} expects {} channels", mask.len() * (5 + classes))));
                    }
                    (
                        Node::Yolo {
                            anchors: mask.iter().map(|&m| anchors[m]).collect(),
                            classes: *classes,
                        },
                        prev,
                    )
                }
            };
            nodes.push(node);
            shapes.push(shape);
        }
        Ok(Self {
            config: DetectorConfig::new(cfg.width, class_names),
            nodes,
            shapes,
        })
    }

    pub fn config_mut(&mut self) -> &mut DetectorConfig {
        &mut self.config
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if input.shape() != [3, s, s] {
            return Err(Error::Shape(format!("YOLO expects 3x{s}x{s} input, got {:?}", input.shape())));
        }
        Ok(())
    }

    fn forward(&self, input: &Tensor) -> Result<Forward> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut pre = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let (out, p) = match node {
                Node::Conv { conv, activation } => {
                    let z = conv.forward(x);
                    (z.map(|v| activation.apply(v)), Some(z))
                }
                Node::Shortcut { from } => {
                    let mut y = x.clone();
                    y.axpy(1.0, &outputs[*from]);
                    (y, None)
                }
                Node::Route { from } => {
                    let parts: Vec<&Tensor> = from.iter().map(|&j| &outputs[j]).collect();
                    (Tensor::concat_channels(&parts)?, None)
                }
                Node::Upsample { stride } => (upsample(x, *stride), None),
                Node::Yolo { .. } => (x.clone(), None),
            };
            outputs.push(out);
            pre.push(p);
        }
        Ok(Forward {
            outputs,
            pre,
            input: input.clone(),
        })
    }

    /// Backpropagates per-node output gradients (only YOLO heads are seeded).
    fn backward(&self, fwd: &Forward, mut grads: Vec<Option<Tensor>>) -> Tensor {
        let mut grad_input = Tensor::zeros(3, self.config.input_size, self.config.input_size);
        let accumulate = |slot: &mut Option<Tensor>, g: &Tensor| match slot {
            Some(t) => t.axpy(1.0, g),
            None => *slot = Some(g.clone()),
        };
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let to_prev = match &self.nodes[i] {
                Node::Conv { conv, activation } => {
                    let z = fwd.pre[i].as_ref().expect("conv pre-activation");
                    let y = &fwd.outputs[i];
                    let mut gz = g.clone();
                    for ((gv, &zv), &yv) in gz.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
                        *gv *= activation.derivative(zv, yv);
                    }
                    let x = if i == 0 { &fwd.input } else { &fwd.outputs[i - 1] };
                    Some(conv.backward(x, &gz, None))
                }
                Node::Shortcut { from } => {
                    accumulate(&mut grads[*from], &g);
                    Some(g)
                }
                Node::Route { from } => {
                    let counts: Vec<usize> = from.iter().map(|&j| self.shapes[j][0]).collect();
                    let parts = g.split_channels(&counts).expect("route split");
                    for (&j, part) in from.iter().zip(parts) {
                        accumulate(&mut grads[j], &part);
                    }
                    None
                }
                Node::Upsample { stride } => Some(upsample_backward(&g, *stride)),
                Node::Yolo { .. } => Some(g),
            };
            if let Some(gp) = to_prev {
                if i == 0 {
                    grad_input.axpy(1.0, &gp);
                } else {
                    accumulate(&mut grads[i - 1], &gp);
                }
            }
        }
        grad_input
    }

    fn heads(&self) -> impl Iterator<Item = (usize, &Vec<(f64, f64)>, usize)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n {
            Node::Yolo { anchors, classes } => Some((i, anchors, *classes)),
            _ => None,
        })
    }

    fn decode(&self, fwd: &Forward) -> Vec<Prediction> {
        let size = self.config.input_size as f64;
        let mut preds = Vec::new();
        for (i, anchors, classes) in self.heads() {
            let t = &fwd.outputs[i];
            let (gh, gw) = (t.height(), t.width());
            let stride = size / gw as f64;
            let stride_y = size / gh as f64;
            let per = 5 + classes;
            for (a, &(aw, ah)) in anchors.iter().enumerate() {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let ch = |k: usize| t.get(a * per + k, gy, gx);
                        let cx = (gx as f64 + sigmoid(ch(0))) * stride;
                        let cy = (gy as f64 + sigmoid(ch(1))) * stride_y;
                        let w = aw * ch(2).exp();
                        let h = ah * ch(3).exp();
                        preds.push(Prediction {
                            bbox: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
                            objectness: sigmoid(ch(4)),
                            class_probs: (0..classes).map(|c| sigmoid(ch(5 + c))).collect(),
                        });
                    }
                }
            }
        }
        preds
    }

    /// Responsible (head, anchor, cell) for a label: best shape-IoU anchor
    /// over all heads, cell containing the box centre.
    fn assign(&self, label: &GroundTruthLabel) -> Option<(usize, usize, usize, usize)> {
        let (w, h) = (label.bbox[2] - label.bbox[0], label.bbox[3] - label.bbox[1]);
        if w <= 0.0 || h <= 0.0 {
            return None;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, anchors, _) in self.heads() {
            for (a, &(aw, ah)) in anchors.iter().enumerate() {
                let score = iou(&[0.0, 0.0, w, h], &[0.0, 0.0, aw, ah]);
                if best.is_none_or(|b| score > b.0) {
                    best = Some((score, i, a));
                }
            }
        }
        let (_, i, a) = best?;
        let [_, gh, gw] = self.shapes[i];
        let size = self.config.input_size as f64;
        let cx = (label.bbox[0] + label.bbox[2]) / 2.0;
        let cy = (label.bbox[1] + label.bbox[3]) / 2.0;
        let gx = ((cx / size * gw as f64).floor().max(0.0) as usize).min(gw - 1);
        let gy = ((cy / size * gh as f64).floor().max(0.0) as usize).min(gh - 1);
        Some((i, a, gy, gx))
    }
}

impl Detector for YoloV3 {
    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn predict(&self, input: &Tensor) -> Result<Vec<Prediction>> {
        let fwd = self.forward(input)?;
        Ok(self.decode(&fwd))
    }

    /// Objectness binary cross-entropy over every anchor and cell. With no
    /// labels every anchor is a negative, so the loss is `Σ softplus(t_obj)`.
    /// Responsible anchors of labelled boxes take a positive objectness
    /// target, per-class binary cross-entropy, and squared box-offset errors.
    fn loss(&self, input: &Tensor, labels: &[GroundTruthLabel], with_grad: bool) -> Result<LossOutput> {
        let fwd = self.forward(input)?;
        let size = self.config.input_size as f64;
        let assigned: Vec<((usize, usize, usize, usize), &GroundTruthLabel)> =
            labels.iter().filter_map(|l| self.assign(l).map(|a| (a, l))).collect();
        let mut loss = 0.0;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, anchors, classes) in self.heads() {
            let t = &fwd.outputs[i];
            let per = 5 + classes;
            let mut g = Tensor::zeros(t.channels(), t.height(), t.width());
            for a in 0..anchors.len() {
                for gy in 0..t.height() {
                    for gx in 0..t.width() {
                        let positive = assigned.iter().find(|(k, _)| *k == (i, a, gy, gx));
                        let to = t.get(a * per + 4, gy, gx);
                        let p = sigmoid(to);
                        match positive {
                            None => {
                                loss += softplus(to);
                                g.set(a * per + 4, gy, gx, p);
                            }
                            Some((_, label)) => {
                                loss += softplus(-to);
                                g.set(a * per + 4, gy, gx, p - 1.0);
                                for c in 0..classes {
                                    let tc = t.get(a * per + 5 + c, gy, gx);
                                    let target = (c == label.class_id) as u8 as f64;
                                    loss += softplus(tc) - target * tc;
                                    g.set(a * per + 5 + c, gy, gx, sigmoid(tc) - target);
                                }
                                let stride_x = size / t.width() as f64;
                                let stride_y = size / t.height() as f64;
                                let (aw, ah) = anchors[a];
                                let b = label.bbox;
                                let targets = [
                                    ((b[0] + b[2]) / 2.0 / stride_x - gx as f64, true),
                                    ((b[1] + b[3]) / 2.0 / stride_y - gy as f64, true),
                                    (((b[2] - b[0]) / aw).ln(), false),
                                    (((b[3] - b[1]) / ah).ln(), false),
                                ];
                                for (k, (target, squashed)) in targets.into_iter().enumerate() {
                                    let tk = t.get(a * per + k, gy, gx);
                                    let (v, dv) = if squashed {
                                        let s = sigmoid(tk);
                                        (s, s * (1.0 - s))
                                    } else {
                                        (tk, 1.0)
                                    };
                                    loss += (v - target) * (v - target);
                                    g.set(a * per + k, gy, gx, 2.0 * (v - target) * dv);
                                }
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        let predictions = self.decode(&fwd);
        let grad = with_grad.then(|| self.backward(&fwd, grads));
        Ok(LossOutput { loss, grad, predictions })
    }
}
