use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::conv::{col2im, conv_out, deconv_out, gemm, im2col, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and the activation value `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fully connected layer over the flattened input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out × in × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.height(), x.width());
        let ho = conv_out(h, self.kernel, self.stride, self.pad);
        let wo = conv_out(w, self.kernel, self.stride, self.pad);
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = im2col(x.data(), self.in_channels, h, w, self.kernel, self.stride, self.pad);
        let mut out = vec![0.0; self.out_channels * ho * wo];
        for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.fill(self.bias[o]);
        }
        gemm(
            Mat::new(&self.weight, self.out_channels, kk),
            Mat::new(&cols, kk, ho * wo),
            1.0,
            &mut out,
        );
        Tensor::from_vec(self.out_channels, ho, wo, out).expect("conv output shape")
    }

    /// Returns the input gradient; accumulates `[dW, db]` when `grads` is given.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: Option<(&mut [f64], &mut [f64])>) -> Tensor {
        let (h, w) = (x.height(), x.width());
        let (ho, wo) = (grad_out.height(), grad_out.width());
        let kk = self.in_channels * self.kernel * self.kernel;
        let g = Mat::new(grad_out.data(), self.out_channels, ho * wo);
        if let Some((dw, db)) = grads {
            let cols = im2col(x.data(), self.in_channels, h, w, self.kernel, self.stride, self.pad);
            gemm(g, Mat::new(&cols, kk, ho * wo).t(), 1.0, dw);
            for (o, chunk) in grad_out.data().chunks(ho * wo).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        let mut dcols = vec![0.0; kk * ho * wo];
        gemm(Mat::new(&self.weight, self.out_channels, kk).t(), g, 0.0, &mut dcols);
        let dx = col2im(&dcols, self.in_channels, h, w, self.kernel, self.stride, self.pad);
        Tensor::from_vec(self.in_channels, h, w, dx).expect("conv input shape")
    }
}

/// Fractionally strided convolution, as used by DCGAN generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `in × out × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvTranspose2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: vec![0.0; in_channels * out_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (hi, wi) = (x.height(), x.width());
        let ho = deconv_out(hi, self.kernel, self.stride, self.pad);
        let wo = deconv_out(wi, self.kernel, self.stride, self.pad);
        let kk = self.out_channels * self.kernel * self.kernel;
        let mut cols = vec![0.0; kk * hi * wi];
        gemm(
            Mat::new(&self.weight, self.in_channels, kk).t(),
            Mat::new(x.data(), self.in_channels, hi * wi),
            0.0,
            &mut cols,
        );
        let mut out = col2im(&cols, self.out_channels, ho, wo, self.kernel, self.stride, self.pad);
        for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
            for v in chunk {
                *v += self.bias[o];
            }
        }
        Tensor::from_vec(self.out_channels, ho, wo, out).expect("deconv output shape")
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: Option<(&mut [f64], &mut [f64])>) -> Tensor {
        let (hi, wi) = (x.height(), x.width());
        let (ho, wo) = (grad_out.height(), grad_out.width());
        let kk = self.out_channels * self.kernel * self.kernel;
        let dcols = im2col(grad_out.data(), self.out_channels, ho, wo, self.kernel, self.stride, self.pad);
        let dc = Mat::new(&dcols, kk, hi * wi);
        if let Some((dw, db)) = grads {
            gemm(Mat::new(x.data(), self.in_channels, hi * wi), dc.t(), 1.0, dw);
            for (o, chunk) in grad_out.data().chunks(ho * wo).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        let mut dx = vec![0.0; self.in_channels * hi * wi];
        gemm(Mat::new(&self.weight, self.in_channels, kk), dc, 0.0, &mut dx);
        Tensor::from_vec(self.in_channels, hi, wi, dx).expect("deconv input shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Activation(Activation),
    /// Reinterprets the flattened input as C×H×W.
    Reshape { channels: usize, height: usize, width: usize },
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => {
                if x.len() != l.inputs {
                    return Err(Error::Shape(format!(
                        "linear layer expects {} inputs, got {}",
                        l.inputs,
                        x.len()
                    )));
                }
                let mut out = l.bias.clone();
                gemm(
                    Mat::new(&l.weight, l.outputs, l.inputs),
                    Mat::new(x.data(), l.inputs, 1),
                    1.0,
                    &mut out,
                );
                Ok(Tensor::vector(out))
            }
            Layer::Conv2d(c) => {
                if x.channels() != c.in_channels {
                    return Err(Error::Shape(format!(
                        "conv expects {} channels, got {}",
                        c.in_channels,
                        x.channels()
                    )));
                }
                if x.height() + 2 * c.pad < c.kernel || x.width() + 2 * c.pad < c.kernel {
                    return Err(Error::Shape(format!("input {:?} smaller than conv kernel", x.shape())));
                }
                Ok(c.forward(x))
            }
            Layer::ConvTranspose2d(c) => {
                if x.channels() != c.in_channels {
                    return Err(Error::Shape(format!(
                        "transposed conv expects {} channels, got {}",
                        c.in_channels,
                        x.channels()
                    )));
                }
                Ok(c.forward(x))
            }
            Layer::Activation(a) => Ok(x.map(|v| a.apply(v))),
            Layer::Reshape {
                channels,
                height,
                width,
            } => x.clone().reshape(*channels, *height, *width),
        }
    }

    /// Backpropagates through the layer given its input and output.
    pub fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        grad_out: &Tensor,
        grads: Option<&mut [Vec<f64>]>,
    ) -> Tensor {
        match self {
            Layer::Linear(l) => {
                if let Some(g) = grads {
                    let (dw, db) = split_pair(g);
                    let go = grad_out.data();
                    let xi = input.data();
                    for o in 0..l.outputs {
                        let row = &mut dw[o * l.inputs..(o + 1) * l.inputs];
                        for (r, &x) in row.iter_mut().zip(xi) {
                            *r += go[o] * x;
                        }
                        db[o] += go[o];
                    }
                }
                let mut dx = vec![0.0; l.inputs];
                gemm(
                    Mat::new(&l.weight, l.outputs, l.inputs).t(),
                    Mat::new(grad_out.data(), l.outputs, 1),
                    0.0,
                    &mut dx,
                );
                let [c, h, w] = input.shape();
                Tensor::from_vec(c, h, w, dx).expect("linear input shape")
            }
            Layer::Conv2d(c) => c.backward(input, grad_out, grads.map(split_pair)),
            Layer::ConvTranspose2d(c) => c.backward(input, grad_out, grads.map(split_pair)),
            Layer::Activation(a) => {
                let mut dx = grad_out.clone();
                for ((d, &x), &y) in dx.data_mut().iter_mut().zip(input.data()).zip(output.data()) {
                    *d *= a.derivative(x, y);
                }
                dx
            }
            Layer::Reshape { .. } => {
                let [c, h, w] = input.shape();
                grad_out.clone().reshape(c, h, w).expect("reshape backward")
            }
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::ConvTranspose2d(c) => vec![&c.weight, &c.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose2d(c) => vec![&mut c.weight, &mut c.bias],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Linear(l) => l.inputs,
            Layer::Conv2d(c) => c.in_channels * c.kernel * c.kernel,
            Layer::ConvTranspose2d(c) => c.in_channels * c.kernel * c.kernel / (c.stride * c.stride).max(1),
            _ => 0,
        }
    }
}

fn split_pair(g: &mut [Vec<f64>]) -> (&mut [f64], &mut [f64]) {
    let (w, b) = g.split_at_mut(1);
    (&mut w[0], &mut b[0])
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Weights ~ N(0, std), biases zero (DCGAN convention uses std = 0.02).
    Normal { std: f64 },
    /// Weights ~ U(-g/sqrt(fan_in), g/sqrt(fan_in)), biases zero.
    FanIn { gain: f64 },
}

/// A feed-forward chain of layers with explicit reverse-mode differentiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Network::forward_trace`]; `values[i]` is the
/// input to layer `i` and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub values: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("trace has at least the input")
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<Trace> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(values.last().unwrap())?;
            values.push(next);
        }
        Ok(Trace { values })
    }

    /// Gradient of a scalar loss with respect to the network input, given the
    /// gradient at the output. Parameter gradients are accumulated into
    /// `grads` (laid out like [`Network::params`]) when provided.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor, mut grads: Option<&mut Gradients>) -> Tensor {
        let offsets = self.param_offsets();
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let slot = grads.as_deref_mut().and_then(|gr| {
                let n = layer.params().len();
                (n > 0).then(|| &mut gr.tensors[offsets[i]..offsets[i] + n])
            });
            g = layer.backward(&trace.values[i], &trace.values[i + 1], &g, slot);
        }
        g
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let start = acc;
                acc += l.params().len();
                start
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            tensors: self.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, init: Init, rng: &mut R) {
        for layer in &mut self.layers {
            let fan_in = layer.fan_in().max(1);
            let mut ps = layer.params_mut();
            if ps.is_empty() {
                continue;
            }
            let bias = ps.pop().unwrap();
            bias.fill(0.0);
            let weight = ps.pop().unwrap();
            match init {
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    for w in weight.iter_mut() {
                        *w = dist.sample(rng);
                    }
                }
                Init::FanIn { gain } => {
                    let bound = gain / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    for w in weight.iter_mut() {
                        *w = dist.sample(rng);
                    }
                }
            }
        }
    }

    /// Overwrites all parameters from flat tensors in [`Network::params`] order.
    pub fn load_params(&mut self, tensors: &[Vec<f64>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "network has {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, src)) in slots.iter_mut().zip(tensors).enumerate() {
            if slot.len() != src.len() {
                return Err(Error::Shape(format!(
                    "parameter tensor {i} has {} values, got {}",
                    slot.len(),
                    src.len()
                )));
            }
            slot.copy_from_slice(src);
        }
        Ok(())
    }
}

/// Parameter gradients aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for v in t {
                *v *= alpha;
            }
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of input and parameter gradients for
    /// `loss = sum(w_i * out_i)` with fixed random `w`.
    fn check_network(mut net: Network, input: Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        net.init(Init::FanIn { gain: 1.5 }, &mut rng);
        for p in net.params_mut() {
            for v in p.iter_mut() {
                *v += 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        let out = net.forward(&input).unwrap();
        let probe = Tensor::from_fn(out.channels(), out.height(), out.width(), |c, y, x| {
            ((c * 31 + y * 7 + x) as f64 * 0.7).sin()
        });
        let loss = |n: &Network, x: &Tensor| -> f64 {
            let o = n.forward(x).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let trace = net.forward_trace(&input).unwrap();
        let mut grads = net.zero_grads();
        let dx = net.backward(&trace, &probe, Some(&mut grads));

        let h = 1e-6;
        for i in 0..input.len() {
            let mut xp = input.clone();
            xp.data_mut()[i] += h;
            let mut xm = input.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", dx.data()[i]);
        }
        let n_tensors = net.params().len();
        for t in 0..n_tensors {
            let len = net.params()[t].len();
            for j in (0..len).step_by((len / 7).max(1)) {
                let mut np = net.clone();
                np.params_mut()[t][j] += h;
                let mut nm = net.clone();
                nm.params_mut()[t][j] -= h;
                let fd = (loss(&np, &input) - loss(&nm, &input)) / (2.0 * h);
                let an = grads.tensors[t][j];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {t}/{j}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn conv_stack_gradients() {
        let net = Network::new(vec![
            Layer::Conv2d(Conv2d::zeros(2, 3, 3, 1, 1)),
            Layer::Activation(Activation::Tanh),
            Layer::Conv2d(Conv2d::zeros(3, 2, 2, 2, 0)),
            Layer::Activation(Activation::Sigmoid),
        ]);
        let input = Tensor::from_fn(2, 6, 6, |c, y, x| ((c + 2 * y + 3 * x) as f64 * 0.3).cos());
        check_network(net, input);
    }

    #[test]
    fn deconv_stack_gradients() {
        let net = Network::new(vec![
            Layer::Linear(Linear::zeros(4, 12)),
            Layer::Activation(Activation::LeakyRelu { slope: 0.2 }),
            Layer::Reshape {
                channels: 3,
                height: 2,
                width: 2,
            },
            Layer::ConvTranspose2d(ConvTranspose2d::zeros(3, 2, 4, 2, 1)),
            Layer::Activation(Activation::Tanh),
        ]);
        let input = Tensor::vector(vec![0.3, -0.7, 1.1, 0.05]);
        check_network(net, input);
    }

    #[test]
    fn deconv_output_size_doubles() {
        let layer = ConvTranspose2d::zeros(1, 1, 4, 2, 1);
        assert_eq!(layer.forward(&Tensor::zeros(1, 4, 4)).shape(), [1, 8, 8]);
        let first = ConvTranspose2d::zeros(1, 1, 4, 1, 0);
        assert_eq!(first.forward(&Tensor::zeros(1, 1, 1)).shape(), [1, 4, 4]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
    }
}
