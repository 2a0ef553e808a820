//! Latent-to-image generators, discriminators and the GAN training step.
//!
//! Generators map a latent vector to a native-resolution [`Patch`]. The last
//! network layer is `tanh`; [`Generator::generate`] maps its output to
//! `[0, 1]` with `(t + 1) / 2`.

mod discriminator;
mod gan;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvTranspose2d, Gradients, Init, Layer, Linear, Network, Trace};
use crate::patch::{check_alpha, interpolate, LatentShift, Patch};
use crate::tensor::Tensor;
use crate::weights;

pub use discriminator::{Discriminator, DiscriminatorArch};
pub use gan::{
    discriminator_step, gan_train_step, generator_step, sample_batch, sample_latents, train_gan, train_gan_epoch, GanConfig,
    GanLosses, GanTrainState,
};

const GENERATOR_KIND: &str = "generator";

/// Reference class for the conditional generator.
pub const DAISY_CLASS: usize = 985;

/// Generator input: a continuous latent and, for conditional generators, a
/// class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub z: Vec<f64>,
    pub class_id: Option<usize>,
}

impl LatentVector {
    pub fn new(z: Vec<f64>, class_id: Option<usize>) -> Self {
        Self { z, class_id }
    }

    /// Draws `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(dim: usize, class_id: Option<usize>, rng: &mut R) -> Self {
        Self {
            z: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            class_id,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }
}

impl LatentShift for LatentVector {
    /// Interpolates `z`; the class index is kept. No range projection applies.
    fn latent_shift(&self, mask: &Self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if self.z.len() != mask.z.len() {
            return Err(Error::Shape(format!(
                "latent shift mask has {} values, latent has {}",
                mask.z.len(),
                self.z.len()
            )));
        }
        Ok(Self {
            z: interpolate(&self.z, &mask.z, alpha),
            class_id: self.class_id,
        })
    }
}

/// Generator architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorArch {
    /// Transposed-convolution stack: `1×1 → 4×4`, then stride-2 doublings up
    /// to `output_size` (a power of two, at least 8). Channels halve per
    /// block from `base_channels · 2^(blocks−1)`.
    Dcgan {
        latent_dim: usize,
        base_channels: usize,
        output_size: usize,
    },
    /// Fully connected stack with leaky-ReLU hidden layers.
    Mlp {
        latent_dim: usize,
        hidden: Vec<usize>,
        output_size: usize,
    },
    /// Fully connected stack over `[z, one_hot(class_id)]`.
    Conditional {
        latent_dim: usize,
        num_classes: usize,
        hidden: Vec<usize>,
        output_size: usize,
    },
}

const HIDDEN_ACT: Activation = Activation::LeakyRelu { slope: 0.2 };

impl GeneratorArch {
    /// The reference DCGAN shape: 100-dim latent, 64×64 output.
    pub fn dcgan64() -> Self {
        GeneratorArch::Dcgan {
            latent_dim: 100,
            base_channels: 64,
            output_size: 64,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            GeneratorArch::Dcgan { latent_dim, .. }
            | GeneratorArch::Mlp { latent_dim, .. }
            | GeneratorArch::Conditional { latent_dim, .. } => *latent_dim,
        }
    }

    pub fn output_size(&self) -> usize {
        match self {
            GeneratorArch::Dcgan { output_size, .. }
            | GeneratorArch::Mlp { output_size, .. }
            | GeneratorArch::Conditional { output_size, .. } => *output_size,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            GeneratorArch::Conditional { num_classes, .. } => Some(*num_classes),
            _ => None,
        }
    }

    fn input_len(&self) -> usize {
        self.latent_dim() + self.num_classes().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim() == 0 || self.output_size() == 0 {
            return Err(Error::Config("generator needs a nonzero latent size and output size".into()));
        }
        match self {
            GeneratorArch::Dcgan {
                base_channels,
                output_size,
                ..
            } => {
                if *base_channels == 0 || !output_size.is_power_of_two() || *output_size < 8 {
                    return Err(Error::Config(format!(
                        "DCGAN output size must be a power of two >= 8, got {output_size}"
                    )));
                }
            }
            GeneratorArch::Conditional { num_classes, .. } if *num_classes == 0 => {
                return Err(Error::Config("conditional generator needs at least one class".into()));
            }
            _ => {}
        }
        Ok(())
    }

    fn build(&self) -> Network {
        let s = self.output_size();
        let mut layers = Vec::new();
        match self {
            GeneratorArch::Dcgan {
                latent_dim,
                base_channels,
                ..
            } => {
                let blocks = (s / 4).trailing_zeros() as usize;
                let mut ch = base_channels << blocks.saturating_sub(1);
                layers.push(Layer::ConvTranspose2d(ConvTranspose2d::zeros(*latent_dim, ch, 4, 1, 0)));
                layers.push(Layer::Activation(Activation::Relu));
                for b in 0..blocks {
                    let last = b + 1 == blocks;
                    let out = if last { 3 } else { ch / 2 };
                    layers.push(Layer::ConvTranspose2d(ConvTranspose2d::zeros(ch, out, 4, 2, 1)));
                    if !last {
                        layers.push(Layer::Activation(Activation::Relu));
                    }
                    ch = out;
                }
            }
            GeneratorArch::Mlp { hidden, .. } | GeneratorArch::Conditional { hidden, .. } => {
                let mut width = self.input_len();
                for &h in hidden {
                    layers.push(Layer::Linear(Linear::zeros(width, h)));
                    layers.push(Layer::Activation(HIDDEN_ACT));
                    width = h;
                }
                layers.push(Layer::Linear(Linear::zeros(width, 3 * s * s)));
                layers.push(Layer::Reshape {
                    channels: 3,
                    height: s,
                    width: s,
                });
            }
        }
        layers.push(Layer::Activation(Activation::Tanh));
        Network::new(layers)
    }

    fn default_init(&self) -> Init {
        match self {
            GeneratorArch::Dcgan { .. } => Init::Normal { std: 0.02 },
            _ => Init::FanIn { gain: 1.0 },
        }
    }
}

/// Intermediate values of one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    trace: Trace,
    patch: Patch,
}

impl GeneratorTrace {
    pub fn patch(&self) -> &Patch {
        &self.patch
    }
}

/// A generator with a trainable flag. Frozen generators refuse parameter
/// updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    arch: GeneratorArch,
    net: Network,
    trainable: bool,
}

impl Generator {
    /// Randomly initialised, trainable generator.
    pub fn new<R: Rng + ?Sized>(arch: GeneratorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut net = arch.build();
        net.init(arch.default_init(), rng);
        Ok(Self {
            arch,
            net,
            trainable: true,
        })
    }

    /// Generator with every parameter zero.
    pub fn zeros(arch: GeneratorArch) -> Result<Self> {
        arch.validate()?;
        let net = arch.build();
        Ok(Self {
            arch,
            net,
            trainable: true,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Mutable parameter access; fails on a frozen generator.
    pub fn network_mut(&mut self) -> Result<&mut Network> {
        if !self.trainable {
            return Err(Error::Contract("generator is frozen; its parameters cannot change".into()));
        }
        Ok(&mut self.net)
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn freeze(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    pub fn output_size(&self) -> usize {
        self.arch.output_size()
    }

    /// Draws a latent from the prior; conditional generators need `class_id`.
    pub fn sample_latent<R: Rng + ?Sized>(&self, class_id: Option<usize>, rng: &mut R) -> LatentVector {
        LatentVector::sample(self.latent_dim(), class_id, rng)
    }

    fn input(&self, z: &LatentVector) -> Result<Tensor> {
        if z.dim() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent has {} values, generator expects {}",
                z.dim(),
                self.latent_dim()
            )));
        }
        if !z.is_finite() {
            return Err(Error::Shape("latent contains non-finite values".into()));
        }
        let mut data = z.z.clone();
        match (self.arch.num_classes(), z.class_id) {
            (Some(n), Some(c)) if c < n => {
                let mut one_hot = vec![0.0; n];
                one_hot[c] = 1.0;
                data.extend(one_hot);
            }
            (Some(n), Some(c)) => {
                return Err(Error::Config(format!("class {c} outside the generator's {n} classes")));
            }
            (Some(_), None) => {
                return Err(Error::Contract("conditional generator needs a class id".into()));
            }
            (None, _) => {}
        }
        let n = data.len();
        Ok(match self.arch {
            GeneratorArch::Dcgan { .. } => Tensor::from_vec(n, 1, 1, data)?,
            _ => Tensor::vector(data),
        })
    }

    pub fn generate(&self, z: &LatentVector) -> Result<Patch> {
        let out = self.net.forward(&self.input(z)?)?;
        Patch::new(out.map(|t| (t + 1.0) / 2.0))
    }

    pub fn trace(&self, z: &LatentVector) -> Result<GeneratorTrace> {
        let trace = self.net.forward_trace(&self.input(z)?)?;
        let patch = Patch::new(trace.output().map(|t| (t + 1.0) / 2.0))?;
        Ok(GeneratorTrace { trace, patch })
    }

    /// Backpropagates `∂L/∂patch` to the latent, accumulating parameter
    /// gradients into `grads` when given. Returns `∂L/∂z`.
    pub fn backward(&self, trace: &GeneratorTrace, grad_patch: &Tensor, grads: Option<&mut Gradients>) -> Vec<f64> {
        let g = grad_patch.map(|v| 0.5 * v);
        let gin = self.net.backward(&trace.trace, &g, grads);
        gin.data()[..self.latent_dim()].to_vec()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.net.zero_grads()
    }

    /// SHA-256 over all parameters.
    pub fn digest(&self) -> String {
        weights::digest(self.net.params())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, GENERATOR_KIND, &self.arch, &self.net.params())
    }

    /// Loads a trainable generator.
    pub fn load(path: &Path) -> Result<Self> {
        let (arch, tensors): (GeneratorArch, _) = weights::load(path, GENERATOR_KIND)?;
        let mut gen = Self::zeros(arch).map_err(|e| Error::Weights {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        gen.net.load_params(&tensors).map_err(|e| Error::Weights {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(gen)
    }

    /// Loads a frozen generator, checking its architecture when `expected`
    /// is given.
    pub fn load_pretrained(path: &Path, expected: Option<&GeneratorArch>) -> Result<Self> {
        let gen = Self::load(path)?;
        if let Some(arch) = expected {
            if arch != gen.arch() {
                return Err(Error::Weights {
                    path: path.to_path_buf(),
                    reason: format!("architecture {:?} does not match declared {:?}", gen.arch, arch),
                });
            }
        }
        Ok(gen.freeze())
    }
}
