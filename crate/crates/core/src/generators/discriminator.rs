use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, Gradients, Init, Layer, Linear, Network, Trace};
use crate::tensor::Tensor;
use crate::weights;

const KIND: &str = "discriminator";
const LEAKY: Activation = Activation::LeakyRelu { slope: 0.2 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscriminatorArch {
    /// Mirror of the DCGAN generator: stride-2 4×4 convolutions down to 4×4,
    /// then a 4×4 convolution to one logit.
    Dcgan { base_channels: usize, input_size: usize },
    Mlp { hidden: Vec<usize>, input_size: usize },
}

impl DiscriminatorArch {
    pub fn input_size(&self) -> usize {
        match self {
            DiscriminatorArch::Dcgan { input_size, .. } | DiscriminatorArch::Mlp { input_size, .. } => *input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DiscriminatorArch::Dcgan {
            base_channels,
            input_size,
        } = self
        {
            if *base_channels == 0 || !input_size.is_power_of_two() || *input_size < 8 {
                return Err(Error::Config(format!(
                    "DCGAN discriminator input must be a power of two >= 8, got {input_size}"
                )));
            }
        }
        Ok(())
    }

    fn build(&self) -> Network {
        let mut layers = Vec::new();
        match self {
            DiscriminatorArch::Dcgan {
                base_channels,
                input_size,
            } => {
                let blocks = (input_size / 4).trailing_zeros() as usize;
                let mut ch_in = 3;
                let mut ch = *base_channels;
                for _ in 0..blocks {
                    layers.push(Layer::Conv2d(Conv2d::zeros(ch_in, ch, 4, 2, 1)));
                    layers.push(Layer::Activation(LEAKY));
                    ch_in = ch;
                    ch *= 2;
                }
                layers.push(Layer::Conv2d(Conv2d::zeros(ch_in, 1, 4, 1, 0)));
            }
            DiscriminatorArch::Mlp { hidden, input_size } => {
                let mut width = 3 * input_size * input_size;
                for &h in hidden {
                    layers.push(Layer::Linear(Linear::zeros(width, h)));
                    layers.push(Layer::Activation(LEAKY));
                    width = h;
                }
                layers.push(Layer::Linear(Linear::zeros(width, 1)));
            }
        }
        Network::new(layers)
    }
}

/// Real-vs-fake classifier producing one logit per image in `[0, 1]`. Inputs
/// are mapped to `[-1, 1]` internally to match the generator's tanh range.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    arch: DiscriminatorArch,
    net: Network,
}

pub struct DiscriminatorTrace {
    trace: Trace,
}

impl DiscriminatorTrace {
    pub fn logit(&self) -> f64 {
        self.trace.output().data()[0]
    }
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(arch: DiscriminatorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut net = arch.build();
        let init = match arch {
            DiscriminatorArch::Dcgan { .. } => Init::Normal { std: 0.02 },
            DiscriminatorArch::Mlp { .. } => Init::FanIn { gain: 1.0 },
        };
        net.init(init, rng);
        Ok(Self { arch, net })
    }

    pub fn arch(&self) -> &DiscriminatorArch {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    fn input(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.arch.input_size();
        if image.shape() != [3, s, s] {
            return Err(Error::Shape(format!(
                "discriminator expects 3x{s}x{s}, got {:?}",
                image.shape()
            )));
        }
        Ok(image.map(|v| 2.0 * v - 1.0))
    }

    pub fn logit(&self, image: &Tensor) -> Result<f64> {
        Ok(self.net.forward(&self.input(image)?)?.data()[0])
    }

    pub fn trace(&self, image: &Tensor) -> Result<DiscriminatorTrace> {
        Ok(DiscriminatorTrace {
            trace: self.net.forward_trace(&self.input(image)?)?,
        })
    }

    /// Backpropagates `∂L/∂logit`; returns `∂L/∂image` and accumulates
    /// parameter gradients when `grads` is given.
    pub fn backward(&self, trace: &DiscriminatorTrace, grad_logit: f64, grads: Option<&mut Gradients>) -> Tensor {
        let out = trace.trace.output();
        let seed = Tensor::from_vec(out.channels(), out.height(), out.width(), vec![grad_logit])
            .expect("scalar discriminator output");
        let g = self.net.backward(&trace.trace, &seed, grads);
        g.map(|v| 2.0 * v)
    }

    pub fn zero_grads(&self) -> Gradients {
        self.net.zero_grads()
    }

    pub fn digest(&self) -> String {
        weights::digest(self.net.params())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, KIND, &self.arch, &self.net.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (arch, tensors): (DiscriminatorArch, _) = weights::load(path, KIND)?;
        let bad = |e: Error| Error::Weights {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        arch.validate().map_err(bad)?;
        let mut net = arch.build();
        net.load_params(&tensors).map_err(bad)?;
        Ok(Self { arch, net })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dcgan_discriminator_emits_one_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::new(
            DiscriminatorArch::Dcgan {
                base_channels: 4,
                input_size: 16,
            },
            &mut rng,
        )
        .unwrap();
        let img = Tensor::filled(3, 16, 16, 0.7);
        let tr = d.trace(&img).unwrap();
        assert_eq!(tr.logit(), d.logit(&img).unwrap());
        let g = d.backward(&tr, 1.0, None);
        assert_eq!(g.shape(), [3, 16, 16]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Discriminator::new(
            DiscriminatorArch::Mlp {
                hidden: vec![5],
                input_size: 3,
            },
            &mut rng,
        )
        .unwrap();
        let img = Tensor::from_fn(3, 3, 3, |c, y, x| ((c * 9 + y * 3 + x) as f64 * 0.37).fract());
        let g = d.backward(&d.trace(&img).unwrap(), 1.0, None);
        for i in 0..img.len() {
            let mut p = img.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = img.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (d.logit(&p).unwrap() - d.logit(&m).unwrap()) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6, "{fd} vs {}", g.data()[i]);
        }
    }
}
