use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Discriminator, Generator, LatentVector};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Adam, Gradients};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Class index fed to a conditional generator during training.
    #[serde(default)]
    pub class_id: Option<usize>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            batch_size: 64,
            beta1: 0.5,
            beta2: 0.999,
            class_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Fraction of real and fake samples the discriminator classified
    /// correctly before its update.
    pub d_accuracy: f64,
}

/// Generator, discriminator and their optimisers.
#[derive(Debug, Clone)]
pub struct GanTrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub config: GanConfig,
    pub steps: u64,
    pub history: Vec<GanLosses>,
}

impl GanTrainState {
    pub fn new(generator: Generator, discriminator: Discriminator, config: GanConfig) -> Result<Self> {
        if !generator.is_trainable() {
            return Err(Error::Contract("GAN training needs a trainable generator".into()));
        }
        if generator.output_size() != discriminator.arch().input_size() {
            return Err(Error::Config(format!(
                "generator outputs {0}x{0} but the discriminator takes {1}x{1}",
                generator.output_size(),
                discriminator.arch().input_size()
            )));
        }
        if !(config.lr >= 0.0) || config.batch_size == 0 {
            return Err(Error::Config("GAN learning rate must be >= 0 and batch size >= 1".into()));
        }
        Ok(Self {
            g_opt: Adam::new(config.lr, config.beta1, config.beta2, 1e-8),
            d_opt: Adam::new(config.lr, config.beta1, config.beta2, 1e-8),
            generator,
            discriminator,
            config,
            steps: 0,
            history: Vec::new(),
        })
    }

    pub fn record(&mut self, losses: GanLosses) {
        self.steps += 1;
        self.history.push(losses);
    }

    fn non_finite(&self, quantity: &'static str) -> Error {
        Error::NonFinite {
            quantity,
            epoch: self.steps as usize,
            step: 0,
        }
    }
}

/// `n` latents from the prior.
pub fn sample_latents<R: Rng + ?Sized>(
    generator: &Generator,
    n: usize,
    class_id: Option<usize>,
    rng: &mut R,
) -> Vec<LatentVector> {
    (0..n).map(|_| generator.sample_latent(class_id, rng)).collect()
}

/// `batch_size` images drawn uniformly with replacement.
pub fn sample_batch<'a, R: Rng + ?Sized>(corpus: &'a [Tensor], batch_size: usize, rng: &mut R) -> Vec<&'a Tensor> {
    (0..batch_size)
        .map(|_| &corpus[rng.random_range(0..corpus.len())])
        .collect()
}

fn sum_grads(template: Gradients, parts: Vec<Gradients>) -> Gradients {
    parts.into_iter().fold(template, |mut acc, g| {
        acc.add(&g);
        acc
    })
}

/// One discriminator update on real images and generated fakes under the
/// binary cross-entropy objective `mean softplus(−D(x)) + mean softplus(D(G(z)))`.
/// Returns `(d_loss, accuracy)` measured before the update.
pub fn discriminator_step(state: &mut GanTrainState, real: &[&Tensor], fakes: &[LatentVector]) -> Result<(f64, f64)> {
    if real.is_empty() || fakes.is_empty() {
        return Err(Error::Contract("GAN step needs a nonempty batch".into()));
    }
    let gen = &state.generator;
    let disc = &state.discriminator;
    let fake_images: Vec<Tensor> = fakes
        .par_iter()
        .map(|z| gen.generate(z).map(|p| p.into_tensor()))
        .collect::<Result<_>>()?;
    let nr = real.len() as f64;
    let nf = fakes.len() as f64;
    let samples: Vec<(&Tensor, bool)> = real
        .iter()
        .map(|&t| (t, true))
        .chain(fake_images.iter().map(|t| (t, false)))
        .collect();
    let parts: Vec<(f64, bool, Gradients)> = samples
        .par_iter()
        .map(|&(img, is_real)| {
            let tr = disc.trace(img)?;
            let l = tr.logit();
            let mut g = disc.zero_grads();
            let (loss, dl, correct) = if is_real {
                (softplus(-l) / nr, (sigmoid(l) - 1.0) / nr, l > 0.0)
            } else {
                (softplus(l) / nf, sigmoid(l) / nf, l < 0.0)
            };
            disc.backward(&tr, dl, Some(&mut g));
            Ok((loss, correct, g))
        })
        .collect::<Result<_>>()?;
    let loss: f64 = parts.iter().map(|p| p.0).sum();
    let accuracy = parts.iter().filter(|p| p.1).count() as f64 / parts.len() as f64;
    let grads = sum_grads(disc.zero_grads(), parts.into_iter().map(|p| p.2).collect());
    if !loss.is_finite() || !grads.all_finite() {
        return Err(state.non_finite("discriminator loss"));
    }
    state.d_opt.update(state.discriminator.network_mut().params_mut(), &grads);
    Ok((loss, accuracy))
}

/// One generator update. The objective is `gan_weight · mean softplus(−D(G(z)))`
/// over `zs`, plus an external term whose gradient with respect to the patch
/// generated from `extra.0` is `extra.1`. Returns the unweighted GAN loss.
pub fn generator_step(
    state: &mut GanTrainState,
    zs: &[LatentVector],
    gan_weight: f64,
    extra: Option<(&LatentVector, &Tensor)>,
) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::Contract("generator step needs at least one latent".into()));
    }
    let gen = &state.generator;
    let disc = &state.discriminator;
    let n = zs.len() as f64;
    let parts: Vec<(f64, Gradients)> = zs
        .par_iter()
        .map(|z| {
            let gt = gen.trace(z)?;
            let dt = disc.trace(gt.patch().pixels())?;
            let l = dt.logit();
            let grad_img = disc.backward(&dt, gan_weight * (sigmoid(l) - 1.0) / n, None);
            let mut g = gen.zero_grads();
            gen.backward(&gt, &grad_img, Some(&mut g));
            Ok((softplus(-l) / n, g))
        })
        .collect::<Result<_>>()?;
    let loss: f64 = parts.iter().map(|p| p.0).sum();
    let mut grads = sum_grads(gen.zero_grads(), parts.into_iter().map(|p| p.1).collect());
    if let Some((z, grad_patch)) = extra {
        let gt = gen.trace(z)?;
        gen.backward(&gt, grad_patch, Some(&mut grads));
    }
    if !loss.is_finite() || !grads.all_finite() {
        return Err(state.non_finite("generator loss"));
    }
    let params = state.generator.network_mut()?.params_mut();
    state.g_opt.update(params, &grads);
    Ok(loss)
}

/// One discriminator update followed by one generator update on the same
/// latents. Records the losses in the state history.
pub fn gan_train_step<R: Rng + ?Sized>(state: &mut GanTrainState, real_batch: &[&Tensor], rng: &mut R) -> Result<GanLosses> {
    if real_batch.is_empty() {
        return Err(Error::Contract("GAN step needs a nonempty batch".into()));
    }
    let zs = sample_latents(&state.generator, real_batch.len(), state.config.class_id, rng);
    let (d_loss, d_accuracy) = discriminator_step(state, real_batch, &zs)?;
    let g_loss = generator_step(state, &zs, 1.0, None)?;
    let losses = GanLosses {
        d_loss,
        g_loss,
        d_accuracy,
    };
    state.record(losses);
    Ok(losses)
}

/// One epoch of [`train_gan`]: `steps` GAN steps whose batch and noise
/// draws are keyed by `(seed, epoch, step)`.
pub fn train_gan_epoch(
    state: &mut GanTrainState,
    corpus: &[Tensor],
    epoch: u64,
    steps: u64,
    seed: u64,
    mut on_step: impl FnMut(u64, u64, &GanLosses),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Dataset("GAN training corpus is empty".into()));
    }
    for step in 0..steps {
        let batch = sample_batch(
            corpus,
            state.config.batch_size,
            &mut stream_rng(seed, Stream::GanBatch, epoch, step),
        );
        let losses = gan_train_step(state, &batch, &mut stream_rng(seed, Stream::GanNoise, epoch, step))?;
        on_step(epoch, step, &losses);
    }
    Ok(())
}

/// Plain GAN training: `epochs × steps_per_epoch` calls of
/// [`gan_train_step`], with the batch drawn from the `GanBatch` stream and the
/// latents from the `GanNoise` stream of `(seed, epoch, step)`.
pub fn train_gan(
    state: &mut GanTrainState,
    corpus: &[Tensor],
    epochs: u64,
    steps_per_epoch: u64,
    seed: u64,
    mut on_step: impl FnMut(u64, u64, &GanLosses),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Dataset("GAN training corpus is empty".into()));
    }
    for epoch in 0..epochs {
        train_gan_epoch(state, corpus, epoch, steps_per_epoch, seed, &mut on_step)?;
    }
    Ok(())
}
