//! Patch attack drivers: pixel-space PGD, latent optimisation through a
//! frozen pretrained generator, and combined patch/GAN training.
//!
//! Every driver trains one shared patch over the images it is given, one
//! gradient step per image per epoch, visiting images in an order shuffled
//! per epoch. Per-instance attacks are the single-image case; see
//! [`per_instance`].

mod run;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{loss_and_gradient, postprocess, Detector, Prediction};
use crate::error::{Error, Result};
use crate::eval::{proximity_objectness, DEFAULT_RADIUS};
use crate::generators::{
    discriminator_step, gan_train_step, generator_step, sample_batch, sample_latents, GanLosses, GanTrainState,
    Generator, LatentVector,
};
use crate::patch::{
    apply_patch, apply_patch_backward, latent_shift_backward, total_variation, total_variation_grad, LatentShift,
    Patch, Placement, TransformConfig, TransformSample,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub use run::{RunState, RunWriter, METRICS_HEADER};

/// Default checkpoint cadence in epochs.
pub const CHECKPOINT_EVERY: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    PerInstance,
    Universal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    /// Pixels optimised directly with signed-gradient steps.
    Pixel,
    /// Latent of a frozen pretrained generator.
    FrozenGenerator,
    /// Latent of a generator trained alongside the patch.
    TrainedGenerator,
}

/// Generator update schedule for combined training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// GAN step (D then G), then the patch-noise update.
    V1,
    /// As V1, followed by a second G update on the GAN loss of the current
    /// patch plus the detector loss.
    V2,
    /// D step, patch-noise update, then the only G update, on the GAN loss
    /// of the current patch plus the detector loss.
    V3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    /// Uniform in `[0, 1]`.
    Random,
    /// Constant 0.5.
    Gray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub source: PatchSource,
    /// Step size for patch pixels (signed steps) or latents (raw gradient).
    pub lr: f64,
    pub epochs: u64,
    pub tv_weight: f64,
    pub transform: bool,
    pub transform_ranges: TransformConfig,
    pub latent_shift: bool,
    pub latent_shift_alpha: f64,
    pub placement: Placement,
    pub seed: u64,
    /// Native side length of pixel patches. Generator patches use the
    /// generator's output size.
    pub patch_size: usize,
    pub patch_init: PatchInit,
    /// Class for conditional generators.
    pub class_id: Option<usize>,
    pub gan_lr: f64,
    pub variant: Option<Variant>,
    /// Weights of the GAN and detector terms in the detector-coupled
    /// generator update.
    pub gan_weight: f64,
    pub detector_weight: f64,
    pub checkpoint_every: u64,
    pub proximity_radius: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Universal,
            source: PatchSource::Pixel,
            lr: 0.01,
            epochs: 1000,
            tv_weight: 0.01,
            transform: false,
            transform_ranges: TransformConfig::default(),
            latent_shift: false,
            latent_shift_alpha: 0.1,
            placement: Placement::new(0, 0, 100, 100),
            seed: 0,
            patch_size: 100,
            patch_init: PatchInit::Random,
            class_id: None,
            gan_lr: 0.0002,
            variant: None,
            gan_weight: 1.0,
            detector_weight: 1.0,
            checkpoint_every: CHECKPOINT_EVERY,
            proximity_radius: DEFAULT_RADIUS,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return bad(format!("tv_weight must be non-negative, got {}", self.tv_weight));
        }
        if !(0.0..=1.0).contains(&self.latent_shift_alpha) {
            return bad(format!("latent_shift_alpha {} outside [0, 1]", self.latent_shift_alpha));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.proximity_radius > 0.0) {
            return bad("proximity_radius must be positive".into());
        }
        self.transform_ranges.validate()?;
        match (self.source, self.variant) {
            (PatchSource::TrainedGenerator, None) => return bad("combined training needs a variant".into()),
            (PatchSource::Pixel | PatchSource::FrozenGenerator, Some(v)) => {
                return bad(format!("variant {v:?} only applies to a trained generator"))
            }
            _ => {}
        }
        if self.source == PatchSource::TrainedGenerator && !(self.gan_lr.is_finite() && self.gan_lr > 0.0) {
            return bad(format!("GAN learning rate must be positive, got {}", self.gan_lr));
        }
        if self.source == PatchSource::Pixel && self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        Ok(())
    }

    fn expect_source(&self, source: PatchSource) -> Result<()> {
        if self.source != source {
            return Err(Error::Config(format!(
                "driver for {source:?} patches called with source {:?}",
                self.source
            )));
        }
        Ok(())
    }
}

/// Per-epoch means over the images visited in that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub detector_loss: f64,
    /// Unweighted total variation of the optimised patch.
    pub tv_loss: f64,
    /// `detector_loss + tv_weight * tv_loss`.
    pub total_loss: f64,
    pub g_loss: Option<f64>,
    pub d_loss: Option<f64>,
    /// Mean raw objectness over all predictions.
    pub mean_objectness: f64,
    /// Mean raw objectness of predictions centred within the proximity
    /// radius, averaged over images that have any.
    pub proximity_objectness: Option<f64>,
    /// Thresholded detections summed over images.
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub patch: Patch,
    pub latent: Option<LatentVector>,
    pub trajectory: Vec<EpochRecord>,
    pub checkpoint_epochs: Vec<u64>,
}

/// Where and how a run reports progress.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Run directory for metrics and checkpoints.
    pub run_dir: Option<PathBuf>,
    /// Continue from the last checkpoint in `run_dir` if there is one.
    pub resume: bool,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// The optimised quantity plus whatever it is generated by.
enum Param<'a> {
    Pixel(Patch),
    Latent {
        generator: &'a Generator,
        z: LatentVector,
    },
    Combined {
        state: &'a mut GanTrainState,
        corpus: &'a [Tensor],
        variant: Variant,
        z: LatentVector,
    },
}

impl Param<'_> {
    fn current_patch(&self) -> Result<Patch> {
        match self {
            Param::Pixel(p) => Ok(p.clone()),
            Param::Latent { generator, z } => generator.generate(z),
            Param::Combined { state, z, .. } => state.generator.generate(z),
        }
    }

    fn latent(&self) -> Option<&LatentVector> {
        match self {
            Param::Pixel(_) => None,
            Param::Latent { z, .. } | Param::Combined { z, .. } => Some(z),
        }
    }
}

struct StepOutcome {
    detector_loss: f64,
    tv: f64,
    gan: Option<GanLosses>,
    predictions: Vec<Prediction>,
    detections: usize,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Patch pixels after the optional latent shift and transformation, and the
/// map from a gradient on the shown patch back to the optimised patch.
struct Shown {
    patch: Patch,
    shifted: Patch,
    transform: Option<TransformSample>,
    alpha: Option<f64>,
}

impl Shown {
    fn new(raw: &Patch, mask: Option<&Patch>, config: &AttackConfig, epoch: u64, step: u64) -> Result<Self> {
        let (shifted, alpha) = match mask {
            Some(m) => (raw.latent_shift(m, config.latent_shift_alpha)?, Some(config.latent_shift_alpha)),
            None => (raw.clone(), None),
        };
        let transform = config.transform.then(|| {
            let [c, h, w] = shifted.pixels().shape();
            let mut rng = stream_rng(config.seed, Stream::Transform, epoch, step);
            TransformSample::draw(&config.transform_ranges, c, h, w, &mut rng)
        });
        let patch = match &transform {
            Some(t) => t.apply(&shifted),
            None => shifted.clone(),
        };
        Ok(Self {
            patch,
            shifted,
            transform,
            alpha,
        })
    }

    fn backward(&self, grad: Tensor) -> Tensor {
        let g = match &self.transform {
            Some(t) => t.backward(&self.shifted, &grad),
            None => grad,
        };
        match self.alpha {
            Some(a) => latent_shift_backward(&g, a),
            None => g,
        }
    }
}

fn non_finite(quantity: &'static str, epoch: u64, step: usize) -> Error {
    Error::NonFinite {
        quantity,
        epoch: epoch as usize,
        step,
    }
}

fn step_once(
    det: &dyn Detector,
    image: &Tensor,
    config: &AttackConfig,
    param: &mut Param<'_>,
    mask: Option<&Patch>,
    epoch: u64,
    step: u64,
) -> Result<StepOutcome> {
    let seed = config.seed;
    let mut gan = None;
    let mut d_step = None;
    if let Param::Combined {
        state, corpus, variant, ..
    } = param
    {
        let batch = sample_batch(
            corpus,
            state.config.batch_size,
            &mut stream_rng(seed, Stream::GanBatch, epoch, step),
        );
        let mut noise = stream_rng(seed, Stream::GanNoise, epoch, step);
        match variant {
            Variant::V1 | Variant::V2 => gan = Some(gan_train_step(state, &batch, &mut noise)?),
            Variant::V3 => {
                let zs = sample_latents(&state.generator, batch.len(), state.config.class_id, &mut noise);
                let (d_loss, d_accuracy) = discriminator_step(state, &batch, &zs)?;
                d_step = Some((d_loss, d_accuracy));
            }
        }
    }

    let (raw, trace) = match param {
        Param::Pixel(p) => (p.clone(), None),
        Param::Latent { generator, z } => {
            let t = generator.trace(z)?;
            (t.patch().clone(), Some(t))
        }
        Param::Combined { state, z, .. } => {
            let t = state.generator.trace(z)?;
            (t.patch().clone(), Some(t))
        }
    };
    let shown = Shown::new(&raw, mask, config, epoch, step)?;
    let composited = apply_patch(image, &shown.patch, &config.placement)?;
    let il = loss_and_gradient(det, &composited, &[])?;
    if !il.loss.is_finite() {
        return Err(non_finite("detector loss", epoch, step as usize));
    }
    let [_, ph, pw] = raw.pixels().shape();
    let det_grad = shown.backward(apply_patch_backward(&il.grad, ph, pw, &config.placement));
    let tv = total_variation(raw.pixels());
    let mut grad = det_grad.clone();
    if config.tv_weight != 0.0 {
        grad.axpy(config.tv_weight, &total_variation_grad(raw.pixels()));
    }

    match param {
        Param::Pixel(p) => {
            let mut next = p.pixels().clone();
            for (v, &g) in next.data_mut().iter_mut().zip(grad.data()) {
                *v -= config.lr * sign(g);
            }
            *p = Patch::new(next)?;
        }
        Param::Latent { generator, z } => {
            let gz = generator.backward(trace.as_ref().expect("latent trace"), &grad, None);
            descend(z, &gz, config.lr, epoch, step)?;
        }
        Param::Combined { state, variant, z, .. } => {
            let gz = state.generator.backward(trace.as_ref().expect("latent trace"), &grad, None);
            let shown_z = z.clone();
            descend(z, &gz, config.lr, epoch, step)?;
            if matches!(variant, Variant::V2 | Variant::V3) {
                let mut coupled = det_grad;
                coupled.scale(config.detector_weight);
                let g_loss = generator_step(state, std::slice::from_ref(&shown_z), config.gan_weight, Some((&shown_z, &coupled)))?;
                if let Some((d_loss, d_accuracy)) = d_step {
                    let losses = GanLosses {
                        d_loss,
                        g_loss,
                        d_accuracy,
                    };
                    state.record(losses);
                    gan = Some(losses);
                }
            }
        }
    }

    let mapped: Vec<Prediction> = il
        .predictions
        .iter()
        .map(|p| Prediction {
            bbox: il.letterbox.to_image(p.bbox),
            ..p.clone()
        })
        .collect();
    let detections = postprocess(det.config(), &il.predictions, &il.letterbox).len();
    Ok(StepOutcome {
        detector_loss: il.loss,
        tv,
        gan,
        predictions: mapped,
        detections,
    })
}

fn descend(z: &mut LatentVector, grad: &[f64], lr: f64, epoch: u64, step: u64) -> Result<()> {
    for (v, g) in z.z.iter_mut().zip(grad) {
        *v -= lr * g;
    }
    if !z.is_finite() {
        return Err(non_finite("patch latent", epoch, step as usize));
    }
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    detector: f64,
    tv: f64,
    g: Option<f64>,
    d: Option<f64>,
    objectness: f64,
    objectness_count: usize,
    proximity: f64,
    proximity_count: usize,
    detections: usize,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepOutcome, placement: &Placement, radius: f64) {
        self.detector += s.detector_loss;
        self.tv += s.tv;
        if let Some(l) = s.gan {
            *self.g.get_or_insert(0.0) += l.g_loss;
            *self.d.get_or_insert(0.0) += l.d_loss;
        }
        self.objectness += s.predictions.iter().map(|p| p.objectness).sum::<f64>();
        self.objectness_count += s.predictions.len();
        if let Some(p) = proximity_objectness(&s.predictions, placement, radius) {
            self.proximity += p;
            self.proximity_count += 1;
        }
        self.detections += s.detections;
        self.steps += 1;
    }

    fn finish(self, epoch: u64, tv_weight: f64) -> EpochRecord {
        let n = self.steps as f64;
        let detector_loss = self.detector / n;
        let tv_loss = self.tv / n;
        EpochRecord {
            epoch,
            detector_loss,
            tv_loss,
            total_loss: detector_loss + tv_weight * tv_loss,
            g_loss: self.g.map(|g| g / n),
            d_loss: self.d.map(|d| d / n),
            mean_objectness: if self.objectness_count == 0 {
                0.0
            } else {
                self.objectness / self.objectness_count as f64
            },
            proximity_objectness: (self.proximity_count > 0).then(|| self.proximity / self.proximity_count as f64),
            detections: self.detections,
        }
    }
}

/// Visiting order of the images in one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch, 0));
    order
}

fn drive(
    det: &dyn Detector,
    images: &[Tensor],
    config: &AttackConfig,
    mut param: Param<'_>,
    opts: RunOptions<'_>,
) -> Result<AttackResult> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("attack needs at least one image".into()));
    }
    if config.mode == AttackMode::PerInstance && images.len() != 1 {
        return Err(Error::Config(format!(
            "per-instance mode takes exactly one image, got {}",
            images.len()
        )));
    }
    if !det.supports_gradient() {
        return Err(Error::Unsupported("detector does not expose gradients".into()));
    }
    for img in images {
        config.placement.validate(img.height(), img.width())?;
    }

    let RunOptions {
        run_dir,
        resume,
        mut on_epoch,
    } = opts;
    let mut writer = match &run_dir {
        Some(dir) => Some(RunWriter::open(dir, config, resume)?),
        None => None,
    };
    let mut start = 0;
    let mut trajectory = Vec::new();
    let mut checkpoint_epochs = Vec::new();
    if resume {
        let w = writer
            .as_mut()
            .ok_or_else(|| Error::Config("resume needs a run directory".into()))?;
        if let Some(state) = w.load_state()? {
            restore(&mut param, &state, w)?;
            start = state.next_epoch;
            trajectory = state.trajectory;
            checkpoint_epochs = state.checkpoint_epochs;
            w.rewrite_metrics(&trajectory)?;
            log::info!("resuming at epoch {start}");
        }
    }
    if let Some(w) = writer.as_mut() {
        if trajectory.is_empty() {
            w.rewrite_metrics(&[])?;
        }
    }

    for epoch in start..config.epochs {
        let mask = if config.latent_shift {
            let p = param.current_patch()?;
            let mut rng = stream_rng(config.seed, Stream::LatentShift, epoch, 0);
            Some(Patch::random(p.height(), p.width(), &mut rng)?)
        } else {
            None
        };
        let mut acc = EpochAccumulator::default();
        for (step, &i) in epoch_order(images.len(), config.seed, epoch).iter().enumerate() {
            let s = step_once(det, &images[i], config, &mut param, mask.as_ref(), epoch, step as u64)?;
            acc.add(&s, &config.placement, config.proximity_radius);
        }
        let record = acc.finish(epoch, config.tv_weight);
        for (q, v) in [
            ("total loss", Some(record.total_loss)),
            ("generator loss", record.g_loss),
            ("discriminator loss", record.d_loss),
        ] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(non_finite(q, epoch, 0));
            }
        }
        if let Some(w) = writer.as_mut() {
            w.append_metrics(&record)?;
        }
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }
        trajectory.push(record);
        let done = epoch + 1;
        if done % config.checkpoint_every == 0 || done == config.epochs {
            checkpoint_epochs.push(done);
            if let Some(w) = writer.as_mut() {
                let patch = param.current_patch()?;
                let gan = match &param {
                    Param::Combined { state, .. } => Some(&**state),
                    _ => None,
                };
                w.checkpoint(
                    done,
                    &patch,
                    param.latent(),
                    gan,
                    &RunState {
                        next_epoch: done,
                        patch: match &param {
                            Param::Pixel(p) => Some(p.pixels().clone().into_vec()),
                            _ => None,
                        },
                        latent: param.latent().cloned(),
                        trajectory: trajectory.clone(),
                        checkpoint_epochs: checkpoint_epochs.clone(),
                        gan: None,
                    },
                )?;
            }
        }
    }

    Ok(AttackResult {
        patch: param.current_patch()?,
        latent: param.latent().cloned(),
        trajectory,
        checkpoint_epochs,
    })
}

fn restore(param: &mut Param<'_>, state: &RunState, writer: &RunWriter) -> Result<()> {
    match param {
        Param::Pixel(p) => {
            let data = state
                .patch
                .clone()
                .ok_or_else(|| Error::Config("checkpoint has no pixel patch".into()))?;
            *p = Patch::new(Tensor::from_vec(3, p.height(), p.width(), data)?)?;
        }
        Param::Latent { z, .. } => {
            *z = state
                .latent
                .clone()
                .ok_or_else(|| Error::Config("checkpoint has no latent".into()))?;
        }
        Param::Combined { state: gan, z, .. } => {
            *z = state
                .latent
                .clone()
                .ok_or_else(|| Error::Config("checkpoint has no latent".into()))?;
            writer.restore_gan(state, gan)?;
        }
    }
    Ok(())
}

fn initial_latent(generator: &Generator, config: &AttackConfig) -> LatentVector {
    generator.sample_latent(config.class_id, &mut stream_rng(config.seed, Stream::Init, 0, 0))
}

/// Optimises patch pixels with signed-gradient descent on the vanishing loss
/// plus weighted total variation, clamping to `[0, 1]` after every step.
pub fn pgd_patch_attack(
    det: &dyn Detector,
    images: &[Tensor],
    config: &AttackConfig,
    opts: RunOptions<'_>,
) -> Result<AttackResult> {
    config.expect_source(PatchSource::Pixel)?;
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Init, 0, 0);
    let patch = match config.patch_init {
        PatchInit::Random => Patch::random(config.patch_size, config.patch_size, &mut rng)?,
        PatchInit::Gray => Patch::filled(config.patch_size, config.patch_size, 0.5)?,
    };
    drive(det, images, config, Param::Pixel(patch), opts)
}

/// Optimises the latent of a frozen generator by gradient descent. The
/// generator is only read.
pub fn pretrained_gan_attack(
    det: &dyn Detector,
    generator: &Generator,
    images: &[Tensor],
    config: &AttackConfig,
    opts: RunOptions<'_>,
) -> Result<AttackResult> {
    if generator.is_trainable() {
        return Err(Error::Contract(
            "pretrained-generator attack requires a frozen generator".into(),
        ));
    }
    config.expect_source(PatchSource::FrozenGenerator)?;
    let z = initial_latent(generator, config);
    drive(det, images, config, Param::Latent { generator, z }, opts)
}

/// Trains the GAN on `corpus` while optimising a persistent patch latent
/// against the detector, with the generator schedule of `config.variant`.
pub fn combined_patch_gan_attack(
    det: &dyn Detector,
    state: &mut GanTrainState,
    corpus: &[Tensor],
    images: &[Tensor],
    config: &AttackConfig,
    opts: RunOptions<'_>,
) -> Result<AttackResult> {
    config.expect_source(PatchSource::TrainedGenerator)?;
    config.validate()?;
    let variant = config.variant.expect("validated");
    if !state.generator.is_trainable() {
        return Err(Error::Contract("combined training needs a trainable generator".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Dataset("GAN training corpus is empty".into()));
    }
    state.g_opt.lr = config.gan_lr;
    state.d_opt.lr = config.gan_lr;
    let z = initial_latent(&state.generator, config);
    drive(
        det,
        images,
        config,
        Param::Combined {
            state,
            corpus,
            variant,
            z,
        },
        opts,
    )
}

/// One attack over the whole image set, in universal mode.
pub enum Attack<'a> {
    Pgd,
    Pretrained(&'a Generator),
    Combined {
        state: &'a mut GanTrainState,
        corpus: &'a [Tensor],
    },
}

/// Trains one shared patch over `images`.
pub fn universal_train(
    det: &dyn Detector,
    attack: Attack<'_>,
    images: &[Tensor],
    config: &AttackConfig,
    opts: RunOptions<'_>,
) -> Result<AttackResult> {
    if config.mode != AttackMode::Universal {
        return Err(Error::Config("universal training needs mode = universal".into()));
    }
    match attack {
        Attack::Pgd => pgd_patch_attack(det, images, config, opts),
        Attack::Pretrained(g) => pretrained_gan_attack(det, g, images, config, opts),
        Attack::Combined { state, corpus } => combined_patch_gan_attack(det, state, corpus, images, config, opts),
    }
}

/// Runs `attack` separately on each image.
pub fn per_instance(
    images: &[Tensor],
    mut attack: impl FnMut(usize, &[Tensor]) -> Result<AttackResult>,
) -> Result<Vec<AttackResult>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| attack(i, std::slice::from_ref(img)))
        .collect()
}

