//! Run directories: config snapshot, per-epoch metrics, checkpoints and the
//! resume state.
//!
//! ```text
//! <run>/config.json
//! <run>/metrics.csv
//! <run>/state.json                      latest checkpoint, exact values
//! <run>/checkpoints/epoch_000500/patch.png
//! <run>/checkpoints/epoch_000500/meta.json
//! <run>/checkpoints/epoch_000500/latent.json
//! <run>/checkpoints/epoch_000500/generator.json, discriminator.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttackConfig, EpochRecord};
use crate::error::{Error, Result};
use crate::generators::{Discriminator, GanLosses, GanTrainState, Generator, LatentVector};
use crate::imageio;
use crate::nn::Adam;
use crate::patch::Patch;

pub const METRICS_HEADER: &str =
    "epoch,detector_loss,tv_loss,g_loss,d_loss,total_loss,mean_objectness,proximity_objectness,detections";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanCheckpoint {
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub steps: u64,
    pub history: Vec<GanLosses>,
    /// Relative to the run directory.
    pub generator: String,
    pub discriminator: String,
}

/// Everything needed to continue a run after `next_epoch - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub next_epoch: u64,
    /// Pixel patch values, channel-major.
    pub patch: Option<Vec<f64>>,
    pub latent: Option<LatentVector>,
    pub trajectory: Vec<EpochRecord>,
    pub checkpoint_epochs: Vec<u64>,
    pub gan: Option<GanCheckpoint>,
}

#[derive(Serialize)]
struct CheckpointMeta<'a> {
    epoch: u64,
    patch_height: usize,
    patch_width: usize,
    latent_dim: Option<usize>,
    last: Option<&'a EpochRecord>,
}

pub struct RunWriter {
    dir: PathBuf,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        r.epoch,
        r.detector_loss,
        r.tv_loss,
        opt(r.g_loss),
        opt(r.d_loss),
        r.total_loss,
        r.mean_objectness,
        opt(r.proximity_objectness),
        r.detections
    )
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn same_run(a: &AttackConfig, b: &AttackConfig) -> bool {
    let mut b = b.clone();
    b.epochs = a.epochs;
    *a == b
}

impl RunWriter {
    /// Creates the directory and snapshots `config`. When resuming, the
    /// existing snapshot must agree with `config` in everything but
    /// `epochs`.
    pub fn open(dir: &Path, config: &AttackConfig, resume: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        if resume && path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let old: AttackConfig = serde_json::from_str(&text)?;
            if !same_run(config, &old) {
                return Err(Error::Config(format!(
                    "cannot resume {}: configuration differs from the original run",
                    dir.display()
                )));
            }
        }
        write_atomic(&path, serde_json::to_string_pretty(config)?.as_bytes())?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_dir(&self, epoch: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch_{epoch:06}"))
    }

    pub fn load_state(&self) -> Result<Option<RunState>> {
        let path = self.dir.join("state.json");
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn rewrite_metrics(&self, records: &[EpochRecord]) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "{METRICS_HEADER}").expect("string write");
        for r in records {
            text.push_str(&csv_row(r));
        }
        write_atomic(&self.metrics_path(), text.as_bytes())
    }

    pub fn append_metrics(&self, record: &EpochRecord) -> Result<()> {
        let path = self.metrics_path();
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(csv_row(record).as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Writes the checkpoint files for `epoch` and replaces `state.json`.
    pub fn checkpoint(
        &self,
        epoch: u64,
        patch: &Patch,
        latent: Option<&LatentVector>,
        gan: Option<&GanTrainState>,
        state: &RunState,
    ) -> Result<()> {
        let dir = self.checkpoint_dir(epoch);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        imageio::save_png(patch.pixels(), &dir.join("patch.png"))?;
        let meta = CheckpointMeta {
            epoch,
            patch_height: patch.height(),
            patch_width: patch.width(),
            latent_dim: latent.map(|z| z.dim()),
            last: state.trajectory.last(),
        };
        write_atomic(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        if let Some(z) = latent {
            write_atomic(&dir.join("latent.json"), serde_json::to_string(z)?.as_bytes())?;
        }
        let mut state = state.clone();
        if let Some(g) = gan {
            g.generator.save(&dir.join("generator.json"))?;
            g.discriminator.save(&dir.join("discriminator.json"))?;
            let rel = |name: &str| format!("checkpoints/epoch_{epoch:06}/{name}");
            state.gan = Some(GanCheckpoint {
                g_opt: g.g_opt.clone(),
                d_opt: g.d_opt.clone(),
                steps: g.steps,
                history: g.history.clone(),
                generator: rel("generator.json"),
                discriminator: rel("discriminator.json"),
            });
        }
        write_atomic(&self.dir.join("state.json"), serde_json::to_string(&state)?.as_bytes())
    }

    /// Restores generator, discriminator and optimiser state saved by
    /// [`RunWriter::checkpoint`].
    pub fn restore_gan(&self, state: &RunState, gan: &mut GanTrainState) -> Result<()> {
        let saved = state
            .gan
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no GAN state".into()))?;
        let generator = Generator::load(&self.dir.join(&saved.generator))?;
        let discriminator = Discriminator::load(&self.dir.join(&saved.discriminator))?;
        if generator.arch() != gan.generator.arch() || discriminator.arch() != gan.discriminator.arch() {
            return Err(Error::Config("checkpointed GAN architecture differs from the run's".into()));
        }
        gan.generator = generator;
        gan.discriminator = discriminator;
        gan.g_opt = saved.g_opt.clone();
        gan.d_opt = saved.d_opt.clone();
        gan.steps = saved.steps;
        gan.history = saved.history.clone();
        Ok(())
    }
}
