//! Experiment configuration: one TOML file with a section per component,
//! plus `--set section.key=value` overrides applied in order.

use std::path::{Path, PathBuf};

use advpatch::attacks::AttackConfig;
use advpatch::data::SyntheticSpec;
use advpatch::detector::{DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use advpatch::eval::DEFAULT_RADIUS;
use advpatch::generators::{DiscriminatorArch, GanConfig, GeneratorArch};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default parent of output directories.
pub const OUTPUT_ROOT_ENV: &str = "ADVPATCH_OUTPUT_ROOT";

fn rgb() -> Vec<String> {
    ["red", "green", "blue"].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seed for every random draw of the experiment.
    pub seed: u64,
    /// Defaults to `$ADVPATCH_OUTPUT_ROOT/<name>`, else `runs/<name>`.
    pub output_dir: Option<PathBuf>,
    pub detector: DetectorSection,
    pub dataset: DatasetSection,
    pub corpus: CorpusSection,
    pub generator: GeneratorSection,
    pub gan: GanSection,
    pub attack: AttackConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            output_dir: None,
            detector: DetectorSection::default(),
            dataset: DatasetSection::default(),
            corpus: CorpusSection::default(),
            generator: GeneratorSection::default(),
            gan: GanSection::default(),
            attack: AttackConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Hand-set color detector for the synthetic shapes.
    ColorBlobs,
    /// Mock detector with random weights.
    MockRandom,
    /// Mock detector loaded from a weights file.
    Mock,
    /// Darknet cfg + weights.
    Yolo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub kind: DetectorKind,
    pub class_names: Vec<String>,
    /// Class names file, one per line; replaces `class_names`.
    pub names_file: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub cfg: Option<PathBuf>,
    /// Input size of a random mock detector.
    pub input_size: usize,
    pub objectness_bias: f64,
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            kind: DetectorKind::ColorBlobs,
            class_names: rgb(),
            names_file: None,
            weights: None,
            cfg: None,
            input_size: 64,
            objectness_bias: 0.0,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            nms_iou_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Coco,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Where `prepare-data` writes manifests and the other commands read
    /// them. Defaults to `<output_dir>/data`.
    pub manifest_dir: Option<PathBuf>,
    pub train_annotations: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub val_annotations: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    /// Classes kept by the filter; empty keeps everything.
    pub classes: Vec<String>,
    pub synthetic: SyntheticSpec,
    /// Split the patch is trained on.
    pub train_split: SplitName,
    /// Split evaluated by `eval`.
    pub eval_split: SplitName,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            manifest_dir: None,
            train_annotations: None,
            train_images: None,
            val_annotations: None,
            val_images: None,
            classes: Vec::new(),
            synthetic: SyntheticSpec {
                test_images: 4,
                ..SyntheticSpec::desk(14, rgb())
            },
            train_split: SplitName::Train,
            eval_split: SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Directory,
    /// Seeded two-mode synthetic flowers.
    Flowers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub kind: CorpusKind,
    pub root: Option<PathBuf>,
    pub exclusion_list: Option<PathBuf>,
    /// Number of synthetic flowers.
    pub count: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Flowers,
            root: None,
            exclusion_list: None,
            count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub arch: GeneratorArch,
    pub discriminator: DiscriminatorArch,
    /// Pretrained weights. For frozen-generator attacks this defaults to the
    /// output of `train-gan`.
    pub weights: Option<PathBuf>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            arch: GeneratorArch::Mlp {
                latent_dim: 16,
                hidden: vec![64],
                output_size: 16,
            },
            discriminator: DiscriminatorArch::Mlp {
                hidden: vec![64],
                input_size: 16,
            },
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub class_id: Option<usize>,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub checkpoint_every: u64,
    /// Tiles per side of the sample grid written with each checkpoint.
    pub sample_tiles: usize,
}

impl Default for GanSection {
    fn default() -> Self {
        let g = GanConfig::default();
        Self {
            lr: g.lr,
            batch_size: g.batch_size,
            beta1: g.beta1,
            beta2: g.beta2,
            class_id: None,
            epochs: 25,
            steps_per_epoch: 10,
            checkpoint_every: 5,
            sample_tiles: 4,
        }
    }
}

impl GanSection {
    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            beta1: self.beta1,
            beta2: self.beta2,
            class_id: self.class_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_threshold: f64,
    pub proximity_radius: f64,
    /// Classes scored; empty means every class of the dataset.
    pub classes: Vec<String>,
    /// Patch image (`.png`) or exact patch (`.json`) to evaluate.
    pub patch: Option<PathBuf>,
    /// Also evaluate a black square at the patch placement.
    pub black_baseline: bool,
    pub render: bool,
    /// Maximum rendered images per condition.
    pub render_limit: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            proximity_radius: DEFAULT_RADIUS,
            classes: Vec::new(),
            patch: None,
            black_baseline: false,
            render: false,
            render_limit: 8,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted.key = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override `{assignment}` has an empty key segment");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{assignment}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// A resolved configuration and the overrides that shaped it.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub source: Option<PathBuf>,
    pub overrides: Vec<String>,
}

/// Reads `path` (if any), applies `overrides` left to right, and checks the
/// result.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Resolved> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    // Overrides land on the fully defaulted config so that setting one field
    // of a nested table keeps the others.
    if !overrides.is_empty() {
        let base: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        table = toml::Table::try_from(&base)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
    }
    let mut config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .context("invalid configuration")?;
    if config.attack.seed != 0 && config.attack.seed != config.seed {
        bail!("attack.seed is taken from the top-level `seed`; set that instead");
    }
    config.attack.seed = config.seed;
    config.attack.validate().context("invalid [attack] section")?;
    Ok(Resolved {
        config,
        source: path.map(Path::to_path_buf),
        overrides: overrides.to_vec(),
    })
}

impl Resolved {
    pub fn output_dir(&self) -> PathBuf {
        if let Some(d) = &self.config.output_dir {
            return d.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.config.name),
            _ => PathBuf::from("runs").join(&self.config.name),
        }
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.config
            .dataset
            .manifest_dir
            .clone()
            .unwrap_or_else(|| self.output_dir().join("data"))
    }

    /// The resolved configuration as TOML, headed by the overrides applied.
    pub fn snapshot(&self) -> Result<String> {
        let mut out = String::from("# resolved experiment configuration\n");
        if let Some(s) = &self.source {
            out.push_str(&format!("# source: {}\n", s.display()));
        }
        for o in &self.overrides {
            out.push_str(&format!("# override (last writer wins): {o}\n"));
        }
        out.push_str(&toml::to_string_pretty(&self.config)?);
        Ok(out)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("experiment.toml");
        std::fs::write(&path, self.snapshot()?).with_context(|| format!("writing {}", path.display()))
    }
}
