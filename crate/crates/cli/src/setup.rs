//! Builds detectors, datasets, corpora and patches from a resolved config.

use std::path::{Path, PathBuf};

use advpatch::data::{load_corpus, make_flower_corpus, DetectionDataset, Split, SPLIT_FILES};
use advpatch::detector::{read_class_names, Detector, DetectorConfig, MockDetector, MockSpec, YoloV3};
use advpatch::generators::Generator;
use advpatch::{imageio, Patch, Tensor};
use anyhow::{bail, Context, Result};

use crate::config::{CorpusKind, CorpusSection, DetectorKind, DetectorSection, Resolved, SplitName};

fn need<'a>(what: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .with_context(|| format!("missing required setting `{what}`"))?;
    if !p.exists() {
        bail!("`{what}` points to {}, which does not exist", p.display());
    }
    Ok(p)
}

pub fn class_names(section: &DetectorSection) -> Result<Vec<String>> {
    match &section.names_file {
        Some(p) => Ok(read_class_names(p)?),
        None => Ok(section.class_names.clone()),
    }
}

/// Checks that the files the detector needs exist, without loading them.
pub fn check_detector(section: &DetectorSection) -> Result<()> {
    match section.kind {
        DetectorKind::ColorBlobs | DetectorKind::MockRandom => {}
        DetectorKind::Mock => {
            need("detector.weights", &section.weights)?;
        }
        DetectorKind::Yolo => {
            need("detector.cfg", &section.cfg)?;
            need("detector.weights", &section.weights)?;
        }
    }
    if section.names_file.is_some() {
        need("detector.names_file", &section.names_file)?;
    }
    Ok(())
}

pub fn build_detector(section: &DetectorSection, seed: u64) -> Result<Box<dyn Detector>> {
    let thresholds_ok = (0.0..=1.0).contains(&section.confidence_threshold)
        && section.nms_iou_threshold > 0.0
        && section.nms_iou_threshold <= 1.0;
    if !thresholds_ok {
        bail!("detector thresholds must lie in [0, 1]");
    }
    let names = class_names(section)?;
    let mock = |mut m: MockDetector| -> Box<dyn Detector> {
        set_thresholds(m.config_mut(), section);
        Box::new(m)
    };
    Ok(match section.kind {
        DetectorKind::ColorBlobs => mock(MockDetector::color_blobs(names)?),
        DetectorKind::MockRandom => {
            let spec = MockSpec {
                input_size: section.input_size,
                ..MockSpec::desk(names)
            };
            mock(MockDetector::random(spec, seed, section.objectness_bias)?)
        }
        DetectorKind::Mock => mock(MockDetector::load(need("detector.weights", &section.weights)?)?),
        DetectorKind::Yolo => {
            let mut y = YoloV3::load(
                need("detector.cfg", &section.cfg)?,
                need("detector.weights", &section.weights)?,
                names,
            )?;
            set_thresholds(y.config_mut(), section);
            Box::new(y)
        }
    })
}

fn set_thresholds(cfg: &mut DetectorConfig, section: &DetectorSection) {
    cfg.confidence_threshold = section.confidence_threshold;
    cfg.nms_iou_threshold = section.nms_iou_threshold;
}

pub fn split_of(name: SplitName) -> Split {
    match name {
        SplitName::Train => Split::Train,
        SplitName::Test => Split::Test,
    }
}

pub fn manifest_path(dir: &Path, split: SplitName) -> PathBuf {
    dir.join(match split {
        SplitName::Train => SPLIT_FILES[0],
        SplitName::Test => SPLIT_FILES[1],
    })
}

pub fn check_manifest(r: &Resolved, split: SplitName) -> Result<()> {
    let p = manifest_path(&r.manifest_dir(), split);
    if !p.exists() {
        bail!("dataset manifest {} not found; run `prepare-data` first", p.display());
    }
    Ok(())
}

/// The manifest of one split, rooted at the manifest directory.
pub fn load_split(r: &Resolved, split: SplitName) -> Result<DetectionDataset> {
    let dir = r.manifest_dir();
    let path = manifest_path(&dir, split);
    Ok(DetectionDataset::from_coco(&path, &dir, Some(split_of(split)))?)
}

pub fn load_images(ds: &DetectionDataset) -> Result<Vec<Tensor>> {
    ds.images
        .iter()
        .map(|rec| ds.load_image(rec).map_err(Into::into))
        .collect()
}

pub fn check_corpus(section: &CorpusSection) -> Result<()> {
    if section.kind == CorpusKind::Directory {
        need("corpus.root", &section.root)?;
        if section.exclusion_list.is_some() {
            need("corpus.exclusion_list", &section.exclusion_list)?;
        }
    } else if section.count == 0 {
        bail!("corpus.count must be positive");
    }
    Ok(())
}

/// Corpus images at `size`×`size`.
pub fn load_gan_corpus(section: &CorpusSection, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    let images = match section.kind {
        CorpusKind::Flowers => make_flower_corpus(section.count, size, seed),
        CorpusKind::Directory => {
            let corpus = load_corpus(need("corpus.root", &section.root)?, section.exclusion_list.as_deref())?;
            println!(
                "corpus_images={} excluded={} skipped={}",
                corpus.len(),
                corpus.excluded,
                corpus.skipped
            );
            corpus.load_images(size)
        }
    };
    if images.is_empty() {
        bail!("GAN training corpus is empty");
    }
    Ok(images)
}

/// Reads a patch from `.json` (exact values) or any image format.
pub fn load_patch(path: &Path) -> Result<Patch> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let t: Tensor = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Patch::new(t)?)
    } else {
        Ok(Patch::new(imageio::load_rgb(path)?)?)
    }
}

pub fn save_patch(patch: &Patch, dir: &Path) -> Result<()> {
    imageio::save_png(patch.pixels(), &dir.join("patch.png"))?;
    let path = dir.join("patch.json");
    std::fs::write(&path, serde_json::to_string(patch.pixels())?).with_context(|| format!("writing {}", path.display()))
}

pub fn generator_weights(r: &Resolved) -> PathBuf {
    r.config
        .generator
        .weights
        .clone()
        .unwrap_or_else(|| r.output_dir().join("gan").join("generator.json"))
}

pub fn load_frozen_generator(r: &Resolved) -> Result<Generator> {
    let path = generator_weights(r);
    if !path.exists() {
        bail!(
            "generator weights {} not found; set generator.weights or run `train-gan`",
            path.display()
        );
    }
    Ok(Generator::load_pretrained(&path, Some(&r.config.generator.arch))?)
}
