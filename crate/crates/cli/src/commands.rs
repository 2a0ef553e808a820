//! Subcommands. Each has a `check_*` pass that validates configuration and
//! inputs before any compute, and a `run_*` pass that does the work.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use advpatch::attacks::{
    combined_patch_gan_attack, per_instance, pgd_patch_attack, pretrained_gan_attack, AttackMode, AttackResult,
    EpochRecord, PatchSource, RunOptions,
};
use advpatch::data::{make_synthetic_dataset, DetectionDataset, Split, SplitProtocol};
use advpatch::detector::{detect, Detection, Detector};
use advpatch::eval::{proximity_report, render_annotated, EvalReport, ImageDetections, MatchProtocol};
use advpatch::generators::{train_gan_epoch, Discriminator, GanTrainState, Generator};
use advpatch::patch::apply_patch;
use advpatch::rng::{stream_rng, Stream};
use advpatch::{imageio, Patch, Placement, Tensor};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use crate::config::{DatasetKind, Resolved};
use crate::setup;

fn kv(pairs: &[(&str, String)]) {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{}", line.join(" "));
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- prepare-data

pub fn check_prepare(r: &Resolved) -> Result<()> {
    let d = &r.config.dataset;
    match d.kind {
        DatasetKind::Synthetic => d.synthetic.validate()?,
        DatasetKind::Coco => {
            for (key, value) in [
                ("dataset.train_annotations", &d.train_annotations),
                ("dataset.train_images", &d.train_images),
                ("dataset.val_annotations", &d.val_annotations),
                ("dataset.val_images", &d.val_images),
            ] {
                match value {
                    None => bail!("missing required setting `{key}`"),
                    Some(p) if !p.exists() => bail!("`{key}` points to {}, which does not exist", p.display()),
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

/// COCO split with image paths made independent of its image root.
fn coco_split(annotations: &Path, images: &Path, split: Split) -> Result<DetectionDataset> {
    let mut ds = DetectionDataset::from_coco(annotations, images, Some(split))?;
    let root = fs::canonicalize(images).with_context(|| format!("resolving {}", images.display()))?;
    for rec in &mut ds.images {
        rec.file_name = root.join(&rec.file_name).to_string_lossy().into_owned();
    }
    Ok(ds)
}

pub fn run_prepare(r: &Resolved) -> Result<()> {
    let dir = r.manifest_dir();
    let d = &r.config.dataset;
    let full = match d.kind {
        DatasetKind::Synthetic => make_synthetic_dataset(&d.synthetic, r.config.seed)?.write_to(&dir)?,
        DatasetKind::Coco => {
            let opt = |p: &Option<PathBuf>| p.clone().expect("checked");
            DetectionDataset::concat(vec![
                coco_split(&opt(&d.train_annotations), &opt(&d.train_images), Split::Train)?,
                coco_split(&opt(&d.val_annotations), &opt(&d.val_images), Split::Test)?,
            ])?
        }
    };
    let (filtered, counts) = if d.classes.is_empty() {
        let n = (full.images.len(), full.annotations.len());
        (
            full.clone(),
            advpatch::data::FilterCounts {
                images_before: n.0,
                images_after: n.0,
                annotations_before: n.1,
                annotations_after: n.1,
            },
        )
    } else {
        full.filter_by_classes(&d.classes)?
    };
    let (train, test) = filtered.split_dataset(SplitProtocol::Inherit)?;
    train.save_coco(&setup::manifest_path(&dir, crate::config::SplitName::Train))?;
    test.save_coco(&setup::manifest_path(&dir, crate::config::SplitName::Test))?;
    let summary = serde_json::json!({
        "filter": counts,
        "classes": d.classes,
        "dataset": filtered.summary(),
        "train": train.summary(),
        "test": test.summary(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    r.write_snapshot(&dir)?;
    kv(&[
        ("images", filtered.len().to_string()),
        ("annotations", filtered.annotations.len().to_string()),
        ("train", train.len().to_string()),
        ("test", test.len().to_string()),
        ("manifest_dir", dir.display().to_string()),
    ]);
    Ok(())
}

// ---------------------------------------------------------------- train-gan

pub fn check_train_gan(r: &Resolved) -> Result<()> {
    let g = &r.config.generator;
    g.arch.validate()?;
    g.discriminator.validate()?;
    if g.arch.output_size() != g.discriminator.input_size() {
        bail!(
            "generator output {} does not match discriminator input {}",
            g.arch.output_size(),
            g.discriminator.input_size()
        );
    }
    let gan = &r.config.gan;
    if gan.epochs == 0 || gan.steps_per_epoch == 0 || gan.checkpoint_every == 0 || gan.batch_size == 0 {
        bail!("gan.epochs, gan.steps_per_epoch, gan.checkpoint_every and gan.batch_size must be positive");
    }
    if !(gan.lr > 0.0) {
        bail!("gan.lr must be positive");
    }
    setup::check_corpus(&r.config.corpus)
}

fn new_gan_state(r: &Resolved, init_from: Option<&Path>) -> Result<GanTrainState> {
    let g = &r.config.generator;
    let seed = r.config.seed;
    let generator = match init_from {
        Some(p) => Generator::load(p)?,
        None => Generator::new(g.arch.clone(), &mut stream_rng(seed, Stream::Weights, 0, 0))?,
    };
    let discriminator = Discriminator::new(g.discriminator.clone(), &mut stream_rng(seed, Stream::Weights, 1, 0))?;
    Ok(GanTrainState::new(generator, discriminator, r.config.gan.gan_config())?)
}

fn sample_grid(generator: &Generator, tiles: usize, seed: u64, class_id: Option<usize>) -> Result<Tensor> {
    let mut rng = stream_rng(seed, Stream::Init, 1, 0);
    let patches: Vec<Tensor> = (0..tiles * tiles)
        .map(|_| generator.generate(&generator.sample_latent(class_id, &mut rng)).map(Patch::into_tensor))
        .collect::<advpatch::Result<_>>()?;
    Ok(imageio::tile_grid(&patches, tiles)?)
}

pub fn run_train_gan(r: &Resolved) -> Result<()> {
    let dir = r.output_dir().join("gan");
    r.write_snapshot(&dir)?;
    let gan = &r.config.gan;
    let seed = r.config.seed;
    let mut state = new_gan_state(r, None)?;
    let corpus = setup::load_gan_corpus(&r.config.corpus, state.generator.output_size(), seed)?;
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "epoch,step,d_loss,g_loss,d_accuracy")?;
    for epoch in 0..gan.epochs {
        let mut rows = Vec::new();
        train_gan_epoch(&mut state, &corpus, epoch, gan.steps_per_epoch, seed, |e, s, l| {
            rows.push(format!("{e},{s},{},{},{}", l.d_loss, l.g_loss, l.d_accuracy));
            kv(&[
                ("epoch", e.to_string()),
                ("step", s.to_string()),
                ("d_loss", l.d_loss.to_string()),
                ("g_loss", l.g_loss.to_string()),
                ("d_accuracy", l.d_accuracy.to_string()),
            ]);
        })?;
        for row in rows {
            writeln!(metrics, "{row}")?;
        }
        let done = epoch + 1;
        if done % gan.checkpoint_every == 0 || done == gan.epochs {
            let ck = dir.join("checkpoints").join(format!("epoch_{done:06}"));
            state.generator.save(&ck.join("generator.json"))?;
            state.discriminator.save(&ck.join("discriminator.json"))?;
            let grid = sample_grid(&state.generator, gan.sample_tiles, seed, gan.class_id)?;
            imageio::save_png(&grid, &ck.join("samples.png"))?;
            kv(&[("checkpoint", ck.display().to_string())]);
        }
    }
    state.generator.save(&dir.join("generator.json"))?;
    state.discriminator.save(&dir.join("discriminator.json"))?;
    kv(&[
        ("generator", dir.join("generator.json").display().to_string()),
        ("digest", state.generator.digest()),
    ]);
    Ok(())
}

// ---------------------------------------------------------------- train-patch

pub fn check_train_patch(r: &Resolved) -> Result<()> {
    setup::check_detector(&r.config.detector)?;
    setup::check_manifest(r, r.config.dataset.train_split)?;
    match r.config.attack.source {
        PatchSource::Pixel => {}
        PatchSource::FrozenGenerator => {
            let p = setup::generator_weights(r);
            if !p.exists() {
                bail!(
                    "generator weights {} not found; set generator.weights or run `train-gan`",
                    p.display()
                );
            }
        }
        PatchSource::TrainedGenerator => {
            check_train_gan(r)?;
            if let Some(p) = &r.config.generator.weights {
                if !p.exists() {
                    bail!("`generator.weights` points to {}, which does not exist", p.display());
                }
            }
        }
    }
    Ok(())
}

fn progress(record: &EpochRecord) {
    let mut pairs = vec![
        ("epoch", record.epoch.to_string()),
        ("detector_loss", record.detector_loss.to_string()),
        ("tv_loss", record.tv_loss.to_string()),
        ("total_loss", record.total_loss.to_string()),
    ];
    if let (Some(g), Some(d)) = (record.g_loss, record.d_loss) {
        pairs.push(("g_loss", g.to_string()));
        pairs.push(("d_loss", d.to_string()));
    }
    pairs.push(("mean_objectness", record.mean_objectness.to_string()));
    if let Some(p) = record.proximity_objectness {
        pairs.push(("proximity_objectness", p.to_string()));
    }
    pairs.push(("detections", record.detections.to_string()));
    kv(&pairs);
}

fn attack_once(
    r: &Resolved,
    det: &dyn Detector,
    images: &[Tensor],
    run_dir: &Path,
    resume: bool,
) -> Result<AttackResult> {
    let cfg = &r.config.attack;
    let mut cb = progress;
    let opts = RunOptions {
        run_dir: Some(run_dir.to_path_buf()),
        resume,
        on_epoch: Some(&mut cb),
    };
    let result = match cfg.source {
        PatchSource::Pixel => pgd_patch_attack(det, images, cfg, opts)?,
        PatchSource::FrozenGenerator => {
            let generator = setup::load_frozen_generator(r)?;
            pretrained_gan_attack(det, &generator, images, cfg, opts)?
        }
        PatchSource::TrainedGenerator => {
            let mut state = new_gan_state(r, r.config.generator.weights.as_deref())?;
            let corpus = setup::load_gan_corpus(&r.config.corpus, state.generator.output_size(), r.config.seed)?;
            let out = combined_patch_gan_attack(det, &mut state, &corpus, images, cfg, opts)?;
            state.generator.save(&run_dir.join("generator.json"))?;
            out
        }
    };
    setup::save_patch(&result.patch, run_dir)?;
    if let Some(z) = &result.latent {
        write_json(&run_dir.join("latent.json"), z)?;
    }
    Ok(result)
}

pub fn run_train_patch(r: &Resolved, resume: bool) -> Result<()> {
    let det = setup::build_detector(&r.config.detector, r.config.seed)?;
    let ds = setup::load_split(r, r.config.dataset.train_split)?;
    let images = setup::load_images(&ds)?;
    if images.is_empty() {
        bail!("the training split has no images");
    }
    let dir = r.output_dir().join("patch");
    r.write_snapshot(&dir)?;
    match r.config.attack.mode {
        AttackMode::Universal => {
            let res = attack_once(r, det.as_ref(), &images, &dir, resume)?;
            kv(&[
                ("run_dir", dir.display().to_string()),
                ("epochs", res.trajectory.len().to_string()),
            ]);
        }
        AttackMode::PerInstance => {
            let results = per_instance(&images, |i, one| {
                let sub = dir.join(format!("image_{:06}", ds.images[i].id));
                attack_once(r, det.as_ref(), one, &sub, resume).map_err(|e| advpatch::Error::Contract(format!("{e:#}")))
            })?;
            kv(&[
                ("run_dir", dir.display().to_string()),
                ("instances", results.len().to_string()),
            ]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

fn eval_patch_path(r: &Resolved, flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| r.config.eval.patch.clone())
}

pub fn check_eval(r: &Resolved, patch: Option<&Path>) -> Result<()> {
    setup::check_detector(&r.config.detector)?;
    setup::check_manifest(r, r.config.dataset.eval_split)?;
    MatchProtocol {
        iou_threshold: r.config.eval.iou_threshold,
    }
    .validate()?;
    if let Some(p) = eval_patch_path(r, patch) {
        if !p.exists() {
            bail!("patch {} does not exist", p.display());
        }
    }
    Ok(())
}

struct Condition {
    name: String,
    patch: Option<Patch>,
}

fn detect_all(det: &dyn Detector, images: &[Tensor], patch: Option<&Patch>, placement: &Placement) -> Result<Vec<Vec<Detection>>> {
    images
        .par_iter()
        .map(|img| {
            let shown = match patch {
                Some(p) => apply_patch(img, p, placement)?,
                None => img.clone(),
            };
            detect(det, &shown)
        })
        .collect::<advpatch::Result<_>>()
        .map_err(Into::into)
}

pub fn run_eval(r: &Resolved, patch_flag: Option<&Path>) -> Result<()> {
    let det = setup::build_detector(&r.config.detector, r.config.seed)?;
    let ds = setup::load_split(r, r.config.dataset.eval_split)?;
    let images = setup::load_images(&ds)?;
    let ev = &r.config.eval;
    let placement = r.config.attack.placement;
    let names = ds.class_names();
    let class_ids: Vec<usize> = if ev.classes.is_empty() {
        (0..names.len()).collect()
    } else {
        ev.classes.iter().map(|c| ds.class_index(c)).collect::<advpatch::Result<_>>()?
    };
    let rows: Vec<String> = class_ids.iter().map(|&c| names[c].clone()).collect();
    let protocol = MatchProtocol {
        iou_threshold: ev.iou_threshold,
    };
    let gt = ds.all_labels();

    let mut conditions = vec![Condition {
        name: "clean".into(),
        patch: None,
    }];
    if ev.black_baseline {
        conditions.push(Condition {
            name: "black".into(),
            patch: Some(Patch::filled(placement.height, placement.width, 0.0)?),
        });
    }
    if let Some(p) = eval_patch_path(r, patch_flag) {
        conditions.push(Condition {
            name: "patch".into(),
            patch: Some(setup::load_patch(&p)?),
        });
    }

    let dir = r.output_dir().join("eval");
    r.write_snapshot(&dir)?;
    let mut reports = Vec::new();
    let mut clean_dets: Vec<Vec<Detection>> = Vec::new();
    for cond in &conditions {
        let dets = detect_all(det.as_ref(), &images, cond.patch.as_ref(), &placement)?;
        let per_image = ds
            .images
            .iter()
            .zip(&dets)
            .map(|(rec, d)| ImageDetections {
                image_id: rec.id,
                file_name: rec.file_name.clone(),
                detections: d.clone(),
            })
            .collect();
        let mut report = EvalReport::new(cond.name.clone(), per_image, &gt, &class_ids, &names, protocol)?;
        if cond.patch.is_some() {
            report.proximity = Some(proximity_report(&clean_dets, &dets, &placement, ev.proximity_radius));
        } else {
            clean_dets = dets.clone();
        }
        report.save_json(&dir.join(format!("{}.json", cond.name)))?;
        let mut pairs = vec![("condition", cond.name.clone()), ("map", format!("{:.4}", report.map))];
        let aps: BTreeMap<String, String> = report
            .per_class
            .iter()
            .map(|c| (format!("AP_{}", c.name), format!("{:.4}", c.ap)))
            .collect();
        for (k, v) in &aps {
            pairs.push((k.as_str(), v.clone()));
        }
        kv(&pairs);
        if ev.render {
            let rdir = dir.join("render").join(&cond.name);
            for (i, (img, d)) in images.iter().zip(&dets).take(ev.render_limit).enumerate() {
                let shown = match &cond.patch {
                    Some(p) => apply_patch(img, p, &placement)?,
                    None => img.clone(),
                };
                let out = render_annotated(&shown, d, &names, cond.patch.as_ref().map(|_| &placement));
                imageio::save_png(&out, &rdir.join(format!("{:06}.png", ds.images[i].id)))?;
            }
        }
        reports.push(report);
    }
    advpatch::eval::save_comparison_table(&dir.join("comparison.csv"), &reports, &rows)?;
    kv(&[("report_dir", dir.display().to_string())]);
    Ok(())
}

// ---------------------------------------------------------------- render

pub fn check_render(r: &Resolved, images: &[PathBuf], patch: Option<&Path>) -> Result<()> {
    setup::check_detector(&r.config.detector)?;
    if images.is_empty() {
        setup::check_manifest(r, r.config.dataset.eval_split)?;
    }
    for p in images.iter().map(PathBuf::as_path).chain(patch) {
        if !p.exists() {
            bail!("{} does not exist", p.display());
        }
    }
    Ok(())
}

pub fn run_render(r: &Resolved, image_paths: &[PathBuf], patch: Option<&Path>) -> Result<()> {
    let det = setup::build_detector(&r.config.detector, r.config.seed)?;
    let names = setup::class_names(&r.config.detector)?;
    let placement = r.config.attack.placement;
    let patch = patch.map(setup::load_patch).transpose()?;
    let inputs: Vec<(String, Tensor)> = if image_paths.is_empty() {
        let ds = setup::load_split(r, r.config.dataset.eval_split)?;
        ds.images
            .iter()
            .take(r.config.eval.render_limit)
            .map(|rec| Ok((format!("{:06}", rec.id), ds.load_image(rec)?)))
            .collect::<Result<_>>()?
    } else {
        image_paths
            .iter()
            .map(|p| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((stem, imageio::load_rgb(p)?))
            })
            .collect::<Result<_>>()?
    };
    let dir = r.output_dir().join("render");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (stem, img) in inputs {
        let shown = match &patch {
            Some(p) => apply_patch(&img, p, &placement)?,
            None => img,
        };
        let dets = detect(det.as_ref(), &shown)?;
        let out = render_annotated(&shown, &dets, &names, patch.as_ref().map(|_| &placement));
        let path = dir.join(format!("{stem}.png"));
        imageio::save_png(&out, &path)?;
        kv(&[("image", path.display().to_string()), ("detections", dets.len().to_string())]);
    }
    Ok(())
}
