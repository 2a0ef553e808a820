//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails. Criterion 9 runs only when `ADVPATCH_EXTENDED_DIR`
//! points at YOLOv3 weights and a prepared COCO subset.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advpatch::attacks::{
    combined_patch_gan_attack, pgd_patch_attack, pretrained_gan_attack, AttackConfig, AttackResult, PatchInit,
    PatchSource, RunOptions, Variant,
};
use advpatch::data::{make_flower_corpus, make_synthetic_dataset, DetectionDataset, Split, SyntheticSpec};
use advpatch::detector::{
    detect, image_gradient, vanish_loss, ConstantDetector, Detection, Detector, GroundTruthLabel, MockDetector,
    MockSpec, QuadraticDetector, YoloV3,
};
use advpatch::eval::{average_precision, EvalReport, ImageDetections, MatchProtocol};
use advpatch::generators::{
    train_gan, Discriminator, DiscriminatorArch, GanConfig, GanTrainState, Generator, GeneratorArch,
};
use advpatch::patch::{apply_patch, total_variation, total_variation_grad, transform_patch, LatentShift};
use advpatch::rng::{stream_rng, Stream};
use advpatch::{Patch, Placement, Tensor, TransformConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_text(&e))));
    let elapsed = t.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = out.pass && in_time;
    let limit_text = limit.map(|l| format!(" (limit {:.0} s)", l.as_secs_f64())).unwrap_or_default();
    println!(
        "{} criterion {id} {name}: {}; {:.1} s{limit_text}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn rgb() -> Vec<String> {
    ["red", "green", "blue"].iter().map(|s| s.to_string()).collect()
}

// ------------------------------------------------------------ criterion 1

/// Error relative to the larger magnitude, with the denominator floored at
/// `floor`.
fn rel_err(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

/// True when a ±h nudge of element `i` can cross a kink of |·| in TV.
fn near_tv_kink(t: &Tensor, i: usize, h: f64) -> bool {
    let [_, height, width] = t.shape();
    let plane = height * width;
    let (c, y, x) = (i / plane, (i % plane) / width, i % width);
    let v = t.get(c, y, x);
    let mut neighbours = Vec::with_capacity(4);
    if y > 0 {
        neighbours.push(t.get(c, y - 1, x));
    }
    if y + 1 < height {
        neighbours.push(t.get(c, y + 1, x));
    }
    if x > 0 {
        neighbours.push(t.get(c, y, x - 1));
    }
    if x + 1 < width {
        neighbours.push(t.get(c, y, x + 1));
    }
    neighbours.iter().any(|n| (v - n).abs() <= 2.0 * h + 1e-6)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut tv_worst, mut mock_worst) = (0.0f64, 0.0f64);
    let mut skipped = 0usize;
    let spec = MockSpec {
        input_size: 16,
        cell: 4,
        features: 4,
        ..MockSpec::desk(rgb())
    };
    for k in 0..100u64 {
        let h = 1e-5;
        let (ph, pw) = (rng.random_range(2..10), rng.random_range(2..10));
        let t = Tensor::from_fn(3, ph, pw, |_, _, _| rng.random::<f64>());
        let g = total_variation_grad(&t);
        for i in 0..t.len() {
            if near_tv_kink(&t, i, h) {
                skipped += 1;
                continue;
            }
            let (mut p, mut m) = (t.clone(), t.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (total_variation(&p) - total_variation(&m)) / (2.0 * h);
            // TV gradients are integers, so exact zeros are common; scale by 1.
            tv_worst = tv_worst.max(rel_err(fd, g.data()[i], 1.0));
        }

        let h = 1e-4;
        let det = MockDetector::random(spec.clone(), k, rng.random_range(0.0..0.6)).unwrap();
        let img = Tensor::from_fn(3, 16, 16, |_, _, _| rng.random::<f64>());
        let g = image_gradient(&det, &img, &[]).unwrap();
        for i in 0..img.len() {
            let (mut p, mut m) = (img.clone(), img.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (vanish_loss(&det, &p).unwrap() - vanish_loss(&det, &m).unwrap()) / (2.0 * h);
            mock_worst = mock_worst.max(rel_err(fd, g.data()[i], 1e-6));
        }
    }
    outcome(
        tv_worst < 1e-3 && mock_worst < 1e-3,
        format!("max rel err TV {tv_worst:.2e}, mock {mock_worst:.2e} over 100 inputs ({skipped} TV coords at kinks skipped)"),
    )
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Outcome {
    let (img_size, size, lr, steps) = (12, 5, 0.07, 16);
    let det = QuadraticDetector::new(img_size, [2, 3, 2 + size, 3 + size]);
    let images = vec![Tensor::filled(3, img_size, img_size, 0.4)];
    let cfg = AttackConfig {
        source: PatchSource::Pixel,
        lr,
        tv_weight: 0.0,
        patch_size: size,
        placement: Placement::new(2, 3, size, size),
        seed: 3,
        ..Default::default()
    };
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
    let mut reference: Vec<f64> = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
    let mut worst = 0.0f64;
    for step in 1..=steps {
        for v in reference.iter_mut() {
            let g = 2.0 * *v;
            let s = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
            *v = (*v - lr * s).clamp(0.0, 1.0);
        }
        let got = pgd_patch_attack(&det, &images, &AttackConfig { epochs: step, ..cfg.clone() }, RunOptions::default())
            .unwrap();
        for (a, b) in got.patch.pixels().data().iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= 1e-7,
        format!("{steps} steps x {} pixels, max deviation {worst:.1e}", reference.len()),
    )
}

// ------------------------------------------------------------ criterion 3

fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// AP as the mean over ground-truth boxes of the best precision reached at
/// or after the rank where each box is recovered (unrecovered boxes add 0).
fn oracle_ap(preds: &[Vec<Detection>], gts: &[Vec<GroundTruthLabel>], class: usize, thr: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.iter().filter(|l| l.class_id == class).count()).sum();
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (i, dets) in preds.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            if d.class_id == class {
                order.push((d.confidence, i, j));
            }
        }
    }
    if npos == 0 {
        return if order.is_empty() { None } else { Some(0.0) };
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for &(_, i, j) in &order {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts[i].iter().enumerate() {
            if g.class_id != class {
                continue;
            }
            let v = oracle_iou(&preds[i][j].bbox, &g.bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        let hit = match best {
            Some((k, v)) if v >= thr && !taken[i][k] => {
                taken[i][k] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|r| hits[..=r].iter().filter(|&&h| h).count() as f64 / (r + 1) as f64)
        .collect();
    let mut total = 0.0;
    for r in 0..hits.len() {
        if hits[r] {
            let best_after = precision[r..].iter().cloned().fold(0.0, f64::max);
            total += best_after;
        }
    }
    Some(total / npos as f64)
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
    [x, y, x + rng.random_range(1.0..20.0), y + rng.random_range(1.0..20.0)]
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for _ in 0..1000 {
        let n_images = rng.random_range(1..=10);
        let classes = rng.random_range(1..=3);
        let coarse_scores = rng.random_bool(0.3);
        let thr = [0.3, 0.5, 0.75][rng.random_range(0..3)];
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..n_images {
            let g: Vec<GroundTruthLabel> = (0..rng.random_range(0..=5))
                .map(|_| GroundTruthLabel {
                    bbox: random_box(&mut rng),
                    class_id: rng.random_range(0..classes),
                })
                .collect();
            let p: Vec<Detection> = (0..rng.random_range(0..=5))
                .map(|_| {
                    let (bbox, class_id) = match g.get(rng.random_range(0..=g.len())) {
                        Some(src) if rng.random_bool(0.7) => {
                            let j = |v: f64, r: &mut ChaCha8Rng| v + r.random_range(-3.0..3.0);
                            let mut b = [j(src.bbox[0], &mut rng), j(src.bbox[1], &mut rng), 0.0, 0.0];
                            b[2] = b[0] + (src.bbox[2] - src.bbox[0]) * rng.random_range(0.7..1.3);
                            b[3] = b[1] + (src.bbox[3] - src.bbox[1]) * rng.random_range(0.7..1.3);
                            (b, src.class_id)
                        }
                        _ => (random_box(&mut rng), rng.random_range(0..classes)),
                    };
                    let mut score: f64 = rng.random();
                    if coarse_scores {
                        score = (score * 4.0).round() / 4.0;
                    }
                    Detection {
                        bbox,
                        class_id,
                        objectness: score,
                        class_prob: 1.0,
                        confidence: score,
                    }
                })
                .collect();
            gts.push(g);
            preds.push(p);
        }
        let protocol = MatchProtocol { iou_threshold: thr };
        for c in 0..classes {
            let got = average_precision(&preds, &gts, c, &protocol);
            let want = oracle_ap(&preds, &gts, c, thr);
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return outcome(false, format!("presence mismatch: {got:?} vs {want:?}")),
            }
            compared += 1;
        }
    }
    outcome(
        worst <= 1e-9,
        format!("1000 instances, {compared} class APs, max |diff| {worst:.1e}"),
    )
}

// ------------------------------------------------------------ criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0usize;
    for call in 0..10_000 {
        let (ih, iw) = (rng.random_range(4..40), rng.random_range(4..40));
        let (ph, pw) = (rng.random_range(1..24), rng.random_range(1..24));
        let (rh, rw) = (rng.random_range(1..=ih), rng.random_range(1..=iw));
        let placement = Placement::new(rng.random_range(0..=iw - rw), rng.random_range(0..=ih - rh), rh, rw);
        let img = Tensor::from_fn(3, ih, iw, |_, _, _| rng.random::<f64>());
        let mut patch = Patch::random(ph, pw, &mut rng).unwrap();
        if call % 2 == 1 {
            let wide = rng.random_range(0.0..0.5);
            let cfg = TransformConfig {
                contrast: advpatch::patch::Interval::new(1.0 - wide, 1.0 + wide),
                brightness: advpatch::patch::Interval::new(-wide, wide),
                noise: advpatch::patch::Interval::new(-wide, wide),
            };
            patch = transform_patch(&patch, &cfg, &mut rng).unwrap();
            if rng.random_bool(0.5) {
                let mask = Patch::random(ph, pw, &mut rng).unwrap();
                patch = patch.latent_shift(&mask, rng.random()).unwrap();
            }
            if !patch.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)) {
                violations += 1;
            }
        }
        let out = apply_patch(&img, &patch, &placement).unwrap();
        for c in 0..3 {
            for y in 0..ih {
                for x in 0..iw {
                    let v = out.get(c, y, x);
                    let outside_changed = !placement.contains(x, y) && v.to_bits() != img.get(c, y, x).to_bits();
                    if !(0.0..=1.0).contains(&v) || outside_changed {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(violations == 0, format!("10000 calls, {violations} violations"))
}

// ------------------------------------------------------------ criteria 5, 6, 8

const DESK_PLACEMENT: (usize, usize, usize) = (16, 16, 32);
const DESK_RADIUS: f64 = 24.0;

fn desk_placement() -> Placement {
    let (x, y, s) = DESK_PLACEMENT;
    Placement::new(x, y, s, s)
}

fn desk_images() -> Vec<Tensor> {
    let (x, y, s) = DESK_PLACEMENT;
    let spec = SyntheticSpec {
        avoid: Some([x, y, x + s, y + s]),
        ..SyntheticSpec::desk(10, rgb())
    };
    make_synthetic_dataset(&spec, 0).unwrap().images
}

fn tiny_gan(seed: u64) -> GanTrainState {
    let g = Generator::new(
        GeneratorArch::Mlp {
            latent_dim: 4,
            hidden: vec![32],
            output_size: 16,
        },
        &mut stream_rng(seed, Stream::Weights, 0, 0),
    )
    .unwrap();
    let d = Discriminator::new(
        DiscriminatorArch::Mlp {
            hidden: vec![32],
            input_size: 16,
        },
        &mut stream_rng(seed, Stream::Weights, 1, 0),
    )
    .unwrap();
    GanTrainState::new(
        g,
        d,
        GanConfig {
            batch_size: 8,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Briefly trained on the two-mode flower corpus, then frozen.
fn tiny_frozen_generator() -> Generator {
    let mut state = tiny_gan(0);
    train_gan(&mut state, &make_flower_corpus(32, 16, 0), 30, 10, 0, |_, _, _| {}).unwrap();
    state.generator.freeze()
}

fn desk_config() -> AttackConfig {
    AttackConfig {
        source: PatchSource::FrozenGenerator,
        epochs: 500,
        lr: 0.01,
        tv_weight: 0.001,
        placement: desk_placement(),
        proximity_radius: DESK_RADIUS,
        checkpoint_every: 100,
        seed: 0,
        ..Default::default()
    }
}

struct DeskRun {
    generator: Generator,
    digest_before: String,
    result: AttackResult,
}

fn desk_run(dir: &Path) -> DeskRun {
    let generator = tiny_frozen_generator();
    let digest_before = generator.digest();
    let result = pretrained_gan_attack(
        &color_blobs(),
        &generator,
        &desk_images(),
        &desk_config(),
        RunOptions {
            run_dir: Some(dir.to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    DeskRun {
        generator,
        digest_before,
        result,
    }
}

fn color_blobs() -> MockDetector {
    MockDetector::color_blobs(rgb()).unwrap()
}

/// Scalar re-implementation of the mock detector's forward pass, read
/// straight from its weights file.
struct OracleMock {
    input: usize,
    cell: usize,
    features: usize,
    head: usize,
    acts: Vec<String>,
    tensors: Vec<Vec<f64>>,
}

impl OracleMock {
    fn load(path: &Path) -> Self {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        let arch = &v["architecture"];
        let n = |k: &str| arch[k].as_u64().unwrap() as usize;
        Self {
            input: n("input_size"),
            cell: n("cell"),
            features: n("features"),
            head: 5 + arch["class_names"].as_array().unwrap().len(),
            acts: arch["activations"]
                .as_array()
                .unwrap()
                .iter()
                .map(|a| a["kind"].as_str().unwrap().to_string())
                .collect(),
            tensors: serde_json::from_value(v["tensors"].clone()).unwrap(),
        }
    }

    fn act(kind: &str, x: f64) -> f64 {
        match kind {
            "identity" => x,
            "tanh" => x.tanh(),
            "sigmoid" => 1.0 / (1.0 + (-x).exp()),
            "relu" => x.max(0.0),
            other => panic!("oracle does not model activation {other}"),
        }
    }

    /// `[c][y][x]` convolution with square kernel `k`, zero padding `pad`.
    #[allow(clippy::too_many_arguments)]
    fn conv(x: &[Vec<Vec<f64>>], w: &[f64], b: &[f64], out_c: usize, k: usize, stride: usize, pad: usize) -> Vec<Vec<Vec<f64>>> {
        let (in_c, h, wd) = (x.len(), x[0].len(), x[0][0].len());
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![vec![vec![0.0; ow]; oh]; out_c];
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for i in 0..in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += w[((o * in_c + i) * k + ky) * k + kx] * x[i][y as usize][xx as usize];
                            }
                        }
                    }
                    out[o][oy][ox] = s;
                }
            }
        }
        out
    }

    /// `(centre x, centre y, objectness)` per cell, row-major.
    fn cells(&self, img: &Tensor) -> Vec<(f64, f64, f64)> {
        assert_eq!(img.shape(), [3, self.input, self.input]);
        let mut x: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|c| (0..self.input).map(|y| (0..self.input).map(|xx| img.get(c, y, xx)).collect()).collect())
            .collect();
        let f = self.features;
        let stages = [(f, 3, 1, 1), (f, self.cell, self.cell, 0), (f, 3, 1, 1)];
        for (s, &(oc, k, stride, pad)) in stages.iter().enumerate() {
            x = Self::conv(&x, &self.tensors[2 * s], &self.tensors[2 * s + 1], oc, k, stride, pad);
            for v in x.iter_mut().flatten().flatten() {
                *v = Self::act(&self.acts[s], *v);
            }
        }
        let head = Self::conv(&x, &self.tensors[6], &self.tensors[7], self.head, 1, 1, 0);
        let g = self.input / self.cell;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut out = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                let r = head[0][gy][gx].max(0.0);
                out.push((
                    (gx as f64 + sig(head[1][gy][gx])) * self.cell as f64,
                    (gy as f64 + sig(head[2][gy][gx])) * self.cell as f64,
                    r * r / (1.0 + r * r),
                ));
            }
        }
        out
    }

    /// Mean over images of the mean objectness of cells centred within
    /// `radius` of the placement centre.
    fn proximity(&self, images: &[Tensor], patch: &Patch, placement: &Placement, radius: f64) -> f64 {
        let (px, py) = (
            placement.x as f64 + placement.width as f64 / 2.0,
            placement.y as f64 + placement.height as f64 / 2.0,
        );
        let per_image: Vec<f64> = images
            .iter()
            .map(|img| {
                let shown = apply_patch(img, patch, placement).unwrap();
                let near: Vec<f64> = self
                    .cells(&shown)
                    .into_iter()
                    .filter(|&(cx, cy, _)| (cx - px).hypot(cy - py) <= radius)
                    .map(|c| c.2)
                    .collect();
                near.iter().sum::<f64>() / near.len() as f64
            })
            .collect();
        per_image.iter().sum::<f64>() / per_image.len() as f64
    }
}

fn criterion_5(dir: &Path) -> Outcome {
    let DeskRun {
        generator, result, ..
    } = desk_run(dir);
    let traj = &result.trajectory;
    let first = traj[0].proximity_objectness.unwrap();
    let last = traj.last().unwrap().proximity_objectness.unwrap();
    let drop = 1.0 - last / first;

    // Independent check of the end points with the scalar detector.
    let det = color_blobs();
    let weights = dir.join("oracle-mock.json");
    det.save(&weights).unwrap();
    let oracle = OracleMock::load(&weights);
    let images = desk_images();
    let cfg = desk_config();
    let z0 = generator.sample_latent(cfg.class_id, &mut stream_rng(cfg.seed, Stream::Init, 0, 0));
    let start = generator.generate(&z0).unwrap();
    let end = generator.generate(result.latent.as_ref().unwrap()).unwrap();
    let mut agreement = 0.0f64;
    for img in &images {
        let shown = apply_patch(img, &end, &cfg.placement).unwrap();
        for (p, (cx, cy, obj)) in det.predict(&shown).unwrap().iter().zip(oracle.cells(&shown)) {
            let (px, py) = p.center();
            agreement = agreement.max((px - cx).abs()).max((py - cy).abs()).max((p.objectness - obj).abs());
        }
    }
    let o_start = oracle.proximity(&images, &start, &cfg.placement, DESK_RADIUS);
    let o_end = oracle.proximity(&images, &end, &cfg.placement, DESK_RADIUS);
    let o_drop = 1.0 - o_end / o_start;
    outcome(
        drop >= 0.5 && o_drop >= 0.5 && agreement < 1e-9,
        format!(
            "proximity objectness {first:.4} -> {last:.4} (drop {:.1}%); scalar oracle {o_start:.4} -> {o_end:.4} (drop {:.1}%), max disagreement {agreement:.1e}",
            100.0 * drop,
            100.0 * o_drop
        ),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walk(dir)
        .into_iter()
        .filter_map(|p| p.strip_prefix(dir).ok().map(Path::to_path_buf))
        .filter(|p| p.starts_with("checkpoints") || p == Path::new("metrics.csv"))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn criterion_6(first: &Path, second: &Path) -> Outcome {
    desk_run(second);
    let (a, b) = (files_under(first), files_under(second));
    if a != b {
        return outcome(false, format!("file sets differ: {a:?} vs {b:?}"));
    }
    let differing: Vec<&PathBuf> = a
        .iter()
        .filter(|p| std::fs::read(first.join(p)).unwrap() != std::fs::read(second.join(p)).unwrap())
        .collect();
    let pngs = a.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    outcome(
        differing.is_empty() && pngs > 0,
        format!("{} files compared ({pngs} patch PNGs), {} differ", a.len(), differing.len()),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = desk_run(dir.path());
    let mut digests = vec![run.digest_before.clone(), run.generator.digest()];
    // a second run with every patch-side option switched on
    let cfg = AttackConfig {
        epochs: 20,
        transform: true,
        latent_shift: true,
        ..desk_config()
    };
    pretrained_gan_attack(&color_blobs(), &run.generator, &desk_images(), &cfg, RunOptions::default()).unwrap();
    digests.push(run.generator.digest());
    let saved = dir.path().join("g.json");
    run.generator.save(&saved).unwrap();
    digests.push(Generator::load(&saved).unwrap().digest());
    let unchanged = digests.iter().all(|d| *d == digests[0]);
    outcome(unchanged, format!("digest {}... identical across {} readings", &digests[0][..12], digests.len()))
}

// ------------------------------------------------------------ criterion 7

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn criterion_7() -> Outcome {
    let flowers = make_flower_corpus(32, 16, 7);
    let spec = SyntheticSpec {
        avoid: Some([16, 16, 48, 48]),
        ..SyntheticSpec::desk(4, rgb())
    };
    let images = make_synthetic_dataset(&spec, 7).unwrap().images;
    let det = color_blobs();
    let base = AttackConfig {
        source: PatchSource::TrainedGenerator,
        epochs: 200,
        placement: desk_placement(),
        proximity_radius: DESK_RADIUS,
        seed: 7,
        ..Default::default()
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for v in [Variant::V1, Variant::V2, Variant::V3] {
        let mut state = tiny_gan(7);
        let cfg = AttackConfig {
            variant: Some(v),
            ..base.clone()
        };
        let r = combined_patch_gan_attack(&det, &mut state, &flowers, &images, &cfg, RunOptions::default()).unwrap();
        let finite = r.trajectory.len() == 200
            && r.trajectory.iter().all(|e| {
                [e.detector_loss, e.tv_loss, e.total_loss, e.g_loss.unwrap(), e.d_loss.unwrap()]
                    .iter()
                    .all(|x| x.is_finite())
            });
        let (lo, hi) = r.patch.pixels().min_max();
        let in_range = (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi);
        let det_loss: Vec<f64> = r.trajectory.iter().map(|e| e.detector_loss).collect();
        let (head, tail) = (median(&det_loss[..50]), median(&det_loss[150..]));
        let mut pass = finite && in_range;
        if v == Variant::V2 {
            pass &= tail <= head;
        }
        ok &= pass;
        notes.push(format!(
            "{v:?} {} (detector loss median {head:.3} -> {tail:.3})",
            if pass { "ok" } else { "bad" }
        ));
    }

    let zero = ConstantDetector::new(64, 0.5);
    let cfg = AttackConfig {
        variant: Some(Variant::V1),
        epochs: 50,
        ..base.clone()
    };
    let mut combined = tiny_gan(8);
    combined_patch_gan_attack(&zero, &mut combined, &flowers, &images, &cfg, RunOptions::default()).unwrap();
    let mut plain = tiny_gan(8);
    train_gan(&mut plain, &flowers, cfg.epochs, images.len() as u64, cfg.seed, |_, _, _| {}).unwrap();
    let same = combined.generator.network().params() == plain.generator.network().params()
        && combined.discriminator.network().params() == plain.discriminator.network().params();
    ok &= same;
    notes.push(format!("V1 with zero detector gradient equals plain GAN training: {same}"));
    outcome(ok, notes.join("; "))
}

// ------------------------------------------------------------ criterion 9

fn extended_dir() -> Option<PathBuf> {
    std::env::var_os("ADVPATCH_EXTENDED_DIR").map(PathBuf::from)
}

fn evaluate(det: &dyn Detector, ds: &DetectionDataset, patch: Option<&Patch>, placement: &Placement) -> EvalReport {
    let per_image = ds
        .images
        .iter()
        .map(|rec| {
            let img = ds.load_image(rec).unwrap();
            let shown = match patch {
                Some(p) => apply_patch(&img, p, placement).unwrap(),
                None => img,
            };
            ImageDetections {
                image_id: rec.id,
                file_name: rec.file_name.clone(),
                detections: detect(det, &shown).unwrap(),
            }
        })
        .collect();
    let names = ds.class_names();
    let ids: Vec<usize> = (0..names.len()).collect();
    EvalReport::new("eval", per_image, &ds.all_labels(), &ids, &names, MatchProtocol::default()).unwrap()
}

/// Expects `yolov3.cfg`, `yolov3.weights`, `coco.names` and the two manifests
/// written by `advpatch prepare-data` (image paths absolute).
fn criterion_9(dir: &Path) -> Outcome {
    let det = YoloV3::load(
        &dir.join("yolov3.cfg"),
        &dir.join("yolov3.weights"),
        advpatch::detector::read_class_names(&dir.join("coco.names")).unwrap(),
    )
    .unwrap();
    let load = |file: &str, split| DetectionDataset::from_coco(&dir.join(file), dir, Some(split)).unwrap();
    let train = load("instances_train.json", Split::Train);
    let test = load("instances_test.json", Split::Test);
    let placement = Placement::new(100, 100, 100, 100);
    let clean = evaluate(&det, &test, None, &placement);
    let black = evaluate(&det, &test, Some(&Patch::filled(100, 100, 0.0).unwrap()), &placement);
    let epochs = std::env::var("ADVPATCH_EXTENDED_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1000);
    let images: Vec<Tensor> = train.images.iter().map(|r| train.load_image(r).unwrap()).collect();
    let cfg = AttackConfig {
        source: PatchSource::Pixel,
        epochs,
        patch_init: PatchInit::Random,
        placement,
        ..Default::default()
    };
    let r = pgd_patch_attack(&det, &images, &cfg, RunOptions::default()).unwrap();
    let attacked = evaluate(&det, &test, Some(&r.patch), &placement);
    let person = attacked.ap("person").unwrap_or(f64::NAN);
    let pass = (clean.map - 43.8).abs() <= 2.0
        && attacked.map < 10.0
        && person < 60.0
        && attacked.map < black.map
        && black.map < clean.map;
    outcome(
        pass,
        format!(
            "mAP clean {:.1}, black {:.1}, PGD {:.1}; AP_person under PGD {person:.1}",
            clean.map, black.map, attacked.map
        ),
    )
}

fn main() {
    // Under `cargo test`, extra arguments are test filters; this target runs
    // everything or, when listing, nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let secs = |s: u64| Some(Duration::from_secs(s));
    let desk = tempfile::tempdir().unwrap();
    let desk_again = tempfile::tempdir().unwrap();
    let results = [
        run("1", "gradient correctness", secs(30), criterion_1),
        run("2", "PGD step oracle", secs(5), criterion_2),
        run("3", "AP oracle equivalence", secs(60), criterion_3),
        run("4", "compositing and projection invariants", secs(30), criterion_4),
        run("5", "end-to-end desk attack", mins(2), || criterion_5(desk.path())),
        run("6", "determinism", None, || criterion_6(desk.path(), desk_again.path())),
        run("7", "combined-training smoke", mins(3), criterion_7),
        run("8", "frozen-generator contract", None, criterion_8),
    ];
    match extended_dir() {
        Some(dir) => {
            let ok = run("9", "extended YOLOv3 / COCO track", None, || criterion_9(&dir));
            if !ok {
                std::process::exit(1);
            }
        }
        None => println!("SKIP criterion 9 extended YOLOv3 / COCO track: ADVPATCH_EXTENDED_DIR not set"),
    }
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
