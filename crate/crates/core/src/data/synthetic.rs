//! Seeded synthetic data: colored shapes with exact boxes, and a small
//! two-mode flower corpus for GAN smoke training.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Annotation, ClassEntry, DetectionDataset, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.5;

/// Fill color of class `k` is `CLASS_COLORS[k % 3]`.
pub const CLASS_COLORS: [[f64; 3]; 3] = [[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]];

const PLACEMENT_ATTEMPTS: usize = 200;

/// COCO files written by [`SyntheticDataset::write_to`], train then test.
pub const SPLIT_FILES: [&str; 2] = ["instances_train.json", "instances_test.json"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub shapes_per_image: usize,
    pub height: usize,
    pub width: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub class_names: Vec<String>,
    /// The last `test_images` images get the test split; the rest train.
    #[serde(default)]
    pub test_images: usize,
    /// `[x1, y1, x2, y2]` region that shapes must not touch, e.g. where a
    /// patch will go.
    #[serde(default)]
    pub avoid: Option<[usize; 4]>,
}

impl SyntheticSpec {
    pub fn desk(num_images: usize, class_names: Vec<String>) -> Self {
        Self {
            num_images,
            shapes_per_image: 2,
            height: 64,
            width: 64,
            min_size: 12,
            max_size: 20,
            class_names,
            test_images: 0,
            avoid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let degenerate = |why: String| Err(Error::Config(format!("degenerate synthetic canvas: {why}")));
        if self.height == 0 || self.width == 0 {
            return degenerate(format!("{}x{}", self.height, self.width));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return degenerate(format!("shape sizes {}..={}", self.min_size, self.max_size));
        }
        if self.max_size > self.height || self.max_size > self.width {
            return degenerate(format!(
                "shapes up to {} do not fit {}x{}",
                self.max_size, self.height, self.width
            ));
        }
        if self.class_names.is_empty() && self.shapes_per_image > 0 {
            return degenerate("no classes".into());
        }
        if self.test_images > self.num_images {
            return Err(Error::Config("more test images than images".into()));
        }
        Ok(())
    }
}

/// A generated dataset together with its decoded images, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: DetectionDataset,
    pub images: Vec<Tensor>,
}

fn overlaps(a: [usize; 4], b: [usize; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn expand(b: [usize; 4], by: usize) -> [usize; 4] {
    [b[0].saturating_sub(by), b[1].saturating_sub(by), b[2] + by, b[3] + by]
}

/// Paints one shape and returns its tight pixel box.
fn paint(img: &mut Tensor, rect: [usize; 4], ellipse: bool, color: [f64; 3]) -> [f64; 4] {
    let [x1, y1, x2, y2] = rect;
    let (cx, cy) = ((x1 + x2) as f64 / 2.0, (y1 + y2) as f64 / 2.0);
    let (rx, ry) = ((x2 - x1) as f64 / 2.0, (y2 - y1) as f64 / 2.0);
    let mut tight = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
    for y in y1..y2 {
        for x in x1..x2 {
            let inside = !ellipse || {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            };
            if inside {
                for (c, &v) in color.iter().enumerate() {
                    img.set(c, y, x, v);
                }
                tight = [
                    tight[0].min(x as f64),
                    tight[1].min(y as f64),
                    tight[2].max(x as f64 + 1.0),
                    tight[3].max(y as f64 + 1.0),
                ];
            }
        }
    }
    tight
}

/// Draws non-overlapping rectangles and ellipses on a gray canvas. Boxes are
/// the tight bounds of painted pixels, so they are exact.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let classes = spec
        .class_names
        .iter()
        .enumerate()
        .map(|(k, n)| ClassEntry {
            name: n.clone(),
            category_id: k as u64 + 1,
        })
        .collect();
    let mut dataset = DetectionDataset::empty("", classes);
    let mut images = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let mut rng = stream_rng(seed, Stream::Synthetic, 0, i as u64);
        let id = i as u64 + 1;
        let mut img = Tensor::filled(3, spec.height, spec.width, BACKGROUND);
        let mut taken: Vec<[usize; 4]> = spec.avoid.into_iter().collect();
        for _ in 0..spec.shapes_per_image {
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let w = rng.random_range(spec.min_size..=spec.max_size);
                let h = rng.random_range(spec.min_size..=spec.max_size);
                let x = rng.random_range(0..=spec.width - w);
                let y = rng.random_range(0..=spec.height - h);
                let rect = [x, y, x + w, y + h];
                // one pixel of clearance keeps neighbouring boxes separable
                if taken.iter().all(|&t| !overlaps(expand(rect, 1), t)) {
                    placed = Some(rect);
                    break;
                }
            }
            let rect = placed.ok_or_else(|| {
                Error::Config(format!(
                    "degenerate synthetic canvas: cannot fit {} shapes in {}x{}",
                    spec.shapes_per_image, spec.height, spec.width
                ))
            })?;
            taken.push(rect);
            let class_id = rng.random_range(0..spec.class_names.len());
            let ellipse = rng.random_bool(0.5);
            let bbox = paint(&mut img, rect, ellipse, CLASS_COLORS[class_id % CLASS_COLORS.len()]);
            dataset.annotations.push(Annotation {
                image_id: id,
                class_id,
                bbox,
            });
        }
        let split = if i >= spec.num_images - spec.test_images {
            Split::Test
        } else {
            Split::Train
        };
        dataset.images.push(ImageRecord {
            id,
            file_name: format!("synth_{id:05}.png"),
            width: spec.width as u32,
            height: spec.height as u32,
            split: Some(split),
        });
        images.push(img);
    }
    Ok(SyntheticDataset { dataset, images })
}

impl SyntheticDataset {
    /// Writes PNGs plus one COCO file per split (`instances_train.json`,
    /// `instances_test.json`) into `dir`. The returned dataset is rooted at
    /// `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<DetectionDataset> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (rec, img) in self.dataset.images.iter().zip(&self.images) {
            imageio::save_png(img, &dir.join(&rec.file_name))?;
        }
        let (train, test) = self.dataset.split_dataset(super::SplitProtocol::Inherit)?;
        train.save_coco(&dir.join(SPLIT_FILES[0]))?;
        test.save_coco(&dir.join(SPLIT_FILES[1]))?;
        let mut out = self.dataset.clone();
        out.root = dir.to_path_buf();
        Ok(out)
    }
}

/// Images of two visually distinct modes, alternating: a bright flower
/// (white petals, yellow disc) on dark foliage, and a dark violet bloom on a
/// pale sky. Positions, radii and tints vary with the seed.
pub fn make_flower_corpus(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Synthetic, 1, i as u64);
            let s = size as f64;
            let cx = s * rng.random_range(0.4..0.6);
            let cy = s * rng.random_range(0.4..0.6);
            let r = s * rng.random_range(0.28..0.38);
            let tint: f64 = rng.random_range(-0.05..0.05);
            let (bg, petal, disc) = if i % 2 == 0 {
                ([0.1, 0.3 + tint, 0.1], [0.95, 0.95, 0.9 + tint], [0.95, 0.8 + tint, 0.1])
            } else {
                ([0.7 + tint, 0.8, 0.95], [0.35 + tint, 0.1, 0.45], [0.15, 0.05, 0.2])
            };
            Tensor::from_fn(3, size, size, |c, y, x| {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                let petals = r * (0.75 + 0.25 * (5.0 * dy.atan2(dx)).cos());
                if d < 0.3 * r {
                    disc[c]
                } else if d < petals {
                    petal[c]
                } else {
                    bg[c]
                }
            })
        })
        .collect()
}
