//! Detection datasets in COCO form, image corpora with exclusion lists, and
//! synthetic desk-scale data.

mod coco;
mod corpus;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::GroundTruthLabel;
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

pub use coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage};
pub use corpus::{load_corpus, read_exclusion_list, ImageCorpus};
pub use synthetic::{
    make_flower_corpus, make_synthetic_dataset, SyntheticDataset, SyntheticSpec, BACKGROUND, CLASS_COLORS, SPLIT_FILES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How to split a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// Keep each image's recorded source split.
    Inherit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    /// COCO category id used on export.
    pub category_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    /// Relative to the dataset root.
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub split: Option<Split>,
}

/// One ground-truth box. `class_id` indexes the dataset vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub class_id: usize,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDataset {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

/// Counts reported by [`DetectionDataset::filter_by_classes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub images_before: usize,
    pub images_after: usize,
    pub annotations_before: usize,
    pub annotations_after: usize,
}

/// Dataset summary report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub annotations: usize,
    pub per_class: BTreeMap<String, usize>,
    pub splits: BTreeMap<String, usize>,
}

impl DetectionDataset {
    pub fn empty(root: impl Into<PathBuf>, classes: Vec<ClassEntry>) -> Self {
        Self {
            root: root.into(),
            classes,
            images: Vec::new(),
            annotations: Vec::new(),
        }
    }

    /// Reads a COCO instances file. Crowd annotations are dropped, boxes are
    /// clipped to the image, and boxes left empty by clipping are dropped.
    /// Every image gets `split` as provenance.
    pub fn from_coco(json_path: &Path, image_root: &Path, split: Option<Split>) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let file: CocoFile = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: malformed COCO JSON: {e}", json_path.display())))?;
        Self::from_coco_file(file, image_root, split)
    }

    pub fn from_coco_file(file: CocoFile, image_root: &Path, split: Option<Split>) -> Result<Self> {
        let mut categories = file.categories;
        categories.sort_by_key(|c| c.id);
        let classes: Vec<ClassEntry> = categories
            .iter()
            .map(|c| ClassEntry {
                name: c.name.clone(),
                category_id: c.id,
            })
            .collect();
        let by_category: HashMap<u64, usize> = classes.iter().enumerate().map(|(i, c)| (c.category_id, i)).collect();
        let mut images: Vec<ImageRecord> = file
            .images
            .into_iter()
            .map(|im| ImageRecord {
                id: im.id,
                file_name: im.file_name,
                width: im.width,
                height: im.height,
                split,
            })
            .collect();
        images.sort_by_key(|i| i.id);
        let dims: HashMap<u64, (f64, f64)> = images
            .iter()
            .map(|i| (i.id, (i.width as f64, i.height as f64)))
            .collect();
        if dims.len() != images.len() {
            return Err(Error::Dataset("duplicate image ids".into()));
        }
        let mut annotations = Vec::with_capacity(file.annotations.len());
        for a in file.annotations {
            let &(w, h) = dims
                .get(&a.image_id)
                .ok_or_else(|| Error::Dataset(format!("annotation {} references missing image {}", a.id, a.image_id)))?;
            let &class_id = by_category
                .get(&a.category_id)
                .ok_or_else(|| Error::Dataset(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
            if a.iscrowd != 0 {
                continue;
            }
            let [x, y, bw, bh] = a.bbox;
            let bbox = [x.clamp(0.0, w), y.clamp(0.0, h), (x + bw).clamp(0.0, w), (y + bh).clamp(0.0, h)];
            if bbox[2] > bbox[0] && bbox[3] > bbox[1] {
                annotations.push(Annotation {
                    image_id: a.image_id,
                    class_id,
                    bbox,
                });
            }
        }
        Ok(Self {
            root: image_root.to_path_buf(),
            classes,
            images,
            annotations,
        })
    }

    /// Concatenates datasets sharing one vocabulary and image root.
    pub fn concat(parts: Vec<DetectionDataset>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut out = iter.next().ok_or_else(|| Error::Dataset("nothing to concatenate".into()))?;
        for p in iter {
            if p.classes != out.classes {
                return Err(Error::Dataset("cannot concatenate datasets with different vocabularies".into()));
            }
            out.images.extend(p.images);
            out.annotations.extend(p.annotations);
        }
        let ids: BTreeSet<u64> = out.images.iter().map(|i| i.id).collect();
        if ids.len() != out.images.len() {
            return Err(Error::Dataset("concatenated datasets share image ids".into()));
        }
        out.images.sort_by_key(|i| i.id);
        Ok(out)
    }

    pub fn to_coco(&self) -> CocoFile {
        CocoFile {
            images: self
                .images
                .iter()
                .map(|i| CocoImage {
                    id: i.id,
                    file_name: i.file_name.clone(),
                    width: i.width,
                    height: i.height,
                })
                .collect(),
            annotations: self
                .annotations
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let (w, h) = (a.bbox[2] - a.bbox[0], a.bbox[3] - a.bbox[1]);
                    CocoAnnotation {
                        id: k as u64 + 1,
                        image_id: a.image_id,
                        category_id: self.classes[a.class_id].category_id,
                        bbox: [a.bbox[0], a.bbox[1], w, h],
                        area: w * h,
                        iscrowd: 0,
                    }
                })
                .collect(),
            categories: self
                .classes
                .iter()
                .map(|c| CocoCategory {
                    id: c.category_id,
                    name: c.name.clone(),
                    supercategory: String::new(),
                })
                .collect(),
        }
    }

    pub fn save_coco(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&self.to_coco())?).map_err(|e| Error::io(path, e))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn category_ids(&self) -> Vec<u64> {
        self.classes.iter().map(|c| c.category_id).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    /// Ground-truth boxes of one image, in image coordinates.
    pub fn labels(&self, image_id: u64) -> Vec<GroundTruthLabel> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| GroundTruthLabel {
                bbox: a.bbox,
                class_id: a.class_id,
            })
            .collect()
    }

    /// Ground truth for every image, in image order.
    pub fn all_labels(&self) -> Vec<Vec<GroundTruthLabel>> {
        let mut by_image: HashMap<u64, Vec<GroundTruthLabel>> = HashMap::new();
        for a in &self.annotations {
            by_image.entry(a.image_id).or_default().push(GroundTruthLabel {
                bbox: a.bbox,
                class_id: a.class_id,
            });
        }
        self.images
            .iter()
            .map(|i| by_image.remove(&i.id).unwrap_or_default())
            .collect()
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.file_name)
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<Tensor> {
        imageio::load_rgb(&self.image_path(record))
    }

    /// Keeps annotations whose class is in `names`, and images with at least
    /// one such annotation. The vocabulary and class indices are unchanged.
    pub fn filter_by_classes(&self, names: &[String]) -> Result<(Self, FilterCounts)> {
        let keep: BTreeSet<usize> = names.iter().map(|n| self.class_index(n)).collect::<Result<_>>()?;
        let annotations: Vec<Annotation> = self
            .annotations
            .iter()
            .filter(|a| keep.contains(&a.class_id))
            .cloned()
            .collect();
        let with_boxes: BTreeSet<u64> = annotations.iter().map(|a| a.image_id).collect();
        let images: Vec<ImageRecord> = self
            .images
            .iter()
            .filter(|i| with_boxes.contains(&i.id))
            .cloned()
            .collect();
        let counts = FilterCounts {
            images_before: self.images.len(),
            images_after: images.len(),
            annotations_before: self.annotations.len(),
            annotations_after: annotations.len(),
        };
        log::info!(
            "class filter kept {} of {} images and {} of {} annotations",
            counts.images_after,
            counts.images_before,
            counts.annotations_after,
            counts.annotations_before
        );
        Ok((
            Self {
                root: self.root.clone(),
                classes: self.classes.clone(),
                images,
                annotations,
            },
            counts,
        ))
    }

    /// Partitions into `(train, test)` by recorded provenance.
    pub fn split_dataset(&self, protocol: SplitProtocol) -> Result<(Self, Self)> {
        match protocol {
            SplitProtocol::Inherit => {
                if let Some(im) = self.images.iter().find(|i| i.split.is_none()) {
                    return Err(Error::Dataset(format!(
                        "image {} ({}) has no split provenance",
                        im.id, im.file_name
                    )));
                }
                let part = |s: Split| {
                    let images: Vec<ImageRecord> = self.images.iter().filter(|i| i.split == Some(s)).cloned().collect();
                    let ids: BTreeSet<u64> = images.iter().map(|i| i.id).collect();
                    Self {
                        root: self.root.clone(),
                        classes: self.classes.clone(),
                        annotations: self
                            .annotations
                            .iter()
                            .filter(|a| ids.contains(&a.image_id))
                            .cloned()
                            .collect(),
                        images,
                    }
                };
                Ok((part(Split::Train), part(Split::Test)))
            }
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut per_class: BTreeMap<String, usize> = self.classes.iter().map(|c| (c.name.clone(), 0)).collect();
        for a in &self.annotations {
            *per_class.entry(self.classes[a.class_id].name.clone()).or_default() += 1;
        }
        let mut splits = BTreeMap::new();
        for i in &self.images {
            let key = match i.split {
                Some(Split::Train) => "train",
                Some(Split::Test) => "test",
                None => "none",
            };
            *splits.entry(key.to_string()).or_default() += 1;
        }
        DatasetSummary {
            images: self.images.len(),
            annotations: self.annotations.len(),
            per_class,
            splits,
        }
    }
}
