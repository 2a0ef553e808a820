//! Directory-of-images corpora with an optional exclusion list.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::imageio;
use crate::patch::resize_bilinear;
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

/// Image files under `root`, sorted by relative path.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCorpus {
    pub root: PathBuf,
    /// Relative to `root`, `/`-separated.
    pub paths: Vec<String>,
    pub excluded: usize,
    /// Files that failed to decode.
    pub skipped: usize,
}

/// Parses an exclusion list: one relative path per line, blank lines and
/// `#` comments ignored.
pub fn read_exclusion_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_exclusions(&text))
}

fn parse_exclusions(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.trim_start_matches("./").replace('\\', "/"))
        .collect()
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Walks `root` for image files, drops excluded paths, and skips files
/// whose header cannot be read.
pub fn load_corpus(root: &Path, exclusion_list: Option<&Path>) -> Result<ImageCorpus> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("corpus directory {} does not exist", root.display())));
    }
    let exclusions = match exclusion_list {
        Some(p) => read_exclusion_list(p)?,
        None => BTreeSet::new(),
    };
    let mut found = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| Error::Dataset(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            let rel = entry
                .path()
                .strip_prefix(root)
                .expect("walkdir yields paths under root")
                .to_string_lossy()
                .replace('\\', "/");
            found.push(rel);
        }
    }
    found.sort();

    let mut paths = Vec::with_capacity(found.len());
    let (mut excluded, mut skipped) = (0, 0);
    for rel in found {
        if exclusions.contains(&rel) {
            excluded += 1;
            continue;
        }
        match imageio::probe_dimensions(&root.join(&rel)) {
            Ok(_) => paths.push(rel),
            Err(e) => {
                log::warn!("skipping unreadable image: {e}");
                skipped += 1;
            }
        }
    }
    if paths.is_empty() {
        log::warn!("image corpus at {} is empty after exclusions", root.display());
    }
    Ok(ImageCorpus {
        root: root.to_path_buf(),
        paths,
        excluded,
        skipped,
    })
}

impl ImageCorpus {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.paths.iter().map(|p| self.root.join(p))
    }

    /// Decodes every image, center-crops it to a square and resizes to
    /// `size`×`size`. Files that fail to decode are skipped with a warning.
    pub fn load_images(&self, size: usize) -> Vec<Tensor> {
        self.iter()
            .filter_map(|p| match imageio::load_rgb(&p) {
                Ok(img) => Some(square_resize(&img, size)),
                Err(e) => {
                    log::warn!("skipping undecodable image: {e}");
                    None
                }
            })
            .collect()
    }
}

/// Largest centered square crop, resized bilinearly.
pub fn square_resize(img: &Tensor, size: usize) -> Tensor {
    let side = img.height().min(img.width());
    let y = (img.height() - side) / 2;
    let x = (img.width() - side) / 2;
    let sq = img.crop(y, x, side, side);
    if side == size {
        sq
    } else {
        resize_bilinear(&sq, size, size)
    }
}
