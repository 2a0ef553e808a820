//! Conversions between tensors and image files.

use std::path::Path;

use image::{DynamicImage, ImageDecoder, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an image file into a 3×H×W tensor in `[0, 1]`, honouring EXIF
/// orientation when the decoder reports one.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let mut decoder = reader.into_decoder().map_err(|e| Error::image(path, e))?;
    let orientation = decoder.orientation().map_err(|e| Error::image(path, e))?;
    let mut img = DynamicImage::from_decoder(decoder).map_err(|e| Error::image(path, e))?;
    img.apply_orientation(orientation);
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Reads only the header to obtain `(width, height)`.
pub fn probe_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::image(path, e))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Quantises to 8 bits per channel with round-to-nearest.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", t.channels())));
    }
    let (h, w) = (t.height(), t.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                px[c] = quantize(t.get(c, y, x));
            }
        }
    }
    Ok(img)
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tensor_to_rgb(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Tiles equally sized tensors into a grid with `columns` tiles per row.
pub fn tile_grid(tiles: &[Tensor], columns: usize) -> Result<Tensor> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Shape("cannot tile zero images".into()))?;
    let [c, h, w] = first.shape();
    let columns = columns.max(1).min(tiles.len());
    let rows = tiles.len().div_ceil(columns);
    let mut out = Tensor::zeros(c, rows * h, columns * w);
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != [c, h, w] {
            return Err(Error::Shape(format!("tile {i} has shape {:?}, expected {:?}", t.shape(), [c, h, w])));
        }
        out.paste((i / columns) * h, (i % columns) * w, t);
    }
    Ok(out)
}
