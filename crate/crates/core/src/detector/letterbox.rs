use serde::{Deserialize, Serialize};

use crate::patch::{resize_bilinear, resize_bilinear_backward};
use crate::tensor::Tensor;

/// Gray used for letterbox padding.
pub const PAD_VALUE: f64 = 0.5;

/// Aspect-preserving resize into a square detector input with centred gray
/// padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub src_height: usize,
    pub src_width: usize,
    pub size: usize,
    pub new_height: usize,
    pub new_width: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn new(src_height: usize, src_width: usize, size: usize) -> Self {
        let scale = (size as f64 / src_width as f64).min(size as f64 / src_height as f64);
        let new_width = ((src_width as f64 * scale).round() as usize).clamp(1, size);
        let new_height = ((src_height as f64 * scale).round() as usize).clamp(1, size);
        Self {
            src_height,
            src_width,
            size,
            new_height,
            new_width,
            pad_x: (size - new_width) / 2,
            pad_y: (size - new_height) / 2,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src_height == self.size && self.src_width == self.size
    }

    fn scale_x(&self) -> f64 {
        self.new_width as f64 / self.src_width as f64
    }

    fn scale_y(&self) -> f64 {
        self.new_height as f64 / self.src_height as f64
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        if self.is_identity() {
            return image.clone();
        }
        let resized = resize_bilinear(image, self.new_height, self.new_width);
        let mut out = Tensor::filled(image.channels(), self.size, self.size, PAD_VALUE);
        out.paste(self.pad_y, self.pad_x, &resized);
        out
    }

    /// Maps a gradient on the detector input back to the source image.
    pub fn backward(&self, grad_input: &Tensor) -> Tensor {
        if self.is_identity() {
            return grad_input.clone();
        }
        let window = grad_input.crop(self.pad_y, self.pad_x, self.new_height, self.new_width);
        resize_bilinear_backward(&window, self.src_height, self.src_width)
    }

    /// Source-image box to detector-input box.
    pub fn to_input(&self, b: [f64; 4]) -> [f64; 4] {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        [
            b[0] * sx + self.pad_x as f64,
            b[1] * sy + self.pad_y as f64,
            b[2] * sx + self.pad_x as f64,
            b[3] * sy + self.pad_y as f64,
        ]
    }

    /// Detector-input box to source-image box, clipped to the image.
    pub fn to_image(&self, b: [f64; 4]) -> [f64; 4] {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        let (w, h) = (self.src_width as f64, self.src_height as f64);
        [
            ((b[0] - self.pad_x as f64) / sx).clamp(0.0, w),
            ((b[1] - self.pad_y as f64) / sy).clamp(0.0, h),
            ((b[2] - self.pad_x as f64) / sx).clamp(0.0, w),
            ((b[3] - self.pad_y as f64) / sy).clamp(0.0, h),
        ]
    }
}
