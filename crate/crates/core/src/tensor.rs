//! Dense channel-major (C×H×W) tensors of `f64`.
//!
//! Every image, patch and activation in the crate is a single sample; batching
//! is done by iterating, so there is no batch axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A C×H×W grid stored row-major within each channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(r: RawTensor) -> Result<Self> {
        Self::from_vec(r.channels, r.height, r.width, r.data)
    }
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot be viewed as {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// A column vector (N×1×1).
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            channels: n,
            height: 1,
            width: 1,
            data,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(c, y, x);
        self.data[i] = value;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(c, y, x);
        self.data[i] += value;
    }

    /// Same data, different shape.
    pub fn reshape(mut self, channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels * height * width != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {channels}x{height}x{width}",
                self.shape()
            )));
        }
        self.channels = channels;
        self.height = height;
        self.width = width;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Copy of the `h`×`w` window with top-left corner (`y`, `x`).
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Tensor {
        debug_assert!(y + h <= self.height && x + w <= self.width);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for dy in 0..h {
                let src = self.offset(c, y + dy, x);
                let dst = out.offset(c, dy, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Overwrites the window at (`y`, `x`) with `src`.
    pub fn paste(&mut self, y: usize, x: usize, src: &Tensor) {
        debug_assert_eq!(self.channels, src.channels);
        debug_assert!(y + src.height <= self.height && x + src.width <= self.width);
        for c in 0..src.channels {
            for dy in 0..src.height {
                let s = src.offset(c, dy, 0);
                let d = self.offset(c, y + dy, x);
                self.data[d..d + src.width].copy_from_slice(&src.data[s..s + src.width]);
            }
        }
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::Shape(format!(
                    "channel concat of {:?} with spatial size {h}x{w}",
                    p.shape()
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(channels, h, w, data)
    }

    /// Splits along channels into pieces with the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Tensor>> {
        if counts.iter().sum::<usize>() != self.channels {
            return Err(Error::Shape(format!(
                "channel split {counts:?} does not cover {} channels",
                self.channels
            )));
        }
        let plane = self.height * self.width;
        let mut start = 0;
        let mut out = Vec::with_capacity(counts.len());
        for &n in counts {
            let data = self.data[start * plane..(start + n) * plane].to_vec();
            out.push(Tensor::from_vec(n, self.height, self.width, data)?);
            start += n;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deserialize_checks_shape() {
        let t = Tensor::from_fn(2, 1, 3, |c, _, x| (c + x) as f64);
        let text = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Tensor>(&text).unwrap(), t);
        let bad = r#"{"channels":3,"height":2,"width":2,"data":[1.0,2.0]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
    }

    #[test]
    fn crop_paste_roundtrip() {
        let t = Tensor::from_fn(2, 5, 6, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let window = t.crop(1, 2, 3, 2);
        assert_eq!(window.get(1, 0, 0), t.get(1, 1, 2));
        let mut blank = Tensor::zeros(2, 5, 6);
        blank.paste(1, 2, &window);
        assert_eq!(blank.get(0, 3, 3), t.get(0, 3, 3));
        assert_eq!(blank.get(0, 0, 0), 0.0);
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::filled(1, 2, 2, 1.0);
        let b = Tensor::filled(2, 2, 2, 2.0);
        let ab = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), [3, 2, 2]);
        let parts = ab.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(3, 2, 2, vec![0.0; 11]).is_err());
    }
}
