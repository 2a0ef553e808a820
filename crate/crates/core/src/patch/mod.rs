//! Patch representation, compositing, robustness transformations, latent
//! shift and total-variation regularisation.
//!
//! Every operation here keeps patch values inside `[0, 1]`; gradients of the
//! compositing pipeline are provided alongside each forward operation so the
//! attack drivers can chain them without a general autodiff graph.

mod resize;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use resize::{resize_bilinear, resize_bilinear_backward};

/// An RGB patch with all values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch(Tensor);

impl Patch {
    /// Wraps a 3-channel tensor, clamping values into `[0, 1]`.
    pub fn new(mut pixels: Tensor) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::Shape(format!("patch needs 3 channels, got {}", pixels.channels())));
        }
        if pixels.height() == 0 || pixels.width() == 0 {
            return Err(Error::Shape("patch sides must be at least 1 pixel".into()));
        }
        if !pixels.all_finite() {
            return Err(Error::Contract("patch contains non-finite values".into()));
        }
        pixels.map_inplace(clamp01);
        Ok(Self(pixels))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::filled(3, height, width, value))
    }

    /// Uniform random pixels in `[0, 1]`.
    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<Self> {
        Self::new(Tensor::from_fn(3, height, width, |_, _, _| rng.random::<f64>()))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn pixels(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[inline]
pub fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Where a patch is drawn on an image, and at what size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    pub height: usize,
    pub width: usize,
}

impl Placement {
    pub fn new(x: usize, y: usize, height: usize, width: usize) -> Self {
        Self { x, y, height, width }
    }

    /// Checks that the render rectangle lies inside an image of the given size.
    pub fn validate(&self, image_height: usize, image_width: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Placement(format!(
                "render size {}x{} must be positive",
                self.height, self.width
            )));
        }
        if self.x + self.width > image_width || self.y + self.height > image_height {
            return Err(Error::Placement(format!(
                "patch rectangle x=[{}, {}) y=[{}, {}) exceeds image bounds {}x{} (width x height)",
                self.x,
                self.x + self.width,
                self.y,
                self.y + self.height,
                image_width,
                image_height
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.width as f64 / 2.0,
            self.y as f64 + self.height as f64 / 2.0,
        )
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.width && py >= self.y && py < self.y + self.height
    }

    /// `[x1, y1, x2, y2]` in pixels.
    pub fn bbox(&self) -> [f64; 4] {
        [
            self.x as f64,
            self.y as f64,
            (self.x + self.width) as f64,
            (self.y + self.height) as f64,
        ]
    }
}

/// Composites `patch` onto `image`, resizing it bilinearly to the placement
/// size first when needed. Pixels outside the rectangle are copied unchanged.
pub fn apply_patch(image: &Tensor, patch: &Patch, placement: &Placement) -> Result<Tensor> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("image needs 3 channels, got {}", image.channels())));
    }
    placement.validate(image.height(), image.width())?;
    let rendered = resize_bilinear(patch.pixels(), placement.height, placement.width);
    let mut out = image.clone();
    out.paste(placement.y, placement.x, &rendered);
    Ok(out)
}

/// Backward of [`apply_patch`] with respect to the patch pixels.
pub fn apply_patch_backward(
    grad_image: &Tensor,
    patch_height: usize,
    patch_width: usize,
    placement: &Placement,
) -> Tensor {
    let window = grad_image.crop(placement.y, placement.x, placement.height, placement.width);
    resize_bilinear_backward(&window, patch_height, patch_width)
}

/// Closed interval `[lo, hi]` used for random transformation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Ranges for the contrast / brightness / noise augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub contrast: Interval,
    pub brightness: Interval,
    pub noise: Interval,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            contrast: Interval::new(0.8, 1.2),
            brightness: Interval::new(-0.1, 0.1),
            noise: Interval::new(-0.1, 0.1),
        }
    }
}

impl TransformConfig {
    /// No-op ranges.
    pub fn identity() -> Self {
        Self {
            contrast: Interval::new(1.0, 1.0),
            brightness: Interval::new(0.0, 0.0),
            noise: Interval::new(0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("contrast", self.contrast),
            ("brightness", self.brightness),
            ("noise", self.noise),
        ] {
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
                return Err(Error::Config(format!(
                    "{name} interval [{}, {}] must be finite with lo <= hi",
                    r.lo, r.hi
                )));
            }
        }
        Ok(())
    }
}

/// One concrete draw of the transformation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSample {
    pub contrast: f64,
    pub brightness: f64,
    pub noise: Tensor,
}

impl TransformSample {
    /// Draws contrast, then brightness, then the per-pixel noise grid in
    /// channel-major order.
    pub fn draw<R: Rng + ?Sized>(
        config: &TransformConfig,
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let contrast = config.contrast.sample(rng);
        let brightness = config.brightness.sample(rng);
        let noise = Tensor::from_fn(channels, height, width, |_, _, _| config.noise.sample(rng));
        Self {
            contrast,
            brightness,
            noise,
        }
    }

    fn pre_clamp(&self, p: &Tensor) -> Tensor {
        let mut out = p.map(|v| self.contrast * v + self.brightness);
        out.axpy(1.0, &self.noise);
        out
    }

    pub fn apply(&self, patch: &Patch) -> Patch {
        let mut out = self.pre_clamp(patch.pixels());
        out.map_inplace(clamp01);
        Patch(out)
    }

    /// Backward with respect to the input patch; zero where the clamp is active.
    pub fn backward(&self, patch: &Patch, grad: &Tensor) -> Tensor {
        let pre = self.pre_clamp(patch.pixels());
        let mut out = grad.clone();
        for (g, &v) in out.data_mut().iter_mut().zip(pre.data()) {
            *g *= if (0.0..=1.0).contains(&v) { self.contrast } else { 0.0 };
        }
        out
    }
}

/// `clamp(c·p + b + n, 0, 1)` with scalar contrast `c` and brightness `b` and
/// a per-pixel noise grid `n`, all drawn uniformly from `config`.
pub fn transform_patch<R: Rng + ?Sized>(patch: &Patch, config: &TransformConfig, rng: &mut R) -> Result<Patch> {
    config.validate()?;
    let [c, h, w] = patch.pixels().shape();
    Ok(TransformSample::draw(config, c, h, w, rng).apply(patch))
}

/// Interpolation towards a random mask: `(1 - alpha)·value + alpha·mask`.
pub trait LatentShift: Sized {
    fn latent_shift(&self, mask: &Self, alpha: f64) -> Result<Self>;
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("latent shift alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn interpolate(value: &[f64], mask: &[f64], alpha: f64) -> Vec<f64> {
    value
        .iter()
        .zip(mask)
        .map(|(&v, &m)| (1.0 - alpha) * v + alpha * m)
        .collect()
}

impl LatentShift for Patch {
    fn latent_shift(&self, mask: &Self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !self.0.same_shape(&mask.0) {
            return Err(Error::Shape(format!(
                "latent shift mask {:?} does not match patch {:?}",
                mask.0.shape(),
                self.0.shape()
            )));
        }
        let [c, h, w] = self.0.shape();
        let mut mixed = Tensor::from_vec(c, h, w, interpolate(self.0.data(), mask.0.data(), alpha))?;
        mixed.map_inplace(clamp01);
        Ok(Patch(mixed))
    }
}

/// Backward of the patch latent shift with respect to the unshifted patch.
/// Both inputs live in `[0, 1]`, so the convex combination never clamps.
pub fn latent_shift_backward(grad: &Tensor, alpha: f64) -> Tensor {
    grad.map(|g| (1.0 - alpha) * g)
}

/// Anisotropic total variation: sum over channels of absolute vertical and
/// horizontal neighbour differences.
pub fn total_variation(t: &Tensor) -> f64 {
    let [c, h, w] = t.shape();
    let mut tv = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.get(ch, y, x);
                if y + 1 < h {
                    tv += (t.get(ch, y + 1, x) - v).abs();
                }
                if x + 1 < w {
                    tv += (t.get(ch, y, x + 1) - v).abs();
                }
            }
        }
    }
    tv
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`total_variation`] (zero where a difference vanishes).
pub fn total_variation_grad(t: &Tensor) -> Tensor {
    let [c, h, w] = t.shape();
    let mut g = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.get(ch, y, x);
                if y + 1 < h {
                    let s = sign(t.get(ch, y + 1, x) - v);
                    g.add_at(ch, y + 1, x, s);
                    g.add_at(ch, y, x, -s);
                }
                if x + 1 < w {
                    let s = sign(t.get(ch, y, x + 1) - v);
                    g.add_at(ch, y, x + 1, s);
                    g.add_at(ch, y, x, -s);
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(3, h, w, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 10.0)
    }

    #[test]
    fn zero_patch_overwrites_only_its_window() {
        let img = image(20, 30);
        let patch = Patch::filled(10, 10, 0.0).unwrap();
        let out = apply_patch(&img, &patch, &Placement::new(0, 0, 10, 10)).unwrap();
        for c in 0..3 {
            for y in 0..20 {
                for x in 0..30 {
                    if y < 10 && x < 10 {
                        assert_eq!(out.get(c, y, x), 0.0);
                    } else {
                        assert_eq!(out.get(c, y, x), img.get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn full_size_patch_replaces_image() {
        let img = image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = Patch::random(8, 8, &mut rng).unwrap();
        let out = apply_patch(&img, &patch, &Placement::new(0, 0, 8, 8)).unwrap();
        assert_eq!(&out, patch.pixels());
    }

    #[test]
    fn native_patch_is_upsampled_to_render_size() {
        let img = image(120, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patch = Patch::random(64, 64, &mut rng).unwrap();
        let placement = Placement::new(10, 5, 100, 100);
        let out = apply_patch(&img, &patch, &placement).unwrap();
        let up = resize_bilinear(patch.pixels(), 100, 100);
        assert_eq!(out.crop(5, 10, 100, 100), up);
        // scalar bilinear reference for one interior pixel
        let (oy, ox) = (37usize, 81usize);
        let sy = (oy as f64 + 0.5) * 0.64 - 0.5;
        let sx = (ox as f64 + 0.5) * 0.64 - 0.5;
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let p = patch.pixels();
        let want = (1.0 - fy) * ((1.0 - fx) * p.get(1, y0, x0) + fx * p.get(1, y0, x0 + 1))
            + fy * ((1.0 - fx) * p.get(1, y0 + 1, x0) + fx * p.get(1, y0 + 1, x0 + 1));
        assert!((out.get(1, 5 + oy, 10 + ox) - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_placement_is_rejected() {
        let img = image(50, 40);
        let patch = Patch::filled(10, 10, 0.5).unwrap();
        let err = apply_patch(&img, &patch, &Placement::new(35, 0, 10, 10)).unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
        assert!(err.to_string().contains("exceeds image bounds 40x50"));
    }

    #[test]
    fn identity_transform_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patch = Patch::random(6, 5, &mut rng).unwrap();
        let out = transform_patch(&patch, &TransformConfig::identity(), &mut rng).unwrap();
        assert_eq!(out, patch);
    }

    #[test]
    fn saturating_transform_clamps_to_one() {
        let patch = Patch::filled(4, 4, 1.0).unwrap();
        let cfg = TransformConfig {
            contrast: Interval::new(1.2, 1.2),
            brightness: Interval::new(0.1, 0.1),
            noise: Interval::new(0.0, 0.0),
        };
        let out = transform_patch(&patch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transform_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let patch = Patch::random(5, 7, &mut rng).unwrap();
        let cfg = TransformConfig::default();
        let out = transform_patch(&patch, &cfg, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();

        // independent loop: same draw order (contrast, brightness, then noise)
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let c: f64 = r.random_range(0.8..=1.2);
        let b: f64 = r.random_range(-0.1..=0.1);
        let p = patch.pixels().data();
        for (i, &got) in out.pixels().data().iter().enumerate() {
            let n: f64 = r.random_range(-0.1..=0.1);
            let want = (c * p[i] + b + n).clamp(0.0, 1.0);
            assert_eq!(got, want, "pixel {i}");
        }
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let cfg = TransformConfig {
            contrast: Interval::new(1.2, 0.8),
            ..TransformConfig::default()
        };
        let patch = Patch::filled(2, 2, 0.5).unwrap();
        assert!(transform_patch(&patch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn transform_mean_is_identity_on_interior_values() {
        let patch = Patch::new(Tensor::from_fn(3, 2, 2, |c, y, x| 0.3 + 0.1 * (c + y + x) as f64)).unwrap();
        let cfg = TransformConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut acc = Tensor::zeros(3, 2, 2);
        for _ in 0..n {
            acc.axpy(1.0, transform_patch(&patch, &cfg, &mut rng).unwrap().pixels());
        }
        acc.scale(1.0 / n as f64);
        for (m, p) in acc.data().iter().zip(patch.pixels().data()) {
            assert!((m - p).abs() < 0.01, "mean {m} vs {p}");
        }
    }

    #[test]
    fn latent_shift_endpoints_and_midpoint() {
        let v = Patch::filled(3, 3, 0.2).unwrap();
        let m = Patch::filled(3, 3, 0.8).unwrap();
        assert_eq!(v.latent_shift(&m, 0.0).unwrap(), v);
        assert_eq!(v.latent_shift(&m, 1.0).unwrap(), m);
        let mid = v.latent_shift(&m, 0.5).unwrap();
        assert!(mid.pixels().data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn latent_shift_rejects_shape_mismatch_and_bad_alpha() {
        let v = Patch::filled(3, 3, 0.2).unwrap();
        let m = Patch::filled(3, 4, 0.8).unwrap();
        assert!(matches!(v.latent_shift(&m, 0.5), Err(Error::Shape(_))));
        assert!(matches!(v.latent_shift(&v, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn tv_hand_values() {
        assert_eq!(total_variation(&Tensor::filled(3, 5, 5, 0.7)), 0.0);
        let t = Tensor::from_vec(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&t), 2.0);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = Tensor::from_fn(3, 6, 5, |_, _, _| rng.random::<f64>());
        let g = total_variation_grad(&t);
        let h = 1e-5;
        for i in 0..t.len() {
            let mut p = t.clone();
            p.data_mut()[i] += h;
            let mut m = t.clone();
            m.data_mut()[i] -= h;
            let fd = (total_variation(&p) - total_variation(&m)) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1.0), "{i}: {fd} vs {an}");
        }
    }

    proptest! {
        #[test]
        fn tv_is_non_negative(vals in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let t = Tensor::from_vec(3, 2, 2, vals).unwrap();
            prop_assert!(total_variation(&t) >= 0.0);
        }

        #[test]
        fn compositing_preserves_outside_pixels(
            ih in 4usize..24, iw in 4usize..24, ph in 1usize..8, pw in 1usize..8,
            fx in 0.0f64..1.0, fy in 0.0f64..1.0, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rh = ph.min(ih);
            let rw = pw.min(iw);
            let x = ((iw - rw) as f64 * fx) as usize;
            let y = ((ih - rh) as f64 * fy) as usize;
            let img = Tensor::from_fn(3, ih, iw, |_, _, _| rng.random::<f64>());
            let patch = Patch::random(ph, pw, &mut rng).unwrap();
            let placement = Placement::new(x, y, rh, rw);
            let out = apply_patch(&img, &patch, &placement).unwrap();
            for c in 0..3 {
                for yy in 0..ih {
                    for xx in 0..iw {
                        let v = out.get(c, yy, xx);
                        prop_assert!((0.0..=1.0).contains(&v));
                        if !placement.contains(xx, yy) {
                            prop_assert_eq!(v.to_bits(), img.get(c, yy, xx).to_bits());
                        }
                    }
                }
            }
        }

        #[test]
        fn transform_is_deterministic_and_in_range(seed in any::<u64>(), base in 0.0f64..1.0) {
            let patch = Patch::filled(3, 4, base).unwrap();
            let cfg = TransformConfig::default();
            let a = transform_patch(&patch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = transform_patch(&patch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
