//! Weak and strong stochastic view augmentation.
//!
//! Each augmentation call consumes a single `u64` seed. Every stage (crop,
//! colour jitter, grayscale, blur, flip) then draws from its own stream of a
//! generator seeded with it. Stages therefore never shift each other's
//! randomness: a strong policy with jitter, grayscale and blur switched off
//! reproduces the weak policy bit for bit under the same seed.

mod color;
mod geometry;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use color::{adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, gaussian_blur, gaussian_kernel, to_grayscale, blur_kernel_size};
pub use geometry::{center_crop, hflip, resized_crop, sample_crop, CropWindow};

pub const CHANNELS: usize = 3;

/// Planar RGB image, values in `[0, 1]`, layout `[3, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::Data(format!(
                "image of {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub prob: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurParams {
    pub prob: f32,
    pub sigma: (f32, f32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub kind: PolicyKind,
    /// Fraction of the source area kept by the random crop.
    pub crop_area: (f32, f32),
    /// Width/height aspect ratio range of the crop.
    pub crop_ratio: (f32, f32),
    pub flip_prob: f32,
    pub jitter: JitterParams,
    pub grayscale_prob: f32,
    pub blur: BlurParams,
}

impl AugmentationPolicy {
    /// Random-resized crop (area 0.2..1) and horizontal flip.
    pub fn weak() -> Self {
        Self {
            kind: PolicyKind::Weak,
            crop_area: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter: JitterParams {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
                prob: 0.0,
            },
            grayscale_prob: 0.0,
            blur: BlurParams {
                prob: 0.0,
                sigma: (0.1, 2.0),
            },
        }
    }

    /// Weak policy plus colour jitter, random grayscale and Gaussian blur.
    pub fn strong() -> Self {
        Self {
            kind: PolicyKind::Strong,
            jitter: JitterParams {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
                prob: 0.8,
            },
            grayscale_prob: 0.2,
            blur: BlurParams {
                prob: 0.5,
                sigma: (0.1, 2.0),
            },
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_area;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop area range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (r0, r1) = self.crop_ratio;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!("crop aspect range ({r0}, {r1}) invalid")));
        }
        let probs = [self.flip_prob, self.jitter.prob, self.grayscale_prob, self.blur.prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if self.jitter.hue < 0.0 || self.jitter.hue > 0.5 {
            return Err(Error::Config("hue jitter must lie in [0, 0.5]".into()));
        }
        if self.blur.sigma.0 <= 0.0 || self.blur.sigma.0 > self.blur.sigma.1 {
            return Err(Error::Config("blur sigma range invalid".into()));
        }
        if self.kind == PolicyKind::Weak
            && (self.jitter.prob != 0.0 || self.grayscale_prob != 0.0 || self.blur.prob != 0.0)
        {
            return Err(Error::Config("weak policy must not jitter, gray or blur".into()));
        }
        Ok(())
    }
}

/// Which policy each encoder's view gets: `(target T1, online T2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewStrategy {
    StrongStrong,
    #[default]
    WeakStrong,
    WeakWeak,
}

impl ViewStrategy {
    pub fn policies(self) -> (AugmentationPolicy, AugmentationPolicy) {
        let (w, s) = (AugmentationPolicy::weak(), AugmentationPolicy::strong());
        match self {
            ViewStrategy::StrongStrong => (s, s),
            ViewStrategy::WeakStrong => (w, s),
            ViewStrategy::WeakWeak => (w, w),
        }
    }
}

impl fmt::Display for ViewStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewStrategy::StrongStrong => "s/s",
            ViewStrategy::WeakStrong => "w/s",
            ViewStrategy::WeakWeak => "w/w",
        })
    }
}

impl FromStr for ViewStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "s/s" | "ss" => Ok(ViewStrategy::StrongStrong),
            "w/s" | "ws" => Ok(ViewStrategy::WeakStrong),
            "w/w" | "ww" => Ok(ViewStrategy::WeakWeak),
            other => Err(Error::Config(format!("unknown view strategy {other:?} (expected s/s, w/s or w/w)"))),
        }
    }
}

const STREAM_CROP: u64 = 0;
const STREAM_JITTER: u64 = 1;
const STREAM_GRAY: u64 = 2;
const STREAM_BLUR: u64 = 3;
const STREAM_FLIP: u64 = 4;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `policy` on `img`: crop, jitter, grayscale, blur, flip.
pub fn augment(img: &Image, policy: &AugmentationPolicy, seed: u64, out_size: usize) -> Result<Image> {
    policy.validate()?;
    if out_size == 0 {
        return Err(Error::Config("augmentation output size must be positive".into()));
    }

    let mut rng = stage_rng(seed, STREAM_CROP);
    let window = sample_crop(img.height(), img.width(), policy.crop_area, policy.crop_ratio, &mut rng);
    let mut out = resized_crop(img, window, out_size);

    let mut rng = stage_rng(seed, STREAM_JITTER);
    if rng.gen::<f32>() < policy.jitter.prob {
        color::random_jitter(&mut out, &policy.jitter, &mut rng);
    }

    let mut rng = stage_rng(seed, STREAM_GRAY);
    if rng.gen::<f32>() < policy.grayscale_prob {
        out = to_grayscale(&out);
    }

    let mut rng = stage_rng(seed, STREAM_BLUR);
    if rng.gen::<f32>() < policy.blur.prob {
        let (lo, hi) = policy.blur.sigma;
        let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        out = gaussian_blur(&out, sigma, blur_kernel_size(out_size));
    }

    let mut rng = stage_rng(seed, STREAM_FLIP);
    if rng.gen::<f32>() < policy.flip_prob {
        out = hflip(&out);
    }
    Ok(out)
}

pub fn weak_augment<R: Rng + ?Sized>(img: &Image, rng: &mut R, out_size: usize) -> Result<Image> {
    augment(img, &AugmentationPolicy::weak(), rng.gen(), out_size)
}

pub fn strong_augment<R: Rng + ?Sized>(img: &Image, rng: &mut R, out_size: usize) -> Result<Image> {
    augment(img, &AugmentationPolicy::strong(), rng.gen(), out_size)
}

/// Two independently augmented views `(T1 for the target, T2 for the online encoder)`.
pub fn make_view_pair<R: Rng + ?Sized>(
    img: &Image,
    strategy: ViewStrategy,
    rng: &mut R,
    out_size: usize,
) -> Result<(Image, Image)> {
    let (p1, p2) = strategy.policies();
    let (s1, s2): (u64, u64) = (rng.gen(), rng.gen());
    Ok((augment(img, &p1, s1, out_size)?, augment(img, &p2, s2, out_size)?))
}

/// Per-channel pixel statistics used to standardize encoder inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PixelNorm {
    pub const IDENTITY: PixelNorm = PixelNorm {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn new(mean: [f32; 3], std: [f32; 3]) -> Result<Self> {
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("pixel std must be positive and finite, got {std:?}")));
        }
        Ok(Self { mean, std })
    }
}

/// `(value - mean) / std` per channel.
pub fn normalize_pixels(img: &Image, norm: &PixelNorm) -> Vec<f32> {
    let n = img.height() * img.width();
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..CHANNELS {
        let (m, s) = (norm.mean[c], norm.std[c]);
        out.extend(img.plane(c).iter().map(|&v| (v - m) / s));
    }
    debug_assert_eq!(out.len(), CHANNELS * n);
    out
}

/// Stacks equally sized images into a normalized `[B, 3, H, W]` tensor.
pub fn batch_tensor(images: &[Image], norm: &PixelNorm) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Data(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        data.extend(normalize_pixels(img, norm));
    }
    Tensor::new(&[images.len(), CHANNELS, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::new(h, w, data).unwrap()
    }

    fn no_op_policy() -> AugmentationPolicy {
        AugmentationPolicy {
            crop_area: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            ..AugmentationPolicy::weak()
        }
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let img = ramp(16, 16);
        for seed in 0..5 {
            assert_eq!(augment(&img, &no_op_policy(), seed, 16).unwrap(), img);
        }
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let img = ramp(8, 8);
        let p = AugmentationPolicy {
            flip_prob: 1.0,
            ..no_op_policy()
        };
        let out = augment(&img, &p, 3, 8).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out.get(c, y, x), img.get(c, y, 7 - x));
                }
            }
        }
    }

    #[test]
    fn constant_field_stays_constant() {
        let img = Image::filled(40, 36, [0.2, 0.5, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = weak_augment(&img, &mut rng, 32).unwrap();
            assert_eq!((out.height(), out.width()), (32, 32));
            for (c, v) in [0.2f32, 0.5, 0.9].iter().enumerate() {
                assert!(out.plane(c).iter().all(|p| (p - v).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn forced_grayscale_equalizes_channels() {
        let img = ramp(12, 12);
        let p = AugmentationPolicy {
            kind: PolicyKind::Strong,
            grayscale_prob: 1.0,
            ..AugmentationPolicy::strong()
        };
        for seed in 0..10 {
            let out = augment(&img, &p, seed, 12).unwrap();
            assert_eq!(out.plane(0), out.plane(1));
            assert_eq!(out.plane(1), out.plane(2));
        }
    }

    #[test]
    fn strong_with_stochastic_stages_off_is_resize() {
        let img = ramp(20, 20);
        let p = AugmentationPolicy {
            kind: PolicyKind::Strong,
            jitter: JitterParams {
                prob: 0.0,
                ..AugmentationPolicy::strong().jitter
            },
            grayscale_prob: 0.0,
            blur: BlurParams {
                prob: 0.0,
                sigma: (0.1, 2.0),
            },
            ..no_op_policy()
        };
        let out = augment(&img, &p, 11, 10).unwrap();
        let full = CropWindow {
            top: 0,
            left: 0,
            height: 20,
            width: 20,
        };
        assert_eq!(out, resized_crop(&img, full, 10));
    }

    #[test]
    fn strong_restricted_equals_weak_bitwise() {
        let img = ramp(32, 32);
        let restricted = AugmentationPolicy {
            jitter: JitterParams {
                prob: 0.0,
                ..AugmentationPolicy::strong().jitter
            },
            grayscale_prob: 0.0,
            blur: BlurParams {
                prob: 0.0,
                sigma: (0.1, 2.0),
            },
            ..AugmentationPolicy::strong()
        };
        for seed in 0..50u64 {
            let a = augment(&img, &restricted, seed, 32).unwrap();
            let b = augment(&img, &AugmentationPolicy::weak(), seed, 32).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn outputs_have_size_and_range() {
        let img = ramp(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let out = strong_augment(&img, &mut rng, 32).unwrap();
            assert_eq!(out.data().len(), 3 * 32 * 32);
            assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn view_pair_policies_and_determinism() {
        let img = ramp(32, 32);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = make_view_pair(&img, ViewStrategy::WeakStrong, &mut r1, 32).unwrap();
        let b = make_view_pair(&img, ViewStrategy::WeakStrong, &mut r2, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);

        assert_eq!(ViewStrategy::WeakStrong.policies().0.kind, PolicyKind::Weak);
        assert_eq!(ViewStrategy::WeakStrong.policies().1.kind, PolicyKind::Strong);
        let (t, o) = ViewStrategy::StrongStrong.policies();
        assert_eq!((t.kind, o.kind), (PolicyKind::Strong, PolicyKind::Strong));
        let (t, o) = ViewStrategy::WeakWeak.policies();
        assert_eq!((t.kind, o.kind), (PolicyKind::Weak, PolicyKind::Weak));
    }

    #[test]
    fn strategy_strings_round_trip() {
        for s in [ViewStrategy::StrongStrong, ViewStrategy::WeakStrong, ViewStrategy::WeakWeak] {
            assert_eq!(s.to_string().parse::<ViewStrategy>().unwrap(), s);
        }
        assert!("x/y".parse::<ViewStrategy>().is_err());
    }

    #[test]
    fn policy_validation() {
        AugmentationPolicy::weak().validate().unwrap();
        AugmentationPolicy::strong().validate().unwrap();
        let bad = AugmentationPolicy {
            grayscale_prob: 0.3,
            ..AugmentationPolicy::weak()
        };
        assert!(bad.validate().is_err());
        let bad_area = AugmentationPolicy {
            crop_area: (0.0, 1.0),
            ..AugmentationPolicy::weak()
        };
        assert!(bad_area.validate().is_err());
    }

    #[test]
    fn pixel_normalization() {
        let img = Image::filled(1, 1, [0.4, 0.5, 0.5]);
        let norm = PixelNorm::new([0.4, 0.4, 0.0], [1.0, 0.2, 1.0]).unwrap();
        let v = normalize_pixels(&img, &norm);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.5).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
        assert_eq!(normalize_pixels(&img, &PixelNorm::IDENTITY), img.data());
        assert!(PixelNorm::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }
}
