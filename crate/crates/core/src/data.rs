//! In-memory labelled image collections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{Image, PixelNorm, CHANNELS};
use crate::error::{Error, Result};

/// Images stored as 8-bit CHW planes with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<u32>,
    classes: usize,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, labels: Vec<u32>, classes: usize) -> Result<Self> {
        let per = CHANNELS * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel bytes do not make {} images of {CHANNELS}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let per = CHANNELS * self.height * self.width;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Image `i` with values scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Image {
        let data = self.raw(i).iter().map(|&p| p as f32 / 255.0).collect();
        Image::new(self.height, self.width, data).expect("validated at construction")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * CHANNELS * self.height * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.raw(i));
            labels.push(self.labels[i]);
        }
        Self {
            pixels,
            labels,
            ..*self
        }
    }

    /// Per-channel mean and standard deviation over every pixel, in `[0, 1]` units.
    pub fn pixel_stats(&self) -> Result<PixelNorm> {
        if self.is_empty() {
            return Err(Error::Data("no images to compute statistics from".into()));
        }
        let plane = self.height * self.width;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in self.pixels.chunks(CHANNELS * plane) {
            for c in 0..CHANNELS {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let mut mean = [0f32; 3];
        let mut std = [0f32; 3];
        for c in 0..CHANNELS {
            let m = sum[c] / n;
            mean[c] = m as f32;
            std[c] = (sq[c] / n - m * m).max(0.0).sqrt().max(1e-3) as f32;
        }
        PixelNorm::new(mean, std)
    }
}

/// A labelled toy set for smoke runs: class `c` is a sinusoidal grating at
/// angle `pi c / classes` in a class colour, with random phase, frequency,
/// contrast and pixel noise. Balanced, classes cycling with the index.
pub fn synthetic(n: usize, side: usize, classes: usize, seed: u64) -> Result<ImageSet> {
    if classes == 0 || side == 0 {
        return Err(Error::Data("synthetic set needs positive side and class count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let mut pixels = Vec::with_capacity(n * CHANNELS * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = std::f32::consts::PI * c as f32 / classes as f32;
        let (dy, dx) = angle.sin_cos();
        let freq = rng.gen_range(0.25f32..0.45);
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let contrast = rng.gen_range(0.3f32..0.5);
        let hue = c as f32 / classes as f32;
        let tint = [0.0f32, 1.0 / 3.0, 2.0 / 3.0].map(|o| 0.5 + 0.4 * (std::f32::consts::TAU * (hue + o)).cos());
        let mut img = vec![0u8; CHANNELS * plane];
        for y in 0..side {
            for x in 0..side {
                let wave = (freq * (x as f32 * dx + y as f32 * dy) + phase).sin();
                for (ch, &t) in tint.iter().enumerate() {
                    let v = t + contrast * wave + rng.gen_range(-0.08f32..0.08);
                    img[ch * plane + y * side + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        pixels.extend(img);
        labels.push(c as u32);
    }
    ImageSet::new(side, side, pixels, labels, classes)
}
