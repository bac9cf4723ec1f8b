use rand::seq::SliceRandom;
use rand::Rng;

use super::{Image, JitterParams, CHANNELS};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(img: &Image) -> Vec<f32> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
        .collect()
}

/// Luma replicated into all three channels.
pub fn to_grayscale(img: &Image) -> Image {
    let l = luma(img);
    let mut data = Vec::with_capacity(img.data().len());
    for _ in 0..CHANNELS {
        data.extend_from_slice(&l);
    }
    Image::new(img.height(), img.width(), data).expect("sized")
}

fn blend_into(img: &mut Image, factor: f32, other: impl Fn(usize, usize) -> f32) {
    let n = img.height() * img.width();
    for c in 0..CHANNELS {
        for i in 0..n {
            let v = &mut img.data_mut()[c * n + i];
            *v = (factor * *v + (1.0 - factor) * other(c, i)).clamp(0.0, 1.0);
        }
    }
}

pub fn adjust_brightness(img: &mut Image, factor: f32) {
    blend_into(img, factor, |_, _| 0.0);
}

/// Blend with the mean luma of the whole image.
pub fn adjust_contrast(img: &mut Image, factor: f32) {
    let l = luma(img);
    let mean = l.iter().sum::<f32>() / l.len() as f32;
    blend_into(img, factor, |_, _| mean);
}

/// Blend with the per-pixel luma.
pub fn adjust_saturation(img: &mut Image, factor: f32) {
    let l = luma(img);
    blend_into(img, factor, |_, i| l[i]);
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns, `shift` in `[-0.5, 0.5]`.
pub fn adjust_hue(img: &mut Image, shift: f32) {
    let n = img.height() * img.width();
    let d = img.data_mut();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        d[i] = r.clamp(0.0, 1.0);
        d[n + i] = g.clamp(0.0, 1.0);
        d[2 * n + i] = b.clamp(0.0, 1.0);
    }
}

/// Brightness, contrast, saturation and hue perturbations in random order.
pub(super) fn random_jitter<R: Rng + ?Sized>(img: &mut Image, p: &JitterParams, rng: &mut R) {
    let factor = |s: f32, rng: &mut R| (s > 0.0).then(|| rng.gen_range((1.0 - s).max(0.0)..=1.0 + s));
    let b = factor(p.brightness, rng);
    let c = factor(p.contrast, rng);
    let s = factor(p.saturation, rng);
    let h = (p.hue > 0.0).then(|| rng.gen_range(-p.hue..=p.hue));
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match (op, b, c, s, h) {
            (0, Some(f), ..) => adjust_brightness(img, f),
            (1, _, Some(f), ..) => adjust_contrast(img, f),
            (2, _, _, Some(f), _) => adjust_saturation(img, f),
            (3, .., Some(f)) => adjust_hue(img, f),
            _ => {}
        }
    }
}

/// Odd kernel side covering 10% of the image side, rounded up.
pub fn blur_kernel_size(side: usize) -> usize {
    let k = (side as f64 * 0.1).ceil().max(1.0) as usize;
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Normalized 1-D Gaussian taps centred on the middle of `size`.
pub fn gaussian_kernel(sigma: f32, size: usize) -> Vec<f32> {
    let half = (size / 2) as f32;
    let raw: Vec<f32> = (0..size)
        .map(|i| {
            let x = i as f32 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f32, size: usize) -> Image {
    let k = gaussian_kernel(sigma, size);
    let r = (size / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..CHANNELS {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * src[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let dst = &mut out.data_mut()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    out
}
