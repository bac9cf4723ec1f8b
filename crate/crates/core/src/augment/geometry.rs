use rand::Rng;

use super::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

const CROP_ATTEMPTS: usize = 10;

/// Draws a crop covering `area` of the image with aspect ratio (w/h) in
/// `ratio`, log-uniformly over the ratios at which that area fits inside the
/// image. Retries windows that round to zero pixels or admit no ratio; after
/// ten failures falls back to the largest centred window whose aspect ratio
/// lies inside the range.
pub fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    area: (f32, f32),
    ratio: (f32, f32),
    rng: &mut R,
) -> CropWindow {
    let total = (height * width) as f64;
    let (hf, wf) = (height as f64, width as f64);
    for _ in 0..CROP_ATTEMPTS {
        let frac = if area.1 > area.0 {
            rng.gen_range(area.0 as f64..=area.1 as f64)
        } else {
            area.0 as f64
        };
        let target = total * frac;
        // h = sqrt(target / a) <= height and w = sqrt(target * a) <= width.
        let log_lo = (ratio.0 as f64).ln().max((target / (hf * hf)).ln());
        let log_hi = (ratio.1 as f64).ln().min((wf * wf / target).ln());
        if log_lo > log_hi {
            continue;
        }
        let aspect = if log_hi > log_lo {
            rng.gen_range(log_lo..=log_hi).exp()
        } else {
            log_lo.exp()
        };
        let w = ((target * aspect).sqrt().round() as usize).min(width);
        let h = ((target / aspect).sqrt().round() as usize).min(height);
        if w > 0 && h > 0 {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return CropWindow {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    let in_ratio = width as f32 / height as f32;
    let (h, w) = if in_ratio < ratio.0 {
        (((width as f32 / ratio.0).round() as usize).clamp(1, height), width)
    } else if in_ratio > ratio.1 {
        (height, ((height as f32 * ratio.1).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    CropWindow {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

/// Bilinear resample of `window` to `out_size x out_size` (half-pixel centres,
/// edge clamped). A window equal to the image at the same size is the identity.
pub fn resized_crop(img: &Image, window: CropWindow, out_size: usize) -> Image {
    let (sy, sx) = (
        window.height as f32 / out_size as f32,
        window.width as f32 / out_size as f32,
    );
    let taps = |o: usize, scale: f32, extent: usize| {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, src - i0 as f32)
    };
    let ys: Vec<_> = (0..out_size).map(|o| taps(o, sy, window.height)).collect();
    let xs: Vec<_> = (0..out_size).map(|o| taps(o, sx, window.width)).collect();
    let mut data = Vec::with_capacity(CHANNELS * out_size * out_size);
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        let at = |y: usize, x: usize| plane[(window.top + y) * img.width() + window.left + x];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
                let bot = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
                data.push(if ly == 0.0 { top } else { top * (1.0 - ly) + bot * ly });
            }
        }
    }
    Image::new(out_size, out_size, data).expect("sized")
}

pub fn hflip(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(img.data().len());
    for row in img.data().chunks(w) {
        data.extend(row.iter().rev());
    }
    Image::new(h, w, data).expect("sized")
}

/// Resize so the crop takes the central 87.5% and cut `size x size`.
pub fn center_crop(img: &Image, size: usize) -> Image {
    let side = img.height().min(img.width());
    let keep = ((size as f32 / 0.875).round() as usize).max(size);
    // Central square of the image, scaled so `size` of every `keep` pixels remain.
    let crop = ((side * size) / keep).max(1);
    let window = CropWindow {
        top: (img.height() - crop) / 2,
        left: (img.width() - crop) / 2,
        height: crop,
        width: crop,
    };
    resized_crop(img, window, size)
}
