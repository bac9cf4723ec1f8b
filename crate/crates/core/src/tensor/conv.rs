use rayon::prelude::*;

use super::{gemm, Scalar, Tensor, Transpose};
use crate::error::{Error, Result};

/// Output extent of a strided, padded convolution along one axis.
///
/// The window must tile the padded input exactly; anything else is a
/// configuration error rather than a silent floor.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("conv2d: stride and kernel must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d: ({input} + 2*{pad} - {kernel}) / {stride} + 1 is not a positive integer"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Forward state needed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    /// Patch matrix `[B*Ho*Wo, C*Kh*Kw]`.
    cols: Vec<T>,
    x_shape: [usize; 4],
    out_hw: (usize, usize),
    stride: usize,
    pad: usize,
}

struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (&[b, c, h, wd], &[f, c2, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        };
        if c != c2 {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        Ok(Self {
            b,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            ho: conv_out_size(h, kh, stride, pad)?,
            wo: conv_out_size(wd, kw, stride, pad)?,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T]) -> Vec<T> {
    let patch = g.patch();
    let per_image = g.positions() * patch;
    let mut cols = vec![T::zero(); g.b * per_image];
    cols.par_chunks_mut(per_image)
        .zip(x.par_chunks(g.c * g.h * g.w))
        .for_each(|(dst, img)| {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let row = &mut dst[(oy * g.wo + ox) * patch..][..patch];
                    let mut idx = 0;
                    for ch in 0..g.c {
                        let plane = &img[ch * g.h * g.w..][..g.h * g.w];
                        for ky in 0..g.kh {
                            let sy = g.src(oy, ky, g.h);
                            for kx in 0..g.kw {
                                if let (Some(y), Some(xx)) = (sy, g.src(ox, kx, g.w)) {
                                    row[idx] = plane[y * g.w + xx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        });
    cols
}

fn col2im<T: Scalar>(g: &Geometry, dcols: &[T]) -> Vec<T> {
    let patch = g.patch();
    let per_image = g.positions() * patch;
    let mut dx = vec![T::zero(); g.b * g.c * g.h * g.w];
    dx.par_chunks_mut(g.c * g.h * g.w)
        .zip(dcols.par_chunks(per_image))
        .for_each(|(img, src)| {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let row = &src[(oy * g.wo + ox) * patch..][..patch];
                    let mut idx = 0;
                    for ch in 0..g.c {
                        for ky in 0..g.kh {
                            let sy = g.src(oy, ky, g.h);
                            for kx in 0..g.kw {
                                if let (Some(y), Some(xx)) = (sy, g.src(ox, kx, g.w)) {
                                    let p = &mut img[ch * g.h * g.w + y * g.w + xx];
                                    *p = *p + row[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Cross-correlation of `x: [B, C, H, W]` with `w: [F, C, Kh, Kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Conv2dCache<T>)> {
    let g = Geometry::new(x, w, stride, pad)?;
    let cols = im2col(&g, x.data());
    let rows = g.b * g.positions();
    // [B*Ho*Wo, F] = cols * W^T
    let mut out_t = vec![T::zero(); rows * g.f];
    gemm(
        rows,
        g.patch(),
        g.f,
        T::one(),
        &cols,
        Transpose::No,
        w.data(),
        Transpose::Yes,
        T::zero(),
        &mut out_t,
    );
    let hw = g.positions();
    let mut out = vec![T::zero(); g.b * g.f * hw];
    out.par_chunks_mut(g.f * hw)
        .zip(out_t.par_chunks(hw * g.f))
        .for_each(|(dst, src)| {
            for p in 0..hw {
                for f in 0..g.f {
                    dst[f * hw + p] = src[p * g.f + f];
                }
            }
        });
    let cache = Conv2dCache {
        cols,
        x_shape: [g.b, g.c, g.h, g.w],
        out_hw: (g.ho, g.wo),
        stride,
        pad,
    };
    Ok((Tensor::new(&[g.b, g.f, g.ho, g.wo], out)?, cache))
}

/// Returns `(dx, dw)` for upstream gradient `dy: [B, F, Ho, Wo]`.
pub fn conv2d_backward<T: Scalar>(
    cache: &Conv2dCache<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, wd] = cache.x_shape;
    let &[f, _, kh, kw] = w.shape() else {
        return Err(Error::shape("conv2d_backward", &cache.x_shape, w.shape()));
    };
    let g = Geometry {
        b,
        c,
        h,
        w: wd,
        f,
        kh,
        kw,
        ho: cache.out_hw.0,
        wo: cache.out_hw.1,
        stride: cache.stride,
        pad: cache.pad,
    };
    if dy.shape() != [b, f, g.ho, g.wo] || cache.cols.len() != b * g.positions() * g.patch() {
        return Err(Error::shape("conv2d_backward", dy.shape(), &[b, f, g.ho, g.wo]));
    }
    let hw = g.positions();
    let rows = b * hw;
    let mut dy_t = vec![T::zero(); rows * f];
    dy_t.par_chunks_mut(hw * f)
        .zip(dy.data().par_chunks(f * hw))
        .for_each(|(dst, src)| {
            for ch in 0..f {
                for p in 0..hw {
                    dst[p * f + ch] = src[ch * hw + p];
                }
            }
        });
    let patch = g.patch();
    let mut dw = vec![T::zero(); f * patch];
    gemm(
        f,
        rows,
        patch,
        T::one(),
        &dy_t,
        Transpose::Yes,
        &cache.cols,
        Transpose::No,
        T::zero(),
        &mut dw,
    );
    let mut dcols = vec![T::zero(); rows * patch];
    gemm(
        rows,
        f,
        patch,
        T::one(),
        &dy_t,
        Transpose::No,
        w.data(),
        Transpose::No,
        T::zero(),
        &mut dcols,
    );
    let dx = col2im(&g, &dcols);
    Ok((
        Tensor::new(&cache.x_shape, dx)?,
        Tensor::new(w.shape(), dw)?,
    ))
}
