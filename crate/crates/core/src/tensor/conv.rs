//! Direct NHWC convolution kernels.
//!
//! Every convolution is described by a [`ConvGeometry`] relating a "big"
//! image (the conv2d input) to a "small" image (the conv2d output). The
//! transposed convolution runs the same geometry in the opposite direction,
//! which is what makes the two operations exact adjoints.

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding so that output size = ceil(input / stride). When the
    /// total padding is odd the extra cell goes on the bottom/right.
    Same,
    Valid,
}

/// Kernels are laid out `kh × kw × big_c × small_c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub big_c: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub small_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_padding(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

fn kernel_dims(kernel: &[usize]) -> Result<[usize; 4]> {
    match *kernel {
        [kh, kw, a, b] => Ok([kh, kw, a, b]),
        _ => Err(Error::contract(format!(
            "convolution kernel must be rank-4, got {kernel:?}"
        ))),
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::contract("convolution stride must be positive"));
    }
    Ok(())
}

impl ConvGeometry {
    /// Geometry of `conv2d(input, kernel)`; the input is the big side.
    pub fn for_conv(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        check_stride(stride)?;
        let [kh, kw, kc_in, kc_out] = kernel_dims(kernel)?;
        let &[batch, h, w, c] = input else {
            return Err(Error::contract(format!(
                "conv2d input must be rank-4 b×h×w×c, got {input:?}"
            )));
        };
        if c != kc_in {
            return Err(Error::contract(format!(
                "conv2d channel mismatch: input {input:?} has {c} channels, kernel {kernel:?} expects {kc_in}"
            )));
        }
        let (small_h, small_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let (oh, pt) = same_padding(h, kh, stride);
                let (ow, pl) = same_padding(w, kw, stride);
                (oh, ow, pt, pl)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::contract(format!(
                        "kernel {kh}×{kw} larger than unpadded input {h}×{w}"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            batch,
            big_h: h,
            big_w: w,
            big_c: c,
            small_h,
            small_w,
            small_c: kc_out,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Geometry of `conv2d_transpose(input, kernel)`; the input is the small side.
    pub fn for_transpose(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        check_stride(stride)?;
        let [kh, kw, kc_big, kc_small] = kernel_dims(kernel)?;
        let &[batch, h, w, c] = input else {
            return Err(Error::contract(format!(
                "conv2d_transpose input must be rank-4 b×h×w×c, got {input:?}"
            )));
        };
        if c != kc_small {
            return Err(Error::contract(format!(
                "conv2d_transpose channel mismatch: input {input:?} has {c} channels, kernel {kernel:?} expects {kc_small}"
            )));
        }
        let (big_h, big_w) = match padding {
            Padding::Same => (h * stride, w * stride),
            Padding::Valid => ((h - 1) * stride + kh, (w - 1) * stride + kw),
        };
        let g = Self::for_conv(&[batch, big_h, big_w, kc_big], kernel, stride, padding)?;
        debug_assert_eq!((g.small_h, g.small_w), (h, w));
        Ok(g)
    }

    pub fn big_dims(&self) -> [usize; 4] {
        [self.batch, self.big_h, self.big_w, self.big_c]
    }

    pub fn small_dims(&self) -> [usize; 4] {
        [self.batch, self.small_h, self.small_w, self.small_c]
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.kh, self.kw, self.big_c, self.small_c]
    }

    /// Visits every (small position, kernel tap, big position) triple that
    /// lands inside the unpadded big image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for oy in 0..self.small_h {
                for ox in 0..self.small_w {
                    let small = (b * self.small_h + oy) * self.small_w + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.big_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.big_w as isize {
                                continue;
                            }
                            let big = (b * self.big_h + iy as usize) * self.big_w + ix as usize;
                            f(small, ky * self.kw + kx, big);
                        }
                    }
                }
            }
        }
    }

    /// Cross-correlation: big → small.
    pub(crate) fn forward<T: Real>(&self, big: &[T], kernel: &[T]) -> Vec<T> {
        let (ci, co) = (self.big_c, self.small_c);
        let mut out = vec![T::zero(); self.batch * self.small_h * self.small_w * co];
        self.for_each_tap(|small, tap, bigp| {
            let out_row = &mut out[small * co..(small + 1) * co];
            let in_row = &big[bigp * ci..(bigp + 1) * ci];
            for (c, &v) in in_row.iter().enumerate() {
                if v == T::zero() {
                    continue;
                }
                let k_row = &kernel[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                for (o, &k) in out_row.iter_mut().zip(k_row) {
                    *o += v * k;
                }
            }
        });
        out
    }

    /// Adjoint of [`forward`](Self::forward) in its first argument: small → big.
    pub(crate) fn adjoint<T: Real>(&self, small: &[T], kernel: &[T]) -> Vec<T> {
        let (ci, co) = (self.big_c, self.small_c);
        let mut out = vec![T::zero(); self.batch * self.big_h * self.big_w * ci];
        self.for_each_tap(|smallp, tap, bigp| {
            let g_row = &small[smallp * co..(smallp + 1) * co];
            let out_row = &mut out[bigp * ci..(bigp + 1) * ci];
            for (c, o) in out_row.iter_mut().enumerate() {
                let k_row = &kernel[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                let mut acc = T::zero();
                for (&k, &g) in k_row.iter().zip(g_row) {
                    acc += k * g;
                }
                *o += acc;
            }
        });
        out
    }

    /// Gradient of `⟨forward(big, K), small⟩` with respect to K.
    pub(crate) fn kernel_grad<T: Real>(&self, big: &[T], small: &[T]) -> Vec<T> {
        let (ci, co) = (self.big_c, self.small_c);
        let mut dk = vec![T::zero(); self.kh * self.kw * ci * co];
        self.for_each_tap(|smallp, tap, bigp| {
            let g_row = &small[smallp * co..(smallp + 1) * co];
            let in_row = &big[bigp * ci..(bigp + 1) * ci];
            for (c, &v) in in_row.iter().enumerate() {
                if v == T::zero() {
                    continue;
                }
                let dk_row = &mut dk[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                for (d, &g) in dk_row.iter_mut().zip(g_row) {
                    *d += v * g;
                }
            }
        });
        dk
    }
}
