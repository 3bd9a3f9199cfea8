//! 3×3 convolution with zero padding of one pixel, NHWC layout.
//!
//! Weights are stored `[ky][kx][c_in][c_out]`; output pixel `(oy, ox)` reads
//! input pixel `(oy·s + ky − 1, ox·s + kx − 1)`.

use rayon::prelude::*;

use crate::tensor::Scalar;

pub const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvGeometry {
    #[inline]
    pub fn out_h(&self) -> usize {
        out_extent(self.in_h, self.stride)
    }

    #[inline]
    pub fn out_w(&self) -> usize {
        out_extent(self.in_w, self.stride)
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(PAD).filter(|&i| i < extent)
    }
}

/// `floor((n + 2·pad − 3) / stride) + 1`.
#[inline]
pub fn out_extent(n: usize, stride: usize) -> usize {
    (n + 2 * PAD - KERNEL) / stride + 1
}

pub fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row = ow * g.c_out;
    let mut out = vec![T::zero(); g.batch * oh * row];
    out.par_chunks_mut(row).enumerate().for_each(|(r, out_row)| {
        let (n, oy) = (r / oh, r % oh);
        for ox in 0..ow {
            let acc = &mut out_row[ox * g.c_out..(ox + 1) * g.c_out];
            acc.copy_from_slice(b);
            for ky in 0..KERNEL {
                let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                for kx in 0..KERNEL {
                    let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                    let px = ((n * g.in_h + iy) * g.in_w + ix) * g.c_in;
                    let tap = (ky * KERNEL + kx) * g.c_in * g.c_out;
                    for ci in 0..g.c_in {
                        let v = x[px + ci];
                        let wrow = &w[tap + ci * g.c_out..tap + (ci + 1) * g.c_out];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the input, gathered per input pixel.
pub fn backward_input<T: Scalar>(g: &ConvGeometry, w: &[T], dy: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row = g.in_w * g.c_in;
    let mut dx = vec![T::zero(); g.batch * g.in_h * row];
    dx.par_chunks_mut(row).enumerate().for_each(|(r, dx_row)| {
        let (n, iy) = (r / g.in_h, r % g.in_h);
        for ix in 0..g.in_w {
            let acc = &mut dx_row[ix * g.c_in..(ix + 1) * g.c_in];
            for ky in 0..KERNEL {
                let Some(oy) = target(iy, ky, g.stride, oh) else { continue };
                for kx in 0..KERNEL {
                    let Some(ox) = target(ix, kx, g.stride, ow) else { continue };
                    let grad = &dy[((n * oh + oy) * ow + ox) * g.c_out..][..g.c_out];
                    let tap = (ky * KERNEL + kx) * g.c_in * g.c_out;
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let wrow = &w[tap + ci * g.c_out..tap + (ci + 1) * g.c_out];
                        let mut s = T::zero();
                        for (&d, &wv) in grad.iter().zip(wrow) {
                            s += d * wv;
                        }
                        *a += s;
                    }
                }
            }
        }
    });
    dx
}

/// Output coordinate that reads input coordinate `i` through tap `k`, if any.
#[inline]
fn target(i: usize, k: usize, stride: usize, out_extent: usize) -> Option<usize> {
    let shifted = (i + PAD).checked_sub(k)?;
    if shifted % stride != 0 {
        return None;
    }
    Some(shifted / stride).filter(|&o| o < out_extent)
}

/// Gradients with respect to weights and bias. Each kernel tap accumulates
/// over output positions in a fixed order.
pub fn backward_params<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let tap_len = g.c_in * g.c_out;
    let mut dw = vec![T::zero(); KERNEL * KERNEL * tap_len];
    dw.par_chunks_mut(tap_len).enumerate().for_each(|(tap, acc)| {
        let (ky, kx) = (tap / KERNEL, tap % KERNEL);
        for n in 0..g.batch {
            for oy in 0..oh {
                let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                for ox in 0..ow {
                    let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                    let xin = &x[((n * g.in_h + iy) * g.in_w + ix) * g.c_in..][..g.c_in];
                    let grad = &dy[((n * oh + oy) * ow + ox) * g.c_out..][..g.c_out];
                    for (ci, &v) in xin.iter().enumerate() {
                        let arow = &mut acc[ci * g.c_out..(ci + 1) * g.c_out];
                        for (a, &d) in arow.iter_mut().zip(grad) {
                            *a += v * d;
                        }
                    }
                }
            }
        }
    });
    let mut db = vec![T::zero(); g.c_out];
    for chunk in dy.chunks_exact(g.c_out) {
        for (a, &d) in db.iter_mut().zip(chunk) {
            *a += d;
        }
    }
    (dw, db)
}
