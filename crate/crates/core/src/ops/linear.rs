//! Channel-last affine map `y[m, :] = x[m, :] · W + b`, used for fully
//! connected layers (`m` = batch) and 1×1 pointwise layers (`m` = pixels).

use rayon::prelude::*;

use crate::tensor::Scalar;

pub fn forward<T: Scalar>(
    rows: usize,
    c_in: usize,
    c_out: usize,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * c_out];
    out.par_chunks_mut(c_out).enumerate().for_each(|(m, acc)| {
        if let Some(b) = b {
            acc.copy_from_slice(b);
        }
        for (ci, &v) in x[m * c_in..(m + 1) * c_in].iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&w[ci * c_out..(ci + 1) * c_out]) {
                *a += v * wv;
            }
        }
    });
    out
}

pub fn backward_input<T: Scalar>(rows: usize, c_in: usize, c_out: usize, w: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * c_in];
    dx.par_chunks_mut(c_in).enumerate().for_each(|(m, acc)| {
        let grad = &dy[m * c_out..(m + 1) * c_out];
        for (ci, a) in acc.iter_mut().enumerate() {
            let mut s = T::zero();
            for (&d, &wv) in grad.iter().zip(&w[ci * c_out..(ci + 1) * c_out]) {
                s += d * wv;
            }
            *a = s;
        }
    });
    dx
}

pub fn backward_weights<T: Scalar>(rows: usize, c_in: usize, c_out: usize, x: &[T], dy: &[T]) -> Vec<T> {
    let mut dw = vec![T::zero(); c_in * c_out];
    dw.par_chunks_mut(c_out).enumerate().for_each(|(ci, acc)| {
        for m in 0..rows {
            let v = x[m * c_in + ci];
            for (a, &d) in acc.iter_mut().zip(&dy[m * c_out..(m + 1) * c_out]) {
                *a += v * d;
            }
        }
    });
    dw
}

pub fn backward_bias<T: Scalar>(c_out: usize, dy: &[T]) -> Vec<T> {
    let mut db = vec![T::zero(); c_out];
    for chunk in dy.chunks_exact(c_out) {
        for (a, &d) in db.iter_mut().zip(chunk) {
            *a += d;
        }
    }
    db
}
