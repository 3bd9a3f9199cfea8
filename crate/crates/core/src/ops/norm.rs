//! Per-channel batch normalization over all leading positions of a
//! channel-last tensor.

use crate::tensor::Scalar;

pub const EPSILON: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.9;

/// Biased per-channel mean and variance over `rows` positions.
pub fn batch_stats<T: Scalar>(rows: usize, c: usize, x: &[T]) -> (Vec<T>, Vec<T>) {
    let count = T::of(rows as f64);
    let mut mean = vec![T::zero(); c];
    for chunk in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(chunk) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); c];
    for chunk in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(chunk).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = *s / count);
    (mean, var)
}

/// Normalizes with the given statistics. Returns `(y, x_hat, inv_std)`.
pub fn forward<T: Scalar>(
    c: usize,
    x: &[T],
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::of(EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for chunk in x.chunks_exact(c) {
        for (k, &v) in chunk.iter().enumerate() {
            let h = (v - mean[k]) * inv_std[k];
            x_hat.push(h);
            y.push(gamma[k] * h + beta[k]);
        }
    }
    (y, x_hat, inv_std)
}

/// Gradients `(dx, dgamma, dbeta)`. With `batch_statistics` the mean and
/// variance depend on `x`; otherwise they are constants.
pub fn backward<T: Scalar>(
    c: usize,
    dy: &[T],
    x_hat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_statistics: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (d, h) in dy.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
        for k in 0..c {
            dbeta[k] += d[k];
            dgamma[k] += d[k] * h[k];
        }
    }
    let count = T::of(rows as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for (d, h) in dy.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
        for k in 0..c {
            let scale = gamma[k] * inv_std[k];
            let v = if batch_statistics {
                scale * (d[k] - dbeta[k] / count - h[k] * dgamma[k] / count)
            } else {
                scale * d[k]
            };
            dx.push(v);
        }
    }
    (dx, dgamma, dbeta)
}

/// `running ← momentum·running + (1 − momentum)·batch`.
pub fn update_running<T: Scalar>(running: &mut [T], batch: &[T]) {
    let m = T::of(MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = m * *r + (T::one() - m) * b;
    }
}
