//! Per-pixel affine color transform. For output channel `c` the coefficient
//! block is `[m_c0, m_c1, m_c2, offset_c]` at channels `4c..4c + 4`.

use crate::tensor::Scalar;

pub const INPUTS: usize = 3;
pub const OUTPUTS: usize = 3;
pub const COEFFS: usize = OUTPUTS * (INPUTS + 1);

pub fn forward<T: Scalar>(coeffs: &[T], phi: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(phi.len());
    for (a, px) in coeffs.chunks_exact(COEFFS).zip(phi.chunks_exact(INPUTS)) {
        for c in 0..OUTPUTS {
            let block = &a[c * (INPUTS + 1)..(c + 1) * (INPUTS + 1)];
            out.push(block[INPUTS] + block[0] * px[0] + block[1] * px[1] + block[2] * px[2]);
        }
    }
    out
}

/// Gradients `(d_coeffs, d_phi)`.
pub fn backward<T: Scalar>(coeffs: &[T], phi: &[T], dout: &[T]) -> (Vec<T>, Vec<T>) {
    let mut dcoef = vec![T::zero(); coeffs.len()];
    let mut dphi = vec![T::zero(); phi.len()];
    for (((a, px), d), (da, dp)) in coeffs
        .chunks_exact(COEFFS)
        .zip(phi.chunks_exact(INPUTS))
        .zip(dout.chunks_exact(OUTPUTS))
        .zip(dcoef.chunks_exact_mut(COEFFS).zip(dphi.chunks_exact_mut(INPUTS)))
    {
        for (c, &dc) in d.iter().enumerate() {
            let base = c * (INPUTS + 1);
            for j in 0..INPUTS {
                da[base + j] = dc * px[j];
                dp[j] += dc * a[base + j];
            }
            da[base + INPUTS] = dc;
        }
    }
    (dcoef, dphi)
}
