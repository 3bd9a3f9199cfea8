//! Learned grayscale guidance: per pixel,
//! `g = clamp(b + Σ_c ρ_c(M_c·φ + b'_c), 0, 1)` with
//! `ρ_c(u) = Σ_i a_{c,i}·max(u − t_{c,i}, 0)`.

use crate::tensor::Scalar;

pub const CHANNELS: usize = 3;

/// Borrowed guidance parameters, flat row-major.
#[derive(Clone, Copy)]
pub struct GuideArgs<'a, T> {
    /// 3×3 color matrix, row `c` is `M_c`.
    pub matrix: &'a [T],
    pub bias: T,
    /// Per-channel bias `b'_c`.
    pub channel_bias: &'a [T],
    /// 3×K thresholds.
    pub thresholds: &'a [T],
    /// 3×K slopes.
    pub slopes: &'a [T],
    pub knots: usize,
}

impl<T: Scalar> GuideArgs<'_, T> {
    #[inline]
    fn project(&self, px: &[T], c: usize) -> T {
        let row = &self.matrix[c * CHANNELS..(c + 1) * CHANNELS];
        row[0] * px[0] + row[1] * px[1] + row[2] * px[2] + self.channel_bias[c]
    }

    #[inline]
    fn curve(&self, u: T, c: usize) -> T {
        let t = &self.thresholds[c * self.knots..(c + 1) * self.knots];
        let a = &self.slopes[c * self.knots..(c + 1) * self.knots];
        t.iter()
            .zip(a)
            .fold(T::zero(), |acc, (&t, &a)| acc + a * (u - t).max(T::zero()))
    }

    #[inline]
    fn raw(&self, px: &[T]) -> T {
        (0..CHANNELS).fold(self.bias, |acc, c| acc + self.curve(self.project(px, c), c))
    }
}

/// Guidance values for `phi` (pixels × 3). Also returns a region signature
/// covering every ReLU knot and the clamp.
pub fn forward<T: Scalar>(args: &GuideArgs<'_, T>, phi: &[T]) -> (Vec<T>, u64) {
    let mut sig = crate::tape::Signature::new();
    let out = phi
        .chunks_exact(CHANNELS)
        .map(|px| {
            for c in 0..CHANNELS {
                let u = args.project(px, c);
                for &t in &args.thresholds[c * args.knots..(c + 1) * args.knots] {
                    sig.push_bool(u > t);
                }
            }
            let raw = args.raw(px);
            sig.push(clamp_region(raw));
            raw.max(T::zero()).min(T::one())
        })
        .collect();
    (out, sig.finish())
}

#[inline]
fn clamp_region<T: Scalar>(raw: T) -> u64 {
    if raw < T::zero() {
        0
    } else if raw > T::one() {
        2
    } else {
        1
    }
}

#[derive(Debug, Default)]
pub struct GuideGrads<T> {
    pub phi: Vec<T>,
    pub matrix: Vec<T>,
    pub bias: T,
    pub channel_bias: Vec<T>,
    pub thresholds: Vec<T>,
    pub slopes: Vec<T>,
}

pub fn backward<T: Scalar>(args: &GuideArgs<'_, T>, phi: &[T], dg: &[T]) -> GuideGrads<T> {
    let k = args.knots;
    let mut grads = GuideGrads {
        phi: vec![T::zero(); phi.len()],
        matrix: vec![T::zero(); CHANNELS * CHANNELS],
        bias: T::zero(),
        channel_bias: vec![T::zero(); CHANNELS],
        thresholds: vec![T::zero(); CHANNELS * k],
        slopes: vec![T::zero(); CHANNELS * k],
    };
    for ((px, dphi), &d) in phi
        .chunks_exact(CHANNELS)
        .zip(grads.phi.chunks_exact_mut(CHANNELS))
        .zip(dg)
    {
        // Zero outside [0, 1], pass-through on the closed interval.
        if clamp_region(args.raw(px)) != 1 {
            continue;
        }
        grads.bias += d;
        for c in 0..CHANNELS {
            let u = args.project(px, c);
            let mut du = T::zero();
            for i in c * k..(c + 1) * k {
                let t = args.thresholds[i];
                if u > t {
                    grads.slopes[i] += d * (u - t);
                    grads.thresholds[i] -= d * args.slopes[i];
                    du += d * args.slopes[i];
                }
            }
            grads.channel_bias[c] += du;
            for j in 0..CHANNELS {
                grads.matrix[c * CHANNELS + j] += du * px[j];
                dphi[j] += du * args.matrix[c * CHANNELS + j];
            }
        }
    }
    grads
}
