//! Trilinear slicing of a bilateral grid `[gh][gw][depth][cells]` at
//! full-resolution pixel positions, with depth selected by a guidance map.
//!
//! Sampling convention: `px = (x + 0.5)·gw/W − 0.5`, `py = (y + 0.5)·gh/H − 0.5`,
//! `pz = g·(depth − 1)`, each clamped to `[0, extent − 1]`. The blend of the
//! two bracketing cells per axis equals the hat-kernel sum
//! `Σ τ(px − i)·τ(py − j)·τ(pz − k)·A[j, i, k]`, `τ(s) = max(1 − |s|, 0)`.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub cells: usize,
}

impl GridDims {
    #[inline]
    fn index(&self, y: usize, x: usize, z: usize) -> usize {
        ((y * self.width + x) * self.depth + z) * self.cells
    }
}

/// Bracketing cells and blend weight of continuous coordinate `p` on an axis
/// of `extent` cells: the sample is `(1 − f)·v[lo] + f·v[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

#[inline]
pub fn bracket<T: Scalar>(p: T, extent: usize) -> Bracket<T> {
    if extent == 1 {
        return Bracket {
            lo: 0,
            hi: 0,
            frac: T::zero(),
        };
    }
    let top = T::of((extent - 1) as f64);
    let p = p.max(T::zero()).min(top);
    let lo = p.floor().to_index().min(extent - 2);
    Bracket {
        lo,
        hi: lo + 1,
        frac: p - T::of(lo as f64),
    }
}

/// Center-aligned continuous grid coordinate of pixel `x` on an image axis
/// of `pixels` samples mapped onto `cells` grid cells.
#[inline]
pub fn spatial_coord<T: Scalar>(x: usize, pixels: usize, cells: usize) -> T {
    T::of((x as f64 + 0.5) * cells as f64 / pixels as f64 - 0.5)
}

#[inline]
pub fn depth_coord<T: Scalar>(g: T, depth: usize) -> T {
    g * T::of(depth.saturating_sub(1) as f64)
}

fn axis<T: Scalar>(pixels: usize, cells: usize) -> Vec<Bracket<T>> {
    (0..pixels)
        .map(|x| bracket(spatial_coord(x, pixels, cells), cells))
        .collect()
}

/// Returns `H×W×cells` coefficients and a signature of the depth brackets.
pub fn forward<T: Scalar>(dims: &GridDims, grid: &[T], h: usize, w: usize, g: &[T]) -> (Vec<T>, u64) {
    let ys = axis::<T>(h, dims.height);
    let xs = axis::<T>(w, dims.width);
    let cells = dims.cells;
    let mut out = vec![T::zero(); h * w * cells];
    let mut sig = crate::tape::Signature::new();
    for (y, by) in ys.iter().enumerate() {
        for (x, bx) in xs.iter().enumerate() {
            let p = y * w + x;
            let bz = bracket(depth_coord(g[p], dims.depth), dims.depth);
            sig.push(bz.lo as u64);
            let acc = &mut out[p * cells..(p + 1) * cells];
            // Nested lerps instead of the 8-weight sum: equal corners give
            // back their value exactly, so a constant grid slices exactly.
            let lerp = |a: T, b: T, f: T| a + f * (b - a);
            for (k, a) in acc.iter_mut().enumerate() {
                let at = |iy: usize, ix: usize, iz: usize| grid[dims.index(iy, ix, iz) + k];
                let along_z = |iy: usize, ix: usize| lerp(at(iy, ix, bz.lo), at(iy, ix, bz.hi), bz.frac);
                let along_x = |iy: usize| lerp(along_z(iy, bx.lo), along_z(iy, bx.hi), bx.frac);
                *a = lerp(along_x(by.lo), along_x(by.hi), by.frac);
            }
        }
    }
    (out, sig.finish())
}

/// Gradients `(d_grid, d_g)` for upstream gradient `dout` (`H×W×cells`).
pub fn backward<T: Scalar>(
    dims: &GridDims,
    grid: &[T],
    h: usize,
    w: usize,
    g: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let ys = axis::<T>(h, dims.height);
    let xs = axis::<T>(w, dims.width);
    let cells = dims.cells;
    let dz_dg = T::of(dims.depth.saturating_sub(1) as f64);
    let mut dgrid = vec![T::zero(); grid.len()];
    let mut dg = vec![T::zero(); h * w];
    for (y, by) in ys.iter().enumerate() {
        for (x, bx) in xs.iter().enumerate() {
            let p = y * w + x;
            let bz = bracket(depth_coord(g[p], dims.depth), dims.depth);
            let d = &dout[p * cells..(p + 1) * cells];
            let mut slope = T::zero();
            for (iy, wy) in [(by.lo, T::one() - by.frac), (by.hi, by.frac)] {
                for (ix, wx) in [(bx.lo, T::one() - bx.frac), (bx.hi, bx.frac)] {
                    let wxy = wy * wx;
                    for (iz, wz) in [(bz.lo, T::one() - bz.frac), (bz.hi, bz.frac)] {
                        let weight = wxy * wz;
                        let cell = &mut dgrid[dims.index(iy, ix, iz)..][..cells];
                        for (a, &dv) in cell.iter_mut().zip(d) {
                            *a += weight * dv;
                        }
                    }
                    if bz.lo != bz.hi {
                        let lo = &grid[dims.index(iy, ix, bz.lo)..][..cells];
                        let hi = &grid[dims.index(iy, ix, bz.hi)..][..cells];
                        for ((&dv, &a), &b) in d.iter().zip(lo).zip(hi) {
                            slope += wxy * dv * (b - a);
                        }
                    }
                }
            }
            dg[p] = slope * dz_dg;
        }
    }
    (dgrid, dg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracket_clamps_and_caps() {
        let b = bracket(7.0f64, 8);
        assert_eq!((b.lo, b.hi, b.frac), (6, 7, 1.0));
        let b = bracket(-0.25f64, 4);
        assert_eq!((b.lo, b.hi, b.frac), (0, 1, 0.0));
        let b = bracket(1.5f64, 4);
        assert_eq!((b.lo, b.hi, b.frac), (1, 2, 0.5));
        let b = bracket(0.3f64, 1);
        assert_eq!((b.lo, b.hi, b.frac), (0, 0, 0.0));
    }

    #[test]
    fn spatial_coords_are_center_aligned() {
        // 4 pixels onto 2 cells: centers at -0.25, 0.25, 0.75, 1.25
        let c: Vec<f64> = (0..4).map(|x| spatial_coord(x, 4, 2)).collect();
        assert_eq!(c, vec![-0.25, 0.25, 0.75, 1.25]);
    }
}
