//! Normalized coordinate grids and trilinear sampling with zero padding.

use crate::error::{invalid, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Normalized coordinate of index `i` on an axis with `n` cells.
#[inline]
pub fn axis_coord<T: Scalar>(i: usize, n: usize) -> T {
    if n == 1 {
        T::zero()
    } else {
        sc::<T>(-1.0) + sc::<T>(2.0) * sc::<T>(i as f64) / sc::<T>((n - 1) as f64)
    }
}

/// `d×h×w×3` grid of normalized coordinates, ordered (x←w, y←h, z←d).
pub fn grid_coords<T: Scalar>(d: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if d == 0 || h == 0 || w == 0 {
        return invalid("grid extents must be >= 1");
    }
    let mut data = Vec::with_capacity(d * h * w * 3);
    for z in 0..d {
        let zc = axis_coord::<T>(z, d);
        for y in 0..h {
            let yc = axis_coord::<T>(y, h);
            for x in 0..w {
                data.push(axis_coord::<T>(x, w));
                data.push(yc);
                data.push(zc);
            }
        }
    }
    Tensor::new(&[d, h, w, 3], data)
}

/// Interpolation taps along one axis: up to two (index, weight, dweight/dcoord).
#[derive(Clone, Copy)]
struct AxisTaps<T> {
    idx: [usize; 2],
    w: [T; 2],
    dw: [T; 2],
    n: usize,
}

#[inline]
fn axis_taps<T: Scalar>(c: T, n: usize) -> AxisTaps<T> {
    let zero = T::zero();
    if n == 1 {
        // Degenerate axis: the single slice covers the whole [-1, 1] range.
        let inside = c.abs() <= T::one();
        return AxisTaps {
            idx: [0, 0],
            w: [if inside { T::one() } else { zero }, zero],
            dw: [zero, zero],
            n: 1,
        };
    }
    let half = sc::<T>((n - 1) as f64) * sc(0.5);
    let pos = (c + T::one()) * half;
    let f0 = pos.floor();
    let frac = pos - f0;
    let i0 = f0.to_i64().unwrap_or(i64::MIN / 2);
    // Out-of-range taps keep weight zero, which is the zero-padding rule.
    let mut taps = AxisTaps { idx: [0, 0], w: [zero, zero], dw: [zero, zero], n: 2 };
    for (slot, (i, w, dw)) in [(i0, T::one() - frac, -half), (i0 + 1, frac, half)].into_iter().enumerate() {
        if i >= 0 && (i as usize) < n {
            taps.idx[slot] = i as usize;
            taps.w[slot] = w;
            taps.dw[slot] = dw;
        }
    }
    taps
}

fn check<T: Scalar>(feature: &Tensor<T>, coords: &Tensor<T>) -> Result<([usize; 4], usize)> {
    if feature.ndim() != 4 {
        return invalid(format!("trilinear_sample: feature must be C×D×H×W, got {:?}", feature.shape()));
    }
    if coords.ndim() != 4 || coords.shape()[3] != 3 {
        return invalid(format!("trilinear_sample: coords must be D×H×W×3, got {:?}", coords.shape()));
    }
    let s = feature.shape();
    Ok(([s[0], s[1], s[2], s[3]], coords.len() / 3))
}

fn out_shape(feature: &Tensor<impl Scalar>, coords: &Tensor<impl Scalar>) -> [usize; 4] {
    let c = coords.shape();
    [feature.shape()[0], c[0], c[1], c[2]]
}

/// Samples `feature` (C×D×H×W) at every normalized coordinate in `coords`
/// (D'×H'×W'×3), returning C×D'×H'×W'. Corners outside the grid read zero.
pub fn trilinear_sample<T: Scalar>(feature: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let ([ch, d, h, w], npts) = check(feature, coords)?;
    let vol = d * h * w;
    let fd = feature.data();
    let mut out = vec![T::zero(); ch * npts];
    for (p, xyz) in coords.data().chunks_exact(3).enumerate() {
        let tx = axis_taps(xyz[0], w);
        let ty = axis_taps(xyz[1], h);
        let tz = axis_taps(xyz[2], d);
        for a in 0..tz.n {
            let wz = tz.w[a];
            if wz == T::zero() {
                continue;
            }
            for b in 0..ty.n {
                let wzy = wz * ty.w[b];
                if wzy == T::zero() {
                    continue;
                }
                for e in 0..tx.n {
                    let wt = wzy * tx.w[e];
                    if wt == T::zero() {
                        continue;
                    }
                    let off = (tz.idx[a] * h + ty.idx[b]) * w + tx.idx[e];
                    for c in 0..ch {
                        out[c * npts + p] += wt * fd[c * vol + off];
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape(feature, coords), out)
}

/// Gradients of [`trilinear_sample`] with respect to the feature and the coordinates.
pub fn trilinear_sample_backward<T: Scalar>(
    feature: &Tensor<T>,
    coords: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ([ch, d, h, w], npts) = check(feature, coords)?;
    if upstream.shape() != out_shape(feature, coords) {
        return invalid("trilinear_sample backward: upstream shape mismatch");
    }
    let vol = d * h * w;
    let fd = feature.data();
    let up = upstream.data();
    let mut gf = vec![T::zero(); feature.len()];
    let mut gc = vec![T::zero(); coords.len()];
    for (p, xyz) in coords.data().chunks_exact(3).enumerate() {
        let tx = axis_taps(xyz[0], w);
        let ty = axis_taps(xyz[1], h);
        let tz = axis_taps(xyz[2], d);
        let mut g = [T::zero(); 3];
        for a in 0..tz.n {
            for b in 0..ty.n {
                for e in 0..tx.n {
                    let (wz, wy, wx) = (tz.w[a], ty.w[b], tx.w[e]);
                    let (dz, dy, dx) = (tz.dw[a], ty.dw[b], tx.dw[e]);
                    if wz == T::zero() && dz == T::zero()
                        || wy == T::zero() && dy == T::zero()
                        || wx == T::zero() && dx == T::zero()
                    {
                        continue;
                    }
                    let off = (tz.idx[a] * h + ty.idx[b]) * w + tx.idx[e];
                    let wt = wz * wy * wx;
                    let mut dot = T::zero();
                    for c in 0..ch {
                        let u = up[c * npts + p];
                        gf[c * vol + off] += wt * u;
                        dot += u * fd[c * vol + off];
                    }
                    g[0] += dot * dx * wy * wz;
                    g[1] += dot * wx * dy * wz;
                    g[2] += dot * wx * wy * dz;
                }
            }
        }
        gc[3 * p..3 * p + 3].copy_from_slice(&g);
    }
    Ok((Tensor::new(feature.shape(), gf)?, Tensor::new(coords.shape(), gc)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_degenerate_and_corners() {
        let g = grid_coords::<f32>(1, 1, 1).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
        let g = grid_coords::<f32>(2, 2, 2).unwrap();
        for p in g.data().chunks(3) {
            assert!(p.iter().all(|v| v.abs() == 1.0));
        }
        let g = grid_coords::<f32>(3, 3, 3).unwrap();
        assert_eq!(&g.data()[13 * 3..13 * 3 + 3], &[0.0, 0.0, 0.0]);
        assert!(grid_coords::<f32>(0, 1, 1).is_err());
    }

    #[test]
    fn identity_sampling_is_exact() {
        let f = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| (i as f32 * 0.37).sin()).unwrap();
        let g = grid_coords::<f32>(3, 4, 5).unwrap();
        assert_eq!(trilinear_sample(&f, &g).unwrap(), f);
    }

    #[test]
    fn midpoint_is_mean() {
        let f = Tensor::<f64>::from_fn(&[1, 1, 1, 3], |i| [2.0, 6.0, 10.0][i]).unwrap();
        let c = Tensor::<f64>::new(&[1, 1, 1, 3], vec![-0.5, 0.0, 0.0]).unwrap();
        assert_eq!(trilinear_sample(&f, &c).unwrap().data(), &[4.0]);
    }

    #[test]
    fn far_outside_reads_zero() {
        let f = Tensor::<f32>::full(&[1, 2, 2, 2], 3.0).unwrap();
        let c = Tensor::<f32>::new(&[1, 1, 1, 3], vec![3.5, 0.0, 0.0]).unwrap();
        assert_eq!(trilinear_sample(&f, &c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn coords_must_end_in_three() {
        let f = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        let c = Tensor::<f32>::zeros(&[1, 1, 1, 2]).unwrap();
        assert!(trilinear_sample(&f, &c).is_err());
    }
}
