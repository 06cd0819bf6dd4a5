//! Keypoint-driven flow candidates, mask blending and Gaussian heatmaps.

use crate::error::{invalid, Result};
use crate::kernels::sample::grid_coords;
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

fn keypoint_pair<T: Scalar>(xs: &Tensor<T>, xd: &Tensor<T>) -> Result<usize> {
    if xs.ndim() != 2 || xs.shape()[1] != 3 {
        return invalid(format!("keypoints must be K×3, got {:?}", xs.shape()));
    }
    if xs.shape() != xd.shape() {
        return invalid(format!(
            "source and driving keypoint counts differ: {:?} vs {:?}",
            xs.shape(),
            xd.shape()
        ));
    }
    Ok(xs.shape()[0])
}

/// `(K+1)×D×H×W×3` sampling grids: candidate 0 is the identity, candidate
/// `k` translates by `x_s[k-1] − x_d[k-1]`.
pub fn candidate_flows<T: Scalar>(
    xs: &Tensor<T>,
    xd: &Tensor<T>,
    dims: [usize; 3],
) -> Result<Tensor<T>> {
    let k = keypoint_pair(xs, xd)?;
    let grid = grid_coords::<T>(dims[0], dims[1], dims[2])?;
    let g = grid.data();
    let mut out = Vec::with_capacity((k + 1) * g.len());
    out.extend_from_slice(g);
    for j in 0..k {
        let shift = [0, 1, 2].map(|c| xs.data()[j * 3 + c] - xd.data()[j * 3 + c]);
        out.extend(g.chunks_exact(3).flat_map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]));
    }
    Tensor::new(&[k + 1, dims[0], dims[1], dims[2], 3], out)
}

/// Gradients of [`candidate_flows`] with respect to `x_s` and `x_d`.
pub fn candidate_flows_backward<T: Scalar>(
    xs: &Tensor<T>,
    xd: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = keypoint_pair(xs, xd)?;
    if upstream.ndim() != 5 || upstream.shape()[0] != k + 1 || upstream.shape()[4] != 3 {
        return invalid("candidate_flows backward: upstream shape mismatch");
    }
    let mut gs = vec![T::zero(); k * 3];
    for j in 0..k {
        for p in upstream.outer(j + 1).chunks_exact(3) {
            for c in 0..3 {
                gs[j * 3 + c] += p[c];
            }
        }
    }
    let gd = gs.iter().map(|&v| -v).collect();
    Ok((Tensor::new(xs.shape(), gs)?, Tensor::new(xd.shape(), gd)?))
}

fn blend_dims<T: Scalar>(masks: &Tensor<T>, cands: &Tensor<T>) -> Result<(usize, usize)> {
    let ms = masks.shape();
    let cs = cands.shape();
    if ms.len() != 4 || cs.len() != 5 || cs[4] != 3 || ms[..] != cs[..4] {
        return invalid(format!("blend_flows: masks {ms:?} incompatible with candidates {cs:?}"));
    }
    Ok((ms[0], ms[1] * ms[2] * ms[3]))
}

/// `w(p) = Σ_k m_k(p) · w_k(p)`.
pub fn blend_flows<T: Scalar>(masks: &Tensor<T>, cands: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, vox) = blend_dims(masks, cands)?;
    let (m, c) = (masks.data(), cands.data());
    let mut out = vec![T::zero(); vox * 3];
    for j in 0..k {
        for p in 0..vox {
            let w = m[j * vox + p];
            let base = (j * vox + p) * 3;
            for a in 0..3 {
                out[p * 3 + a] += w * c[base + a];
            }
        }
    }
    Tensor::new(&[cands.shape()[1], cands.shape()[2], cands.shape()[3], 3], out)
}

/// Gradients of [`blend_flows`] with respect to masks and candidates.
pub fn blend_flows_backward<T: Scalar>(
    masks: &Tensor<T>,
    cands: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (k, vox) = blend_dims(masks, cands)?;
    if upstream.len() != vox * 3 {
        return invalid("blend_flows backward: upstream shape mismatch");
    }
    let (m, c, g) = (masks.data(), cands.data(), upstream.data());
    let mut gm = vec![T::zero(); k * vox];
    let mut gc = vec![T::zero(); k * vox * 3];
    for j in 0..k {
        for p in 0..vox {
            let base = (j * vox + p) * 3;
            let mut acc = T::zero();
            for a in 0..3 {
                acc += g[p * 3 + a] * c[base + a];
                gc[base + a] = m[j * vox + p] * g[p * 3 + a];
            }
            gm[j * vox + p] = acc;
        }
    }
    Ok((Tensor::new(masks.shape(), gm)?, Tensor::new(cands.shape(), gc)?))
}

fn check_keypoints<T: Scalar>(x: &Tensor<T>, variance: f64) -> Result<usize> {
    if x.ndim() != 2 || x.shape()[1] != 3 {
        return invalid(format!("keypoints must be K×3, got {:?}", x.shape()));
    }
    if !(variance > 0.0) {
        return invalid("heatmap variance must be positive");
    }
    Ok(x.shape()[0])
}

/// `H_k(g) = exp(−‖g − x_k‖² / (2σ²))` on the normalized grid of `dims`.
pub fn gaussian_heatmap<T: Scalar>(x: &Tensor<T>, dims: [usize; 3], variance: f64) -> Result<Tensor<T>> {
    let k = check_keypoints(x, variance)?;
    let grid = grid_coords::<T>(dims[0], dims[1], dims[2])?;
    let inv = sc::<T>(-0.5 / variance);
    let mut out = Vec::with_capacity(k * grid.len() / 3);
    for kp in x.data().chunks_exact(3) {
        out.extend(grid.data().chunks_exact(3).map(|g| {
            let d2 = (g[0] - kp[0]).powi(2) + (g[1] - kp[1]).powi(2) + (g[2] - kp[2]).powi(2);
            (d2 * inv).exp()
        }));
    }
    Tensor::new(&[k, dims[0], dims[1], dims[2]], out)
}

/// Gradient of [`gaussian_heatmap`] with respect to the keypoints.
pub fn gaussian_heatmap_backward<T: Scalar>(
    x: &Tensor<T>,
    dims: [usize; 3],
    variance: f64,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let heat = gaussian_heatmap(x, dims, variance)?;
    heat.expect_same_shape(upstream)?;
    let grid = grid_coords::<T>(dims[0], dims[1], dims[2])?;
    let inv = sc::<T>(1.0 / variance);
    let vox = grid.len() / 3;
    let mut gx = vec![T::zero(); x.len()];
    for (j, kp) in x.data().chunks_exact(3).enumerate() {
        let hk = heat.outer(j);
        let uk = upstream.outer(j);
        for (p, g) in grid.data().chunks_exact(3).enumerate().take(vox) {
            let s = uk[p] * hk[p] * inv;
            for a in 0..3 {
                gx[j * 3 + a] += s * (g[a] - kp[a]);
            }
        }
    }
    Tensor::new(x.shape(), gx)
}
