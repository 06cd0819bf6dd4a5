//! Image and sequence quality metrics.

use synwarp_core::error::{Error, Result};
use synwarp_core::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.expect_same_shape(b)
}

fn f(v: impl Scalar) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (f(x) - f(y)).abs()).sum();
    Ok(s / a.len() as f64)
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (f(x) - f(y)).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Channel-mean grayscale `H×W` plane of a `C×H×W` image.
pub fn grayscale<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected a C×H×W image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut g = vec![0.0; h * w];
    for ch in 0..c {
        for (gi, &v) in g.iter_mut().zip(img.outer(ch)) {
            *gi += f(v);
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((g, h, w))
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| taps[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM over channel-mean grayscale, averaged over every valid
/// 11×11 window position.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (ga, h, w) = grayscale(a)?;
    let (gb, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&ga, h, w, &taps);
    let mu_b = filter_valid(&gb, h, w, &taps);
    let aa = filter_valid(&prod(&ga, &ga), h, w, &taps);
    let bb = filter_valid(&prod(&gb, &gb), h, w, &taps);
    let ab = filter_valid(&prod(&ga, &gb), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(total / n as f64)
}

/// Mean over `t ≥ 1` of `|L1(pred_t, pred_{t−1}) − L1(gt_t, gt_{t−1})|`.
pub fn temporal_consistency<T: Scalar>(pred: &[Tensor<T>], gt: &[Tensor<T>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("{} predicted frames but {} ground-truth frames", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("temporal consistency needs at least two frames".into()));
    }
    let mut s = 0.0;
    for t in 1..pred.len() {
        s += (l1(&pred[t], &pred[t - 1])? - l1(&gt[t], &gt[t - 1])?).abs();
    }
    Ok(s / (pred.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.3).unwrap();
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn taps_normalized() {
        let t = gaussian_taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(t[5] > t[4] && (t[4] - t[6]).abs() < 1e-18);
    }

    #[test]
    fn small_images_rejected() {
        let a = Tensor::<f64>::zeros(&[3, 10, 12]).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn temporal_needs_matching_lengths() {
        let a = Tensor::<f64>::zeros(&[3, 2, 2]).unwrap();
        assert!(temporal_consistency(&[a.clone(), a.clone()], &[a.clone()]).is_err());
        assert!(temporal_consistency(&[a.clone()], &[a.clone()]).is_err());
    }
}
