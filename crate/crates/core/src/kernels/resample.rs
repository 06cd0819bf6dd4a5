//! Nearest upsampling, binomial blur-downsampling and spatial pooling.

use crate::error::{invalid, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn planar(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize)> {
    if t.ndim() != 3 {
        return invalid(format!("{what}: expected C×H×W, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = planar(x, "upsample")?;
    if factor == 0 {
        return invalid("upsample factor must be >= 1");
    }
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &src[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
            out.extend((0..ow).map(|xo| row[xo / factor]));
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Scalar>(x: &Tensor<T>, factor: usize, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = planar(x, "upsample")?;
    let (oh, ow) = (h * factor, w * factor);
    if upstream.shape() != [c, oh, ow] {
        return invalid("upsample backward: upstream shape mismatch");
    }
    let mut g = vec![T::zero(); x.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                g[(ch * h + y / factor) * w + xo / factor] += upstream.data()[(ch * oh + y) * ow + xo];
            }
        }
    }
    Tensor::new(x.shape(), g)
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable 5×5 binomial blur with edge-replicate padding, keeping every
/// second row and column. Constant inputs map to the same constant.
pub fn blur_down<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = planar(x, "blur_down")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let k: [T; 5] = BINOMIAL.map(sc);
    let src = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = T::zero();
                for (a, &ka) in k.iter().enumerate() {
                    let yi = clamp_index(2 * y as isize + a as isize - 2, h);
                    let mut row = T::zero();
                    for (b, &kb) in k.iter().enumerate() {
                        let xi = clamp_index(2 * xo as isize + b as isize - 2, w);
                        row += kb * plane[yi * w + xi];
                    }
                    acc += ka * row;
                }
                out[(ch * oh + y) * ow + xo] = acc;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn blur_down_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = planar(x, "blur_down")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    if upstream.shape() != [c, oh, ow] {
        return invalid("blur_down backward: upstream shape mismatch");
    }
    let k: [T; 5] = BINOMIAL.map(sc);
    let mut g = vec![T::zero(); x.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let u = upstream.data()[(ch * oh + y) * ow + xo];
                for (a, &ka) in k.iter().enumerate() {
                    let yi = clamp_index(2 * y as isize + a as isize - 2, h);
                    for (b, &kb) in k.iter().enumerate() {
                        let xi = clamp_index(2 * xo as isize + b as isize - 2, w);
                        g[(ch * h + yi) * w + xi] += ka * kb * u;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), g)
}

/// Mean over every non-leading axis: C×… → 1×C.
pub fn spatial_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() < 2 {
        return invalid("spatial_mean needs rank >= 2");
    }
    let c = x.shape()[0];
    let n = sc::<T>((x.len() / c) as f64);
    Tensor::new(&[1, c], (0..c).map(|i| x.outer(i).iter().copied().sum::<T>() / n).collect())
}

pub fn spatial_mean_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape()[0];
    if upstream.len() != c {
        return invalid("spatial_mean backward: upstream shape mismatch");
    }
    let inner = x.len() / c;
    let n = sc::<T>(inner as f64);
    let mut g = Vec::with_capacity(x.len());
    for i in 0..c {
        let v = upstream.data()[i] / n;
        g.extend(std::iter::repeat_n(v, inner));
    }
    Tensor::new(x.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants() {
        let x = Tensor::<f64>::full(&[2, 8, 6], 0.3).unwrap();
        let y = blur_down(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn upsample_repeats() {
        let x = Tensor::<f32>::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
