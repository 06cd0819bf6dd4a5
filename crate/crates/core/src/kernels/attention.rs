//! Softmax along an arbitrary axis and fused scaled dot-product attention.

use crate::error::{invalid, Result};
use crate::kernels::gemm::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(t: &Tensor<impl Scalar>, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return invalid(format!("softmax axis {axis} out of range for {:?}", t.shape()));
    }
    Ok(())
}

/// Softmax over `axis`, stabilized by subtracting the slice maximum.
pub fn softmax<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(t, axis)?;
    let (outer, n, inner) = split(t.shape(), axis);
    let x = t.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).fold(T::neg_infinity(), |m, k| m.max(x[at(k)]));
            let mut total = T::zero();
            for k in 0..n {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                total += e;
            }
            let inv = total.recip();
            for k in 0..n {
                out[at(k)] *= inv;
            }
        }
    }
    Tensor::new(t.shape(), out)
}

/// Softmax VJP from its output `y`: `g_x = y ⊙ (g − Σ g⊙y)` per slice.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(y, axis)?;
    y.expect_same_shape(upstream)?;
    let (outer, n, inner) = split(y.shape(), axis);
    let (yd, g) = (y.data(), upstream.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let s: T = (0..n).map(|k| g[at(k)] * yd[at(k)]).sum();
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (g[at(k)] - s);
            }
        }
    }
    Tensor::new(y.shape(), out)
}

fn attention_dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return invalid("attention: q, k, v must be matrices");
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (m, dk) = (k.shape()[0], k.shape()[1]);
    if dk != d || v.shape()[0] != m {
        return invalid(format!(
            "attention: incompatible q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok((n, d, m, v.shape()[1]))
}

/// Row-wise attention weights `softmax(q kᵀ · scale)`, shape n×m.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if q.ndim() != 2 || k.ndim() != 2 || q.shape()[1] != k.shape()[1] {
        return invalid("attention: q and k must be matrices with equal width");
    }
    let (n, d, m) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    let mut s = vec![T::zero(); n * m];
    matmul_bt_acc(q.data(), k.data(), &mut s, n, d, m);
    for v in &mut s {
        *v *= scale;
    }
    softmax(&Tensor::new(&[n, m], s)?, 1)
}

/// `softmax(q kᵀ · scale) · v` for q: n×d, k: m×d, v: m×c.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (n, _, m, c) = attention_dims(q, k, v)?;
    let a = attention_weights(q, k, scale)?;
    let mut out = vec![T::zero(); n * c];
    matmul_acc(a.data(), v.data(), &mut out, n, m, c);
    Tensor::new(&[n, c], out)
}

/// Gradients of [`attention`] with respect to q, k and v.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d, m, c) = attention_dims(q, k, v)?;
    if upstream.shape() != [n, c] {
        return invalid("attention backward: upstream shape mismatch");
    }
    let a = attention_weights(q, k, scale)?;
    let g = upstream.data();

    let mut ga = vec![T::zero(); n * m];
    matmul_bt_acc(g, v.data(), &mut ga, n, c, m);
    let mut gv = vec![T::zero(); m * c];
    matmul_at_acc(a.data(), g, &mut gv, n, m, c);

    let mut gs = softmax_backward(&a, &Tensor::new(&[n, m], ga)?, 1)?.into_data();
    for x in &mut gs {
        *x *= scale;
    }
    let mut gq = vec![T::zero(); n * d];
    matmul_acc(&gs, k.data(), &mut gq, n, m, d);
    let mut gk = vec![T::zero(); m * d];
    matmul_at_acc(&gs, q.data(), &mut gk, n, m, d);
    Ok((Tensor::new(&[n, d], gq)?, Tensor::new(&[m, d], gk)?, Tensor::new(&[m, c], gv)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_slice() {
        let t = Tensor::<f64>::full(&[2, 4], 3.0).unwrap();
        let s = softmax(&t, 1).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn closed_form_pair() {
        let t = Tensor::<f64>::new(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn middle_axis_sums_to_one() {
        let t = Tensor::<f32>::from_fn(&[2, 5, 3], |i| (i as f32 * 1.7).sin() * 4.0).unwrap();
        let s = softmax(&t, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let sum: f32 = (0..5).map(|k| s.get(&[o, k, i])).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
        assert!(softmax(&t, 3).is_err());
    }

    #[test]
    fn single_element_gradient_is_zero() {
        let y = softmax(&Tensor::<f64>::new(&[1], vec![2.5]).unwrap(), 0).unwrap();
        let g = softmax_backward(&y, &Tensor::new(&[1], vec![7.0]).unwrap(), 0).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }
}
