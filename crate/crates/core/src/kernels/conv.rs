//! 2D and 3D cross-correlation via im2col.
//!
//! A 2D convolution is handled as a 3D one with a unit depth axis, so both
//! share a single forward and backward path.

use crate::error::{invalid, Result};
use crate::kernels::gemm::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }
}

fn geometry(
    input: &[usize],
    kernel: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Geometry> {
    let (cin, sin, cout, kci, ks) = match (input.len(), kernel.len()) {
        (3, 4) => (input[0], [1, input[1], input[2]], kernel[0], kernel[1], [1, kernel[2], kernel[3]]),
        (4, 5) => (
            input[0],
            [input[1], input[2], input[3]],
            kernel[0],
            kernel[1],
            [kernel[2], kernel[3], kernel[4]],
        ),
        _ => return invalid(format!("conv: incompatible input {input:?} and kernel {kernel:?}")),
    };
    if kci != cin {
        return invalid(format!("conv: kernel expects {kci} input channels, got {cin}"));
    }
    if stride.contains(&0) {
        return invalid("conv: stride must be >= 1");
    }
    let mut output = [0; 3];
    for a in 0..3 {
        let padded = sin[a] + 2 * pad[a];
        if ks[a] > padded {
            return invalid(format!(
                "conv: kernel extent {} exceeds padded input extent {padded}",
                ks[a]
            ));
        }
        output[a] = (padded - ks[a]) / stride[a] + 1;
    }
    Ok(Geometry { cin, cout, input: sin, kernel: ks, stride, pad, output })
}

/// Per-axis stride and padding, with depth left untouched for 2D inputs.
fn axes(ndim: usize, stride: usize, pad: usize) -> ([usize; 3], [usize; 3]) {
    if ndim == 3 {
        ([1, stride, stride], [0, pad, pad])
    } else {
        ([stride; 3], [pad; 3])
    }
}

/// Iterates every (row, col) → flat input offset of the im2col matrix.
#[inline]
fn for_each_tap(g: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let cols = g.cols();
    let mut row = 0;
    for c in 0..g.cin {
        let cbase = c * id * ih * iw;
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    for z in 0..od {
                        let zi = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let yi = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let base = cbase + (zi as usize * ih + yi as usize) * iw;
                            let colbase = row * cols + (z * oh + y) * ow;
                            for x in 0..ow {
                                let xi = (x * g.stride[2] + e) as isize - g.pad[2] as isize;
                                if xi < 0 || xi >= iw as isize {
                                    continue;
                                }
                                f(row, colbase + x, base + xi as usize);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &Geometry, input: &[T]) -> Vec<T> {
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    for_each_tap(g, |_, ci, ii| col[ci] = input[ii]);
    col
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.cin * g.in_len()];
    for_each_tap(g, |_, ci, ii| out[ii] += col[ci]);
    out
}

fn out_shape(input: &Tensor<impl Scalar>, g: &Geometry) -> Vec<usize> {
    if input.ndim() == 3 {
        vec![g.cout, g.output[1], g.output[2]]
    } else {
        vec![g.cout, g.output[0], g.output[1], g.output[2]]
    }
}

/// Cross-correlation of `input` (C×H×W or C×D×H×W) with `kernel`
/// (Co×C×k×k or Co×C×k×k×k), zero padding `pad` on every spatial side.
pub fn conv<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (s, p) = axes(input.ndim(), stride, pad);
    let g = geometry(input.shape(), kernel.shape(), s, p)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return invalid(format!("conv: bias has {} entries, expected {}", b.len(), g.cout));
        }
    }
    let col = im2col(&g, input.data());
    let cols = g.cols();
    let mut out = vec![T::zero(); g.cout * cols];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(cols).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    matmul_acc(kernel.data(), &col, &mut out, g.cout, g.rows(), cols);
    Tensor::new(&out_shape(input, &g), out)
}

/// Gradients of [`conv`] with respect to input, kernel and bias.
pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (s, p) = axes(input.ndim(), stride, pad);
    let g = geometry(input.shape(), kernel.shape(), s, p)?;
    if upstream.shape() != out_shape(input, &g).as_slice() {
        return invalid("conv backward: upstream shape mismatch");
    }
    let cols = g.cols();
    let rows = g.rows();
    let col = im2col(&g, input.data());
    let up = upstream.data();

    let mut gk = vec![T::zero(); g.cout * rows];
    matmul_bt_acc(up, &col, &mut gk, g.cout, cols, rows);
    let gb: Vec<T> = up.chunks(cols).map(|c| c.iter().copied().sum()).collect();
    let mut gcol = vec![T::zero(); rows * cols];
    matmul_at_acc(kernel.data(), up, &mut gcol, g.cout, rows, cols);
    let gin = col2im(&g, &gcol);
    Ok((
        Tensor::new(input.shape(), gin)?,
        Tensor::new(kernel.shape(), gk)?,
        Tensor::new(&[g.cout], gb)?,
    ))
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (k <= padded && stride > 0).then(|| (padded - k) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::<f32>::from_fn(&[1, 4, 5], |i| i as f32).unwrap();
        let k = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(conv(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let x = Tensor::<f32>::full(&[1, 5, 5], 0.5).unwrap();
        let k = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f64>::zeros(&[2, 9, 8]).unwrap();
        let k = Tensor::<f64>::zeros(&[3, 2, 3, 3]).unwrap();
        let y = conv(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 5, 4]);
        assert_eq!(conv_out_extent(9, 3, 2, 1), Some(5));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2, 2]).unwrap();
        let k = Tensor::<f64>::zeros(&[1, 2, 3, 3]).unwrap();
        assert!(conv(&x, &k, None, 1, 0).is_err());
        let k = Tensor::<f64>::zeros(&[1, 3, 1, 1]).unwrap();
        assert!(conv(&x, &k, None, 1, 0).is_err());
        let k = Tensor::<f64>::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(conv(&x, &k, None, 0, 0).is_err());
    }
}
