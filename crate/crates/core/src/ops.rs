//! Registry of differentiable operations.
//!
//! Every node recorded on a [`Tape`](crate::tape::Tape) is one of these
//! ops; [`forward`] evaluates it and [`backward`] returns one gradient per
//! input.

use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Default negative slope of the leaky activations used throughout the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Exp,
    Mean,
    Sum,
    /// Mean absolute difference of two equally shaped tensors.
    L1,
    Reshape(Vec<usize>),
    /// Concatenation along the leading axis.
    Concat,
    /// Contiguous range of the leading axis.
    Slice { start: usize, len: usize },
    Transpose,
    SelectRow(usize),
    /// `x (n×c) + row (1×c)` broadcast over rows.
    AddRowBcast,
    /// `mask (1×…) ⊙ x (C×…)` broadcast over the leading axis.
    MulChannelBcast,
    MatMul,
    Attention { scale: f64 },
    /// 2D or 3D convolution chosen by input rank; inputs are (x, kernel, bias).
    Conv { stride: usize, pad: usize },
    UpsampleNearest(usize),
    BlurDown,
    SpatialMean,
    TrilinearSample,
    Softmax(usize),
    CandidateFlows([usize; 3]),
    BlendFlows,
    GaussianHeatmap { dims: [usize; 3], variance: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::LeakyRelu(s) if *s == 0.0 => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Exp => "exp",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::L1 => "l1",
            Op::Reshape(_) => "reshape",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::SelectRow(_) => "select_row",
            Op::AddRowBcast => "add_row_bcast",
            Op::MulChannelBcast => "mul_channel_bcast",
            Op::MatMul => "matmul",
            Op::Attention { .. } => "attention",
            Op::Conv { .. } => "conv",
            Op::UpsampleNearest(_) => "upsample_nearest",
            Op::BlurDown => "blur_down",
            Op::SpatialMean => "spatial_mean",
            Op::TrilinearSample => "trilinear_sample",
            Op::Softmax(_) => "softmax",
            Op::CandidateFlows(_) => "candidate_flows",
            Op::BlendFlows => "blend_flows",
            Op::GaussianHeatmap { .. } => "gaussian_heatmap",
        }
    }

    /// Number of tensor inputs the op consumes, `None` when variadic.
    pub fn arity(&self) -> Option<usize> {
        Some(match self {
            Op::Concat => return None,
            Op::Add | Op::Sub | Op::Mul | Op::L1 | Op::AddRowBcast | Op::MulChannelBcast => 2,
            Op::MatMul | Op::TrilinearSample | Op::CandidateFlows(_) | Op::BlendFlows => 2,
            Op::Attention { .. } | Op::Conv { .. } => 3,
            _ => 1,
        })
    }
}

fn n_of<T: Scalar>(t: &Tensor<T>) -> T {
    sc(t.len() as f64)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn leaky<T: Scalar>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

fn leading_rest(t: &Tensor<impl Scalar>) -> (usize, &[usize]) {
    (t.shape()[0], &t.shape()[1..])
}

fn check_arity<T>(op: &Op, inputs: &[&Tensor<T>]) -> Result<()> {
    match op.arity() {
        Some(n) if n != inputs.len() => {
            invalid(format!("{} expects {n} inputs, got {}", op.name(), inputs.len()))
        }
        None if inputs.is_empty() => invalid(format!("{} needs at least one input", op.name())),
        _ => Ok(()),
    }
}

fn matrix(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return invalid(format!("{what}: expected a matrix, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = matrix(x, "transpose")?;
    let d = x.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend((0..r).map(|i| d[i * c + j]));
    }
    Tensor::new(&[c, r], out)
}

fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix(a, "matmul")?;
    let (k2, n) = matrix(b, "matmul")?;
    if k != k2 {
        return invalid(format!("matmul: inner dims {k} vs {k2}"));
    }
    let mut out = vec![T::zero(); m * n];
    kernels::gemm::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

fn bcast_check<T: Scalar>(mask: &Tensor<T>, x: &Tensor<T>) -> Result<usize> {
    let (lm, rm) = leading_rest(mask);
    let (_, rx) = leading_rest(x);
    if lm != 1 || rm != rx {
        return invalid(format!(
            "mul_channel_bcast: mask {:?} incompatible with {:?}",
            mask.shape(),
            x.shape()
        ));
    }
    Ok(mask.len())
}

/// Evaluates `op` on `inputs`.
pub fn forward<T: Scalar>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    check_arity(op, inputs)?;
    let x = inputs[0];
    match op {
        Op::Add => x.zip_map(inputs[1], |a, b| a + b),
        Op::Sub => x.zip_map(inputs[1], |a, b| a - b),
        Op::Mul => x.zip_map(inputs[1], |a, b| a * b),
        Op::Scale(c) => {
            let c: T = sc(*c);
            Ok(x.map(|v| v * c))
        }
        Op::AddScalar(c) => {
            let c: T = sc(*c);
            Ok(x.map(|v| v + c))
        }
        Op::Sigmoid => Ok(x.map(sigmoid)),
        Op::Tanh => Ok(x.map(|v| v.tanh())),
        Op::LeakyRelu(s) => {
            let s: T = sc(*s);
            Ok(x.map(|v| leaky(v, s)))
        }
        Op::Exp => Ok(x.map(|v| v.exp())),
        Op::Mean => Ok(Tensor::scalar(x.mean())),
        Op::Sum => Ok(Tensor::scalar(x.sum())),
        Op::L1 => {
            x.expect_same_shape(inputs[1])?;
            let s: T = x.data().iter().zip(inputs[1].data()).map(|(&a, &b)| (a - b).abs()).sum();
            Ok(Tensor::scalar(s / n_of(x)))
        }
        Op::Reshape(shape) => x.reshape(shape),
        Op::Concat => {
            let rest = &x.shape()[1..];
            let mut lead = 0;
            let mut data = Vec::new();
            for t in inputs {
                if &t.shape()[1..] != rest {
                    return invalid(format!("concat: trailing dims {:?} vs {:?}", t.shape(), x.shape()));
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(rest);
            Tensor::new(&shape, data)
        }
        Op::Slice { start, len } => {
            if *len == 0 || start + len > x.shape()[0] {
                return invalid(format!("slice {start}..{} out of range for {:?}", start + len, x.shape()));
            }
            let inner = x.len() / x.shape()[0];
            let mut shape = x.shape().to_vec();
            shape[0] = *len;
            Tensor::new(&shape, x.data()[start * inner..(start + len) * inner].to_vec())
        }
        Op::Transpose => transpose(x),
        Op::SelectRow(r) => {
            let (n, c) = matrix(x, "select_row")?;
            if *r >= n {
                return invalid(format!("select_row {r} out of range for {n} rows"));
            }
            Tensor::new(&[1, c], x.outer(*r).to_vec())
        }
        Op::AddRowBcast => {
            let (_, c) = matrix(x, "add_row_bcast")?;
            let row = inputs[1];
            if row.len() != c {
                return invalid(format!("add_row_bcast: row of {} for width {c}", row.len()));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_exact_mut(c) {
                for (o, &r) in chunk.iter_mut().zip(row.data()) {
                    *o += r;
                }
            }
            Ok(out)
        }
        Op::MulChannelBcast => {
            let (mask, t) = (x, inputs[1]);
            let inner = bcast_check(mask, t)?;
            let mut out = t.clone();
            for chunk in out.data_mut().chunks_exact_mut(inner) {
                for (o, &m) in chunk.iter_mut().zip(mask.data()) {
                    *o *= m;
                }
            }
            Ok(out)
        }
        Op::MatMul => matmul(x, inputs[1]),
        Op::Attention { scale } => kernels::attention(x, inputs[1], inputs[2], sc(*scale)),
        Op::Conv { stride, pad } => kernels::conv(x, inputs[1], Some(inputs[2]), *stride, *pad),
        Op::UpsampleNearest(f) => kernels::upsample_nearest(x, *f),
        Op::BlurDown => kernels::blur_down(x),
        Op::SpatialMean => kernels::spatial_mean(x),
        Op::TrilinearSample => kernels::trilinear_sample(x, inputs[1]),
        Op::Softmax(axis) => kernels::softmax(x, *axis),
        Op::CandidateFlows(dims) => kernels::candidate_flows(x, inputs[1], *dims),
        Op::BlendFlows => kernels::blend_flows(x, inputs[1]),
        Op::GaussianHeatmap { dims, variance } => kernels::gaussian_heatmap(x, *dims, *variance),
    }
}

/// Vector-Jacobian product of `op`: one gradient per input, given the
/// forward `output` and the `upstream` gradient of the same shape.
pub fn backward<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    check_arity(op, inputs)?;
    if upstream.shape() != output.shape() {
        return invalid(format!(
            "{}: upstream {:?} does not match output {:?}",
            op.name(),
            upstream.shape(),
            output.shape()
        ));
    }
    let x = inputs[0];
    let g = upstream;
    Ok(match op {
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.map(|v| -v)],
        Op::Mul => vec![g.zip_map(inputs[1], |u, b| u * b)?, g.zip_map(x, |u, a| u * a)?],
        Op::Scale(c) => {
            let c: T = sc(*c);
            vec![g.map(|v| v * c)]
        }
        Op::AddScalar(_) => vec![g.clone()],
        Op::Sigmoid => vec![g.zip_map(output, |u, y| u * y * (T::one() - y))?],
        Op::Tanh => vec![g.zip_map(output, |u, y| u * (T::one() - y * y))?],
        Op::LeakyRelu(s) => {
            let s: T = sc(*s);
            vec![g.zip_map(x, |u, v| if v > T::zero() { u } else { u * s })?]
        }
        Op::Exp => vec![g.zip_map(output, |u, y| u * y)?],
        Op::Mean => {
            let v = g.item() / n_of(x);
            vec![Tensor::full(x.shape(), v)?]
        }
        Op::Sum => vec![Tensor::full(x.shape(), g.item())?],
        Op::L1 => {
            let scale = g.item() / n_of(x);
            let ga = x.zip_map(inputs[1], |a, b| {
                let d = a - b;
                if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                }
            })?;
            let gb = ga.map(|v| -v);
            vec![ga, gb]
        }
        Op::Reshape(_) => vec![g.reshape(x.shape())?],
        Op::Concat => {
            let inner = x.len() / x.shape()[0];
            let mut at = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for t in inputs {
                let n = t.shape()[0] * inner;
                out.push(Tensor::new(t.shape(), g.data()[at..at + n].to_vec())?);
                at += n;
            }
            out
        }
        Op::Slice { start, .. } => {
            let inner = x.len() / x.shape()[0];
            let mut gx = x.zeros_like();
            gx.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
            vec![gx]
        }
        Op::Transpose => vec![transpose(g)?],
        Op::SelectRow(r) => {
            let c = x.shape()[1];
            let mut gx = x.zeros_like();
            gx.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
            vec![gx]
        }
        Op::AddRowBcast => {
            let c = x.shape()[1];
            let mut gr = vec![T::zero(); c];
            for chunk in g.data().chunks_exact(c) {
                for (a, &v) in gr.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            vec![g.clone(), Tensor::new(inputs[1].shape(), gr)?]
        }
        Op::MulChannelBcast => {
            let (mask, t) = (x, inputs[1]);
            let inner = bcast_check(mask, t)?;
            let mut gm = vec![T::zero(); inner];
            let mut gt = g.clone();
            for (gc, tc) in gt.data_mut().chunks_exact_mut(inner).zip(t.data().chunks_exact(inner)) {
                for i in 0..inner {
                    gm[i] += gc[i] * tc[i];
                    gc[i] *= mask.data()[i];
                }
            }
            vec![Tensor::new(mask.shape(), gm)?, gt]
        }
        Op::MatMul => {
            let b = inputs[1];
            let (m, k) = matrix(x, "matmul")?;
            let n = b.shape()[1];
            let mut ga = vec![T::zero(); m * k];
            kernels::gemm::matmul_bt_acc(g.data(), b.data(), &mut ga, m, n, k);
            let mut gb = vec![T::zero(); k * n];
            kernels::gemm::matmul_at_acc(x.data(), g.data(), &mut gb, m, k, n);
            vec![Tensor::new(x.shape(), ga)?, Tensor::new(b.shape(), gb)?]
        }
        Op::Attention { scale } => {
            let (gq, gk, gv) = kernels::attention_backward(x, inputs[1], inputs[2], sc(*scale), g)?;
            vec![gq, gk, gv]
        }
        Op::Conv { stride, pad } => {
            let (gx, gk, gb) = kernels::conv_backward(x, inputs[1], g, *stride, *pad)?;
            vec![gx, gk, gb.into_shape(inputs[2].shape())?]
        }
        Op::UpsampleNearest(f) => vec![kernels::upsample_nearest_backward(x, *f, g)?],
        Op::BlurDown => vec![kernels::blur_down_backward(x, g)?],
        Op::SpatialMean => vec![kernels::spatial_mean_backward(x, g)?],
        Op::TrilinearSample => {
            let (gf, gc) = kernels::trilinear_sample_backward(x, inputs[1], g)?;
            vec![gf, gc]
        }
        Op::Softmax(axis) => vec![kernels::softmax_backward(output, g, *axis)?],
        Op::CandidateFlows(_) => {
            let (gs, gd) = kernels::candidate_flows_backward(x, inputs[1], g)?;
            vec![gs, gd]
        }
        Op::BlendFlows => {
            let (gm, gc) = kernels::blend_flows_backward(x, inputs[1], g)?;
            vec![gm, gc]
        }
        Op::GaussianHeatmap { dims, variance } => {
            vec![kernels::gaussian_heatmap_backward(x, *dims, *variance, g)?]
        }
    })
}

/// Operation registered under `name`, with the default parameters used by
/// the gradient checker. Unknown names yield an unsupported-operation error.
pub fn op_by_name(name: &str) -> Result<Op> {
    Ok(match name {
        "add" => Op::Add,
        "sub" => Op::Sub,
        "mul" => Op::Mul,
        "scale" => Op::Scale(-1.7),
        "add_scalar" => Op::AddScalar(0.6),
        "sigmoid" => Op::Sigmoid,
        "tanh" => Op::Tanh,
        "leaky_relu" => Op::LeakyRelu(LEAKY_SLOPE),
        "relu" => Op::LeakyRelu(0.0),
        "exp" => Op::Exp,
        "mean" => Op::Mean,
        "sum" => Op::Sum,
        "l1" => Op::L1,
        "reshape" => Op::Reshape(vec![]),
        "concat" => Op::Concat,
        "slice" => Op::Slice { start: 1, len: 2 },
        "transpose" => Op::Transpose,
        "select_row" => Op::SelectRow(1),
        "add_row_bcast" => Op::AddRowBcast,
        "mul_channel_bcast" => Op::MulChannelBcast,
        "matmul" => Op::MatMul,
        "attention" => Op::Attention { scale: 0.5 },
        "conv2d" | "conv3d" | "conv" => Op::Conv { stride: 2, pad: 1 },
        "upsample_nearest" => Op::UpsampleNearest(2),
        "blur_down" => Op::BlurDown,
        "spatial_mean" => Op::SpatialMean,
        "trilinear_sample" => Op::TrilinearSample,
        "softmax" => Op::Softmax(1),
        "candidate_flows" => Op::CandidateFlows([2, 3, 3]),
        "blend_flows" => Op::BlendFlows,
        "gaussian_heatmap" => Op::GaussianHeatmap { dims: [3, 4, 4], variance: 0.1 },
        other => return Err(Error::UnsupportedOperation(format!("no kernel registered as `{other}`"))),
    })
}

/// Dispatches a VJP by registered name.
pub fn backward_by_name<T: Scalar>(
    name: &str,
    inputs: &[&Tensor<T>],
    upstream: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let op = op_by_name(name)?;
    let out = forward(&op, inputs)?;
    backward(&op, inputs, &out, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let y = Tensor::<f64>::from_f64(&[3], &[4.0, 5.0, 6.0]).unwrap();
        let u = Tensor::<f64>::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let g = backward_by_name("mul", &[&x, &y], &u).unwrap();
        assert_eq!(g[0].data(), &[2.0, -5.0, 12.0]);
        assert_eq!(g[1].data(), &[0.5, -2.0, 6.0]);
    }

    #[test]
    fn unknown_op_is_unsupported() {
        let x = Tensor::<f32>::zeros(&[1]).unwrap();
        let err = backward_by_name("fft", &[&x], &x).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOperation(_)));
    }

    #[test]
    fn upstream_shape_checked() {
        let x = Tensor::<f32>::zeros(&[2]).unwrap();
        let bad = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(backward(&Op::Sigmoid, &[&x], &x, &bad).is_err());
    }

    #[test]
    fn arity_checked() {
        let x = Tensor::<f32>::zeros(&[2]).unwrap();
        assert!(forward(&Op::Add, &[&x]).is_err());
    }
}
