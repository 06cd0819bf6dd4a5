//! Small layer helpers shared by the sub-networks.

use crate::error::Result;
use crate::ops::{Op, LEAKY_SLOPE};
use crate::params::{ParamStore, ParamVars};
use crate::rng::{init_params, Rng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial rank of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    Two,
    Three,
}

/// Registers `{name}.weight` and a zero `{name}.bias`.
pub fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rank: Rank,
) -> Result<()> {
    let shape = match rank {
        Rank::Two => vec![cout, cin, k, k],
        Rank::Three => vec![cout, cin, k, k, k],
    };
    let fan_in = cin * shape[2..].iter().product::<usize>();
    store.insert(format!("{name}.weight"), init_params(rng, &shape, fan_in)?)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout])?)?;
    Ok(())
}

/// Registers a convolution whose weight is scaled by `gain` after init.
pub fn init_conv_scaled<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    shape: (usize, usize, usize),
    rank: Rank,
    gain: f64,
) -> Result<()> {
    init_conv(store, rng, name, shape.0, shape.1, shape.2, rank)?;
    let w = store.get_mut(&format!("{name}.weight"))?;
    w.scale_in_place(crate::scalar::sc(gain));
    Ok(())
}

pub fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = pv.get(&format!("{name}.weight"))?;
    let b = pv.get(&format!("{name}.bias"))?;
    tape.apply(Op::Conv { stride, pad }, &[x, w, b])
}

pub fn leaky<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.apply1(Op::LeakyRelu(LEAKY_SLOPE), x)
}

pub fn reshape<T: Scalar>(tape: &mut Tape<T>, x: Var, shape: &[usize]) -> Result<Var> {
    tape.apply1(Op::Reshape(shape.to_vec()), x)
}

/// Layer description for [`init_stack`] / [`stack`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Registers a conv stack `{prefix}.l{i}` with the given input channels.
pub fn init_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    cin: usize,
    layers: &[LayerSpec],
    rank: Rank,
) -> Result<()> {
    let mut c = cin;
    for (i, l) in layers.iter().enumerate() {
        init_conv(store, rng, &format!("{prefix}.l{i}"), l.cout, c, l.kernel, rank)?;
        c = l.cout;
    }
    Ok(())
}

/// Conv stack with leaky activations between layers and a linear last layer.
pub fn stack<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    prefix: &str,
    mut x: Var,
    layers: &[LayerSpec],
) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        x = conv(tape, pv, &format!("{prefix}.l{i}"), x, l.stride, l.kernel / 2)?;
        if i + 1 < layers.len() {
            x = leaky(tape, x)?;
        }
    }
    Ok(x)
}

/// `n` stride-2 3×3 layers of width `hidden`, then a stride-1 3×3 projection to `cout`.
pub fn strided_encoder(n: usize, hidden: usize, cout: usize) -> Vec<LayerSpec> {
    let mut layers: Vec<LayerSpec> = (0..n).map(|_| LayerSpec { cout: hidden, kernel: 3, stride: 2 }).collect();
    layers.push(LayerSpec { cout, kernel: 3, stride: 1 });
    layers
}
