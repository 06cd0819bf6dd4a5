//! Finite-difference verification of every registered VJP and of the whole
//! pipeline on a micro configuration.

use serde::Serialize;
use synwarp_core::data::{frame_inputs, MotionMode, SequenceRecord};
use synwarp_core::error::{Error, Result};
use synwarp_core::loss::{total_loss_on, LossWeights};
use synwarp_core::model::{ForwardOptions, Model, ModelConfig};
use synwarp_core::ops::{self, op_by_name, Op};
use synwarp_core::rng::Rng;
use synwarp_core::tape::Tape;
use synwarp_core::{Scalar, Tensor};

use crate::scene::{gen_sequence, SyntheticSceneSpec};

/// Every kernel name exercised by the suite.
pub const KERNELS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "relu",
    "exp",
    "mean",
    "sum",
    "l1",
    "reshape",
    "concat",
    "slice",
    "transpose",
    "select_row",
    "add_row_bcast",
    "mul_channel_bcast",
    "matmul",
    "attention",
    "conv2d",
    "conv3d",
    "upsample_nearest",
    "blur_down",
    "spatial_mean",
    "trilinear_sample",
    "softmax",
    "candidate_flows",
    "blend_flows",
    "gaussian_heatmap",
];

pub const PIPELINE: &str = "pipeline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn step(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::InvalidArgument(format!("unknown precision `{s}`"))),
        }
    }
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Values in `±[lo, hi]` with random sign, keeping clear of kinks at zero.
fn signed_away<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.uniform(lo, hi);
            if rng.uniform(0.0, 1.0) < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_f64(shape, &v).expect("shape")
}

/// Normalized coordinates whose cell index `(c + 1)(n − 1) / 2` keeps a
/// fractional part in `[0.15, 0.85]`, so no tap crosses a cell boundary
/// under the finite-difference step.
fn off_grid_coords<T: Scalar>(rng: &mut Rng, out: [usize; 3], dims: [usize; 3]) -> Tensor<T> {
    let count = out.iter().product::<usize>();
    let mut v = Vec::with_capacity(count * 3);
    for _ in 0..count {
        // Coordinate order is (x ← w, y ← h, z ← d).
        for &n in [dims[2], dims[1], dims[0]].iter() {
            let cell = rng.below(n + 1) as f64 - 1.0;
            let u = cell + rng.uniform(0.15, 0.85);
            v.push(2.0 * u / (n - 1) as f64 - 1.0);
        }
    }
    Tensor::from_f64(&[out[0], out[1], out[2], 3], &v).expect("shape")
}

/// Operation and random inputs for one kernel case.
pub fn kernel_case<T: Scalar>(name: &str, rng: &mut Rng) -> Result<(Op, Vec<Tensor<T>>)> {
    let u = |rng: &mut Rng, s: &[usize]| rng.uniform_tensor::<T>(s, -1.0, 1.0);
    let op = op_by_name(name)?;
    let inputs = match name {
        "add" | "sub" | "mul" => vec![u(rng, &[2, 3, 4]), u(rng, &[2, 3, 4])],
        "scale" | "add_scalar" | "sigmoid" | "tanh" | "exp" | "mean" | "sum" => vec![u(rng, &[3, 4])],
        "leaky_relu" | "relu" => vec![signed_away(rng, &[3, 5], 0.05, 1.0)],
        "l1" => {
            let a = u(rng, &[2, 3, 3]);
            let d = signed_away::<T>(rng, &[2, 3, 3], 0.05, 0.5);
            let b = a.zip_map(&d, |x, y| x + y)?;
            vec![a, b]
        }
        "reshape" => return Ok((Op::Reshape(vec![3, 4]), vec![u(rng, &[2, 6])])),
        "concat" => vec![u(rng, &[2, 3]), u(rng, &[1, 3]), u(rng, &[3, 3])],
        "slice" => vec![u(rng, &[4, 3])],
        "transpose" => vec![u(rng, &[3, 5])],
        "select_row" => vec![u(rng, &[3, 4])],
        "add_row_bcast" => vec![u(rng, &[4, 3]), u(rng, &[1, 3])],
        "mul_channel_bcast" => vec![u(rng, &[1, 3, 3]), u(rng, &[2, 3, 3])],
        "matmul" => vec![u(rng, &[3, 4]), u(rng, &[4, 2])],
        "attention" => vec![u(rng, &[4, 3]), u(rng, &[5, 3]), u(rng, &[5, 2])],
        "conv2d" => vec![u(rng, &[2, 5, 5]), u(rng, &[3, 2, 3, 3]), u(rng, &[3])],
        "conv3d" => {
            return Ok((
                Op::Conv { stride: 1, pad: 1 },
                vec![u(rng, &[2, 3, 4, 4]), u(rng, &[2, 2, 3, 3, 3]), u(rng, &[2])],
            ))
        }
        "upsample_nearest" => vec![u(rng, &[2, 3, 3])],
        "blur_down" => vec![u(rng, &[2, 6, 6])],
        "spatial_mean" => vec![u(rng, &[3, 4, 4])],
        "trilinear_sample" => vec![u(rng, &[2, 3, 4, 4]), off_grid_coords(rng, [2, 3, 3], [3, 4, 4])],
        "softmax" => vec![u(rng, &[3, 4, 2])],
        "candidate_flows" => vec![u(rng, &[3, 3]), u(rng, &[3, 3])],
        "blend_flows" => {
            let logits = u(rng, &[4, 2, 3, 3]);
            vec![synwarp_core::kernels::softmax(&logits, 0)?, u(rng, &[4, 2, 3, 3, 3])]
        }
        "gaussian_heatmap" => vec![rng.uniform_tensor(&[3, 3], -0.8, 0.8)],
        other => return Err(Error::UnsupportedOperation(format!("no gradient case for `{other}`"))),
    };
    Ok((op, inputs))
}

fn weighted_sum(op: &Op, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = ops::forward(op, &refs)?;
    Ok(out.data().iter().zip(weights.data()).map(|(&o, &w)| o * w).sum())
}

/// Worst relative error over the inputs of one random case. The analytic VJP
/// runs at `T`; the central difference runs the same kernel in double
/// precision on the identical input values, so single-precision output
/// rounding does not swamp the reference.
pub fn check_kernel<T: Scalar>(name: &str, seed: u64, precision: Precision) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(name.bytes().map(u64::from).sum());
    let (op, inputs) = kernel_case::<T>(name, &mut rng)?;
    let refs: Vec<&Tensor<T>> = inputs.iter().collect();
    let out = ops::forward(&op, &refs)?;
    let weights: Tensor<f64> = rng.uniform_tensor(out.shape(), -1.0, 1.0);
    let analytic = ops::backward(&op, &refs, &out, &weights.cast())?;
    let exact: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let h = precision.step();
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(exact[i].len());
        for j in 0..exact[i].len() {
            let mut plus = exact.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = exact.clone();
            minus[i].data_mut()[j] -= h;
            numeric.push((weighted_sum(&op, &plus, &weights)? - weighted_sum(&op, &minus, &weights)?) / (2.0 * h));
        }
        let a: Vec<f64> = g.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        worst = worst.max(relative_error(&a, &numeric));
    }
    Ok(worst)
}

/// Tiny dataset sequence for the pipeline check.
fn micro_sequence(cfg: &ModelConfig, seed: u64) -> Result<SequenceRecord<f64>> {
    let mut rng = Rng::new(seed).fork(7);
    let mut spec = SyntheticSceneSpec::sample(&mut rng.fork(1), cfg.keypoints, cfg.image_size);
    spec.blob_radius = 0.25;
    gen_sequence(&mut rng, 3, &spec, 0)
}

/// Gradient of the total loss for 10 random scalar parameters of the micro
/// model. Analytic gradients run at `T`; the finite-difference reference is
/// evaluated in double precision.
pub fn check_pipeline<T: Scalar>(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::micro();
    let mut rng = Rng::new(seed);
    let model64: Model<f64> = Model::new(cfg.clone(), &mut rng.fork(1))?;
    let rec = micro_sequence(&cfg, seed)?;
    let weights = LossWeights::default();

    fn loss_and_grads<S: Scalar>(
        model: &Model<S>,
        rec: &SequenceRecord<S>,
        weights: &LossWeights,
    ) -> Result<(f64, synwarp_core::tape::Gradients<S>, synwarp_core::params::ParamVars)> {
        let inputs = frame_inputs(model, rec, 0, 1, 2, MotionMode::Oracle)?;
        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape);
        let out = model.forward_on(&mut tape, &pv, &inputs, ForwardOptions::default())?;
        let gt = tape.constant(rec.frames[1].clone());
        let l = total_loss_on(&mut tape, out.image, gt, weights, None)?;
        let v = tape.value(l.total).item().to_f64().unwrap_or(f64::NAN);
        Ok((v, tape.backward(l.total)?, pv))
    }

    let model_t: Model<T> = model64.cast();
    let rec_t = rec.cast::<T>();
    let (_, grads, pv) = loss_and_grads(&model_t, &rec_t, &weights)?;
    // Parameters that influence the image (the motion encoder does not in oracle mode).
    let names: Vec<String> = model64.params.names().filter(|n| !n.starts_with("enc.mot.") && !n.starts_with("cgf.concat")).map(String::from).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    // Small enough that the step rarely straddles an L1 or leaky-ReLU kink.
    let h = 1e-6;
    for _ in 0..10 {
        let name = &names[rng.below(names.len())];
        let idx = rng.below(model64.params.get(name)?.len());
        let g = grads.get_or_zeros(pv.get(name)?, model_t.params.get(name)?);
        analytic.push(g.data()[idx].to_f64().unwrap_or(f64::NAN));
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model64.clone();
            m.params.get_mut(name)?.data_mut()[idx] += delta;
            Ok(loss_and_grads(&m, &rec, &weights)?.0)
        };
        numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub precision: Precision,
    pub seeds: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs `name` (a kernel or [`PIPELINE`]) over `seeds` seeds.
pub fn run_check(name: &str, precision: Precision, seeds: usize, tol: Option<f64>) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let tolerance = tol.unwrap_or(if name == PIPELINE { 1e-2 } else { precision.tolerance() });
    for s in 0..seeds as u64 {
        let e = match (name, precision) {
            (PIPELINE, Precision::F32) => check_pipeline::<f32>(s)?,
            (PIPELINE, Precision::F64) => check_pipeline::<f64>(s)?,
            (_, Precision::F32) => check_kernel::<f32>(name, s, precision)?,
            (_, Precision::F64) => check_kernel::<f64>(name, s, precision)?,
        };
        // NaN counts as a failure.
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(CheckResult { name: name.to_string(), precision, seeds, worst, tolerance, passed: worst <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn every_registered_kernel_has_a_case() {
        let mut rng = Rng::new(0);
        for name in KERNELS {
            kernel_case::<f64>(name, &mut rng).unwrap();
        }
        assert!(kernel_case::<f64>("fft", &mut rng).is_err());
    }
}
