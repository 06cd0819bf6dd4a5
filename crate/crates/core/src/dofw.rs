//! Dense optical flow warping.
//!
//! Sparse keypoint pairs give K translation flows plus the identity flow; a
//! small 3D conv network predicts per-voxel softmax weights that blend them
//! into one dense flow, which then resamples the appearance volume.

use crate::encoding::{bind_frozen, AppearanceFeature, KeypointSet};
use crate::error::{invalid, Result};
use crate::kernels;
use crate::model::ModelConfig;
use crate::nn::{self, LayerSpec, Rank};
use crate::ops::Op;
use crate::params::{ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Absolute sampling coordinates `D×H×W×3` in source normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField3D<T>(pub Tensor<T>);

fn dense_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    vec![
        LayerSpec { cout: cfg.dense_hidden, kernel: 3, stride: 1 },
        LayerSpec { cout: cfg.dense_hidden, kernel: 3, stride: 1 },
        LayerSpec { cout: cfg.keypoints + 1, kernel: 3, stride: 1 },
    ]
}

/// Channels of the stacked flow evidence: K+1 warped volumes plus K heatmap differences.
pub fn evidence_channels(cfg: &ModelConfig) -> usize {
    (cfg.keypoints + 1) * cfg.feat_channels + cfg.keypoints
}

pub fn init_dense_motion<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) -> Result<()> {
    let layers = dense_layers(cfg);
    nn::init_stack(store, rng, "dofw", evidence_channels(cfg), &layers, Rank::Three)?;
    // Start from nearly uniform masks.
    store.get_mut("dofw.l2.weight")?.scale_in_place(crate::scalar::sc(0.1));
    Ok(())
}

/// `(K+1)×D×H×W×3` candidate flows for a keypoint pair.
pub fn candidate_flows<T: Scalar>(xs: &KeypointSet<T>, xd: &KeypointSet<T>, dims: [usize; 3]) -> Result<Tensor<T>> {
    kernels::candidate_flows(xs.tensor(), xd.tensor(), dims)
}

/// Tape handles produced by [`estimate_flow_on`].
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub flow: Var,
    pub masks: Var,
    pub candidates: Var,
}

pub fn estimate_flow_on<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    feature: Var,
    xs: Var,
    xd: Var,
) -> Result<FlowVars> {
    let fshape = tape.value(feature).shape().to_vec();
    if fshape.len() != 4 {
        return invalid(format!("appearance feature must be C×D×H×W, got {fshape:?}"));
    }
    let dims = [fshape[1], fshape[2], fshape[3]];
    let k = tape.value(xs).shape()[0];
    let candidates = tape.apply(Op::CandidateFlows(dims), &[xs, xd])?;

    let mut evidence = Vec::with_capacity(k + 2);
    for j in 0..=k {
        let cand = tape.apply1(Op::Slice { start: j, len: 1 }, candidates)?;
        let cand = nn::reshape(tape, cand, &[dims[0], dims[1], dims[2], 3])?;
        evidence.push(tape.apply(Op::TrilinearSample, &[feature, cand])?);
    }
    let heat = Op::GaussianHeatmap { dims, variance: cfg.sigma2 };
    let hd = tape.apply1(heat.clone(), xd)?;
    let hs = tape.apply1(heat, xs)?;
    evidence.push(tape.apply(Op::Sub, &[hd, hs])?);
    let stacked = tape.apply(Op::Concat, &evidence)?;

    let logits = nn::stack(tape, pv, "dofw", stacked, &dense_layers(cfg))?;
    let masks = tape.apply1(Op::Softmax(0), logits)?;
    let flow = tape.apply(Op::BlendFlows, &[masks, candidates])?;
    Ok(FlowVars { flow, masks, candidates })
}

/// Flow field and `(K+1)×D×H×W` masks for one keypoint pair.
pub fn estimate_flow<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    feature: &AppearanceFeature<T>,
    xs: &KeypointSet<T>,
    xd: &KeypointSet<T>,
) -> Result<(FlowField3D<T>, Tensor<T>)> {
    if xs.count() != xd.count() {
        return invalid("source and driving keypoint counts differ");
    }
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let f = tape.constant(feature.0.clone());
    let a = tape.constant(xs.tensor().clone());
    let b = tape.constant(xd.tensor().clone());
    let out = estimate_flow_on(&mut tape, &pv, cfg, f, a, b)?;
    Ok((FlowField3D(tape.value(out.flow).clone()), tape.value(out.masks).clone()))
}

/// Resamples the appearance volume along `flow`.
pub fn apply_warp<T: Scalar>(flow: &FlowField3D<T>, feature: &AppearanceFeature<T>) -> Result<AppearanceFeature<T>> {
    let fs = feature.0.shape();
    let ws = flow.0.shape();
    if fs.len() != 4 || ws.len() != 4 || ws[..3] != fs[1..] || ws[3] != 3 {
        return invalid(format!("flow {ws:?} does not match feature {fs:?}"));
    }
    Ok(AppearanceFeature(kernels::trilinear_sample(&feature.0, &flow.0)?))
}
