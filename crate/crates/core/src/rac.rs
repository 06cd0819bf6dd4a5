//! Reference-augmented correction: keypoint and texture encoders feeding a
//! single cross-attention that samples reference texture for the driving pose.

use crate::encoding::{bind_frozen, HeatmapVolume};
use crate::error::{invalid, Result};
use crate::model::ModelConfig;
use crate::nn::{self, Rank};
use crate::ops::Op;
use crate::params::{ParamStore, ParamVars};
use crate::rng::{init_params, Rng};
use crate::scalar::{sc, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c×h×w` latent map (keypoint latent or texture latent).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap<T>(pub Tensor<T>);

const EMBED_GAIN: f64 = 0.02;

pub fn init_rac<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) -> Result<()> {
    let kp = nn::strided_encoder(cfg.kp_down_layers(), cfg.kp_hidden, cfg.key_channels);
    nn::init_stack(store, rng, "rac.kp", cfg.keypoints * cfg.heatmap_depth, &kp, Rank::Two)?;
    let tex = nn::strided_encoder(cfg.tex_down_layers(), cfg.tex_hidden, cfg.value_channels);
    nn::init_stack(store, rng, "rac.tex", 3, &tex, Rank::Two)?;
    let tokens = cfg.attention_size() * cfg.attention_size();
    for (name, rows, cols) in [
        ("rac.pos_q", tokens, cfg.key_channels),
        ("rac.pos_v", tokens, cfg.value_channels),
        ("rac.pos_ref", cfg.max_refs, cfg.value_channels),
    ] {
        let mut t: Tensor<T> = init_params(rng, &[rows, cols], 6)?;
        t.scale_in_place(sc(EMBED_GAIN));
        store.insert(name, t)?;
    }
    nn::init_conv(store, rng, "rac.out", cfg.fused_channels, cfg.value_channels, 3, Rank::Two)
}

pub fn encode_keypoint_heatmap_on<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    heat: Var,
) -> Result<Var> {
    let s = tape.value(heat).shape().to_vec();
    let want = [cfg.keypoints, cfg.heatmap_depth, cfg.heatmap_size, cfg.heatmap_size];
    if s != want {
        return invalid(format!("keypoint heatmap must be {want:?}, got {s:?}"));
    }
    let flat = nn::reshape(tape, heat, &[s[0] * s[1], s[2], s[3]])?;
    let layers = nn::strided_encoder(cfg.kp_down_layers(), cfg.kp_hidden, cfg.key_channels);
    nn::stack(tape, pv, "rac.kp", flat, &layers)
}

pub fn encode_texture_on<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, image: Var) -> Result<Var> {
    crate::encoding::check_image(tape.value(image), cfg.image_size)?;
    let layers = nn::strided_encoder(cfg.tex_down_layers(), cfg.tex_hidden, cfg.value_channels);
    nn::stack(tape, pv, "rac.tex", image, &layers)
}

/// `c×h×w` → `(h·w)×c` tokens in row-major spatial order.
fn tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let flat = nn::reshape(tape, x, &[s[0], s[1] * s[2]])?;
    tape.apply1(Op::Transpose, flat)
}

/// Attention output before and after the final convolution.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub attended: Var,
    pub warped: Var,
}

/// Driving keypoint latent as query, reference keypoint latents as keys and
/// reference texture latents as values.
pub fn cross_attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    driving: Var,
    refs: &[(Var, Var)],
) -> Result<AttentionVars> {
    if refs.is_empty() {
        return invalid("at least one reference is required");
    }
    if refs.len() > cfg.max_refs {
        return invalid(format!("{} references exceed the maximum of {}", refs.len(), cfg.max_refs));
    }
    let dshape = tape.value(driving).shape().to_vec();
    for &(kr, vr) in refs {
        let (ks, vs) = (tape.value(kr).shape(), tape.value(vr).shape());
        if ks != dshape.as_slice() || vs[1..] != dshape[1..] {
            return invalid("reference latents must share the driving latent's spatial size");
        }
    }
    let (ck, h, w) = (dshape[0], dshape[1], dshape[2]);
    let cv = tape.value(refs[0].1).shape()[0];

    let q = tokens(tape, driving)?;
    let q = tape.apply(Op::Add, &[q, pv.get("rac.pos_q")?])?;
    let pos_v = pv.get("rac.pos_v")?;
    let pos_ref = pv.get("rac.pos_ref")?;
    let mut keys = Vec::with_capacity(refs.len());
    let mut values = Vec::with_capacity(refs.len());
    for (i, &(kr, vr)) in refs.iter().enumerate() {
        keys.push(tokens(tape, kr)?);
        let v = tokens(tape, vr)?;
        let v = tape.apply(Op::Add, &[v, pos_v])?;
        let row = tape.apply1(Op::SelectRow(i), pos_ref)?;
        values.push(tape.apply(Op::AddRowBcast, &[v, row])?);
    }
    let k = tape.apply(Op::Concat, &keys)?;
    let v = tape.apply(Op::Concat, &values)?;
    let scale = 1.0 / (ck as f64).sqrt();
    let att = tape.apply(Op::Attention { scale }, &[q, k, v])?;
    let att = tape.apply1(Op::Transpose, att)?;
    let attended = nn::reshape(tape, att, &[cv, h, w])?;
    let warped = nn::conv(tape, pv, "rac.out", attended, cfg.rac_out_stride, 1)?;
    Ok(AttentionVars { attended, warped })
}

pub fn encode_keypoint_heatmap<T: Scalar>(params: &ParamStore<T>, cfg: &ModelConfig, heat: &HeatmapVolume<T>) -> Result<LatentMap<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let h = tape.constant(heat.values.clone());
    let out = encode_keypoint_heatmap_on(&mut tape, &pv, cfg, h)?;
    Ok(LatentMap(tape.value(out).clone()))
}

pub fn encode_texture<T: Scalar>(params: &ParamStore<T>, cfg: &ModelConfig, image: &Tensor<T>) -> Result<LatentMap<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let img = tape.constant(image.clone());
    let out = encode_texture_on(&mut tape, &pv, cfg, img)?;
    Ok(LatentMap(tape.value(out).clone()))
}

/// Implicitly warped texture `I_w` for a driving latent and `(key, value)` reference latents.
pub fn cross_attention_sample<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    driving: &LatentMap<T>,
    refs: &[(LatentMap<T>, LatentMap<T>)],
) -> Result<LatentMap<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let d = tape.constant(driving.0.clone());
    let r: Vec<(Var, Var)> =
        refs.iter().map(|(k, v)| (tape.constant(k.0.clone()), tape.constant(v.0.clone()))).collect();
    let out = cross_attention_on(&mut tape, &pv, cfg, d, &r)?;
    Ok(LatentMap(tape.value(out.warped).clone()))
}
