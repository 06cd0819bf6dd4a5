//! Confidence-guided fusion of the explicit and attention streams, and the
//! upsampling decoder that turns the fused feature into an image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoding::bind_frozen;
use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;
use crate::nn::{self, LayerSpec, Rank};
use crate::ops::Op;
use crate::params::{ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the two warped streams are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum FusionVariant {
    /// `M ⊗ E + (1 − M) ⊗ I_w`
    #[default]
    #[serde(rename = "cgf")]
    Cgf,
    /// 1×1 conv over `[E; I_w]`
    #[serde(rename = "concat")]
    Concat,
    /// `E + I_w`
    #[serde(rename = "sum")]
    Sum,
    /// `M ⊗ E + I_w`
    #[serde(rename = "sum-mask")]
    SumMask,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [Self::Cgf, Self::Concat, Self::Sum, Self::SumMask];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cgf => "cgf",
            Self::Concat => "concat",
            Self::Sum => "sum",
            Self::SumMask => "sum-mask",
        }
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, Self::Cgf | Self::SumMask)
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion variant `{s}`")))
    }
}

fn mask_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    vec![
        LayerSpec { cout: cfg.mask_hidden, kernel: 3, stride: 1 },
        LayerSpec { cout: 1, kernel: 3, stride: 1 },
    ]
}

pub fn init_cgf<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) -> Result<()> {
    let explicit = cfg.feat_channels * cfg.feat_depth;
    nn::init_conv(store, rng, "cgf.align", cfg.fused_channels, explicit, 1, Rank::Two)?;
    nn::init_stack(store, rng, "cgf.mask", 2 * cfg.fused_channels, &mask_layers(cfg), Rank::Two)?;
    store.get_mut("cgf.mask.l1.weight")?.scale_in_place(crate::scalar::sc(0.1));
    nn::init_conv(store, rng, "cgf.concat", cfg.fused_channels, 2 * cfg.fused_channels, 1, Rank::Two)
}

/// `C×D×H×W` → `(C·D)×H×W` → 1×1 conv to `c_f` channels.
pub fn align_explicit_on<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, explicit: Var) -> Result<Var> {
    let s = tape.value(explicit).shape().to_vec();
    if s.len() != 4 {
        return invalid(format!("explicit stream must be C×D×H×W, got {s:?}"));
    }
    let expected = tape.value(pv.get("cgf.align.weight")?).shape()[1];
    if s[0] * s[1] != expected {
        return invalid(format!("explicit stream has {} channels after flattening, expected {expected}", s[0] * s[1]));
    }
    let flat = nn::reshape(tape, explicit, &[s[0] * s[1], s[2], s[3]])?;
    nn::conv(tape, pv, "cgf.align", flat, 1, 0)
}

pub fn predict_mask_on<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    explicit: Var,
    implicit: Var,
) -> Result<Var> {
    tape.value(explicit).expect_same_shape(tape.value(implicit))?;
    let both = tape.apply(Op::Concat, &[explicit, implicit])?;
    let logits = nn::stack(tape, pv, "cgf.mask", both, &mask_layers(cfg))?;
    tape.apply1(Op::Sigmoid, logits)
}

/// Fuses the aligned explicit stream `E` with `I_w`; `mask` is required by
/// the masked variants and ignored otherwise.
pub fn fuse_on<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    explicit: Var,
    implicit: Var,
    mask: Option<Var>,
    variant: FusionVariant,
) -> Result<Var> {
    tape.value(explicit).expect_same_shape(tape.value(implicit))?;
    let need_mask = || mask.ok_or_else(|| Error::InvalidArgument(format!("fusion `{variant}` needs a mask")));
    match variant {
        FusionVariant::Cgf => {
            let m = need_mask()?;
            let kept = tape.apply(Op::MulChannelBcast, &[m, explicit])?;
            let neg = tape.apply1(Op::Scale(-1.0), m)?;
            let inv = tape.apply1(Op::AddScalar(1.0), neg)?;
            let other = tape.apply(Op::MulChannelBcast, &[inv, implicit])?;
            tape.apply(Op::Add, &[kept, other])
        }
        FusionVariant::SumMask => {
            let m = need_mask()?;
            let kept = tape.apply(Op::MulChannelBcast, &[m, explicit])?;
            tape.apply(Op::Add, &[kept, implicit])
        }
        FusionVariant::Sum => tape.apply(Op::Add, &[explicit, implicit]),
        FusionVariant::Concat => {
            let both = tape.apply(Op::Concat, &[explicit, implicit])?;
            nn::conv(tape, pv, "cgf.concat", both, 1, 0)
        }
    }
}

fn decoder_stages(cfg: &ModelConfig) -> usize {
    cfg.down_layers
}

pub fn init_decoder<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) -> Result<()> {
    let mut c = cfg.fused_channels;
    for i in 0..decoder_stages(cfg) {
        nn::init_conv(store, rng, &format!("dec.l{i}"), cfg.dec_hidden, c, 3, Rank::Two)?;
        c = cfg.dec_hidden;
    }
    nn::init_conv(store, rng, "dec.out", 3, c, 3, Rank::Two)
}

/// Nearest ×2 upsample, 3×3 conv and leaky activation per stage; a final
/// 3×3 conv and sigmoid produce an image in `[0, 1]`.
pub fn decode_on<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, fused: Var) -> Result<Var> {
    let s = tape.value(fused).shape();
    let f = cfg.feat_size();
    if s != [cfg.fused_channels, f, f] {
        return invalid(format!("decoder expects {}×{f}×{f}, got {s:?}", cfg.fused_channels));
    }
    let mut x = fused;
    for i in 0..decoder_stages(cfg) {
        x = tape.apply1(Op::UpsampleNearest(2), x)?;
        x = nn::conv(tape, pv, &format!("dec.l{i}"), x, 1, 1)?;
        x = nn::leaky(tape, x)?;
    }
    let x = nn::conv(tape, pv, "dec.out", x, 1, 1)?;
    tape.apply1(Op::Sigmoid, x)
}

/// Inference helpers over plain tensors.
pub fn align_explicit<T: Scalar>(params: &ParamStore<T>, explicit: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let e = tape.constant(explicit.clone());
    let out = align_explicit_on(&mut tape, &pv, e)?;
    Ok(tape.value(out).clone())
}

pub fn predict_mask<T: Scalar>(params: &ParamStore<T>, cfg: &ModelConfig, explicit: &Tensor<T>, implicit: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let e = tape.constant(explicit.clone());
    let i = tape.constant(implicit.clone());
    let out = predict_mask_on(&mut tape, &pv, cfg, e, i)?;
    Ok(tape.value(out).clone())
}

pub fn fuse<T: Scalar>(
    params: &ParamStore<T>,
    explicit: &Tensor<T>,
    implicit: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    variant: FusionVariant,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let e = tape.constant(explicit.clone());
    let i = tape.constant(implicit.clone());
    let m = mask.map(|m| tape.constant(m.clone()));
    let out = fuse_on(&mut tape, &pv, e, i, m, variant)?;
    Ok(tape.value(out).clone())
}

pub fn decode<T: Scalar>(params: &ParamStore<T>, cfg: &ModelConfig, fused: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let f = tape.constant(fused.clone());
    let out = decode_on(&mut tape, &pv, cfg, f)?;
    Ok(tape.value(out).clone())
}
