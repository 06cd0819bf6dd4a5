//! Model configuration and the full animation pipeline.

use serde::{Deserialize, Serialize};

use crate::cgf::{self, FusionVariant};
use crate::dofw;
use crate::encoding::{self, KeypointSet};
use crate::error::{invalid, Result};
use crate::ops::Op;
use crate::params::{ParamStore, ParamVars};
use crate::rac;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether keypoints carry depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum KeypointMode {
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
    /// Depth axes collapse to one slice and z coordinates are zeroed.
    #[serde(rename = "2d")]
    TwoD,
}

/// Geometry and widths of every sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub keypoints: usize,
    /// Appearance volume channels `C`.
    pub feat_channels: usize,
    /// Appearance volume depth `D`.
    pub feat_depth: usize,
    pub app_hidden: usize,
    /// Stride-2 layers between the image and the feature grid.
    pub down_layers: usize,
    pub dense_hidden: usize,
    pub heatmap_depth: usize,
    pub heatmap_size: usize,
    pub kp_hidden: usize,
    pub key_channels: usize,
    pub value_channels: usize,
    pub tex_hidden: usize,
    pub max_refs: usize,
    pub rac_out_stride: usize,
    pub fused_channels: usize,
    pub mask_hidden: usize,
    pub dec_hidden: usize,
    pub motion_hidden: usize,
    pub motion_layers: usize,
    pub sigma2: f64,
    pub fusion: FusionVariant,
    pub keypoint_mode: KeypointMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            keypoints: 21,
            feat_channels: 32,
            feat_depth: 16,
            app_hidden: 64,
            down_layers: 2,
            dense_hidden: 32,
            heatmap_depth: 16,
            heatmap_size: 64,
            kp_hidden: 64,
            key_channels: 64,
            value_channels: 64,
            tex_hidden: 64,
            max_refs: 4,
            rac_out_stride: 1,
            fused_channels: 64,
            mask_hidden: 32,
            dec_hidden: 64,
            motion_hidden: 32,
            motion_layers: 3,
            sigma2: 0.01,
            fusion: FusionVariant::Cgf,
            keypoint_mode: KeypointMode::ThreeD,
        }
    }
}

fn log2_exact(n: usize) -> Option<usize> {
    (n.is_power_of_two()).then(|| n.trailing_zeros() as usize)
}

impl ModelConfig {
    /// Compact geometry used by the smoke experiments: 64×64 images, K=21.
    pub fn smoke() -> Self {
        Self {
            feat_channels: 4,
            feat_depth: 4,
            app_hidden: 32,
            heatmap_depth: 4,
            heatmap_size: 32,
            kp_hidden: 32,
            key_channels: 32,
            value_channels: 32,
            tex_hidden: 32,
            fused_channels: 32,
            mask_hidden: 16,
            dec_hidden: 32,
            motion_hidden: 24,
            ..Self::default()
        }
    }

    /// Tiny geometry for whole-pipeline gradient checks: 16×16 images, K=3,
    /// C=2, D=2, 4×4 latent grids.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            keypoints: 3,
            feat_channels: 2,
            feat_depth: 2,
            app_hidden: 4,
            down_layers: 2,
            dense_hidden: 4,
            heatmap_depth: 2,
            heatmap_size: 8,
            kp_hidden: 4,
            key_channels: 4,
            value_channels: 4,
            tex_hidden: 4,
            max_refs: 2,
            rac_out_stride: 1,
            fused_channels: 4,
            mask_hidden: 4,
            dec_hidden: 4,
            motion_hidden: 4,
            motion_layers: 2,
            sigma2: 0.1,
            fusion: FusionVariant::Cgf,
            keypoint_mode: KeypointMode::ThreeD,
        }
    }

    /// Same geometry with planar keypoints (depth 1, z zeroed).
    pub fn planar(mut self) -> Self {
        self.keypoint_mode = KeypointMode::TwoD;
        self.feat_depth = 1;
        self.heatmap_depth = 1;
        self
    }

    /// Side of the appearance and fusion grid.
    pub fn feat_size(&self) -> usize {
        self.image_size >> self.down_layers
    }

    /// Side of the attention token grid.
    pub fn attention_size(&self) -> usize {
        self.feat_size() * self.rac_out_stride
    }

    pub fn tex_down_layers(&self) -> usize {
        self.down_layers - log2_exact(self.rac_out_stride).unwrap_or(0)
    }

    pub fn kp_down_layers(&self) -> usize {
        log2_exact(self.heatmap_size / self.attention_size()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("keypoints", self.keypoints),
            ("feat_channels", self.feat_channels),
            ("feat_depth", self.feat_depth),
            ("app_hidden", self.app_hidden),
            ("dense_hidden", self.dense_hidden),
            ("heatmap_depth", self.heatmap_depth),
            ("heatmap_size", self.heatmap_size),
            ("kp_hidden", self.kp_hidden),
            ("key_channels", self.key_channels),
            ("value_channels", self.value_channels),
            ("tex_hidden", self.tex_hidden),
            ("max_refs", self.max_refs),
            ("rac_out_stride", self.rac_out_stride),
            ("fused_channels", self.fused_channels),
            ("mask_hidden", self.mask_hidden),
            ("dec_hidden", self.dec_hidden),
            ("motion_hidden", self.motion_hidden),
            ("motion_layers", self.motion_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid(format!("model.{name} must be positive"));
            }
        }
        if self.image_size % (1 << self.down_layers) != 0 || self.feat_size() == 0 {
            return invalid("image_size must be divisible by 2^down_layers");
        }
        match log2_exact(self.rac_out_stride) {
            Some(s) if s <= self.down_layers => {}
            _ => return invalid("rac_out_stride must be a power of two no larger than 2^down_layers"),
        }
        let att = self.attention_size();
        if self.heatmap_size < att || self.heatmap_size % att != 0 || log2_exact(self.heatmap_size / att).is_none() {
            return invalid("heatmap_size must be the attention grid size times a power of two");
        }
        if self.image_size >> self.motion_layers == 0 {
            return invalid("too many motion encoder layers for the image size");
        }
        if !(self.sigma2 > 0.0) {
            return invalid("sigma2 must be positive");
        }
        if self.keypoint_mode == KeypointMode::TwoD && (self.feat_depth != 1 || self.heatmap_depth != 1) {
            return invalid("2d keypoint mode requires feat_depth = heatmap_depth = 1");
        }
        Ok(())
    }

    /// Keypoints as the model consumes them (z zeroed in planar mode).
    pub fn prepare_keypoints<T: Scalar>(&self, x: &KeypointSet<T>) -> KeypointSet<T> {
        match self.keypoint_mode {
            KeypointMode::ThreeD => x.clone(),
            KeypointMode::TwoD => x.flattened(),
        }
    }
}

/// Inputs for one animated frame.
#[derive(Debug, Clone)]
pub struct FrameInputs<T> {
    pub source: Tensor<T>,
    pub x_s: KeypointSet<T>,
    pub x_d: KeypointSet<T>,
    /// Reference images with their keypoints.
    pub refs: Vec<(Tensor<T>, KeypointSet<T>)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Force `M ≡ 0` so the output depends on the attention stream only.
    pub force_mask_zero: bool,
}

/// Tape handles of the interesting intermediate values.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub image: Var,
    pub feature: Var,
    pub flow: Var,
    pub flow_masks: Var,
    pub explicit: Var,
    pub aligned: Var,
    pub implicit: Var,
    pub mask: Option<Var>,
    pub fused: Var,
}

/// Result of [`Model::animate`].
#[derive(Debug, Clone)]
pub struct Animation<T> {
    pub image: Tensor<T>,
    pub flow: Tensor<T>,
    pub flow_masks: Tensor<T>,
    pub mask: Option<Tensor<T>>,
}

/// Parameters of every sub-network together with the geometry they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        encoding::init_appearance_encoder(&mut params, &mut rng.fork(1), &config)?;
        encoding::init_motion_encoder(&mut params, &mut rng.fork(2), &config)?;
        dofw::init_dense_motion(&mut params, &mut rng.fork(3), &config)?;
        rac::init_rac(&mut params, &mut rng.fork(4), &config)?;
        cgf::init_cgf(&mut params, &mut rng.fork(5), &config)?;
        cgf::init_decoder(&mut params, &mut rng.fork(6), &config)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Records the whole pipeline on `tape` with parameters bound as `pv`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        inputs: &FrameInputs<T>,
        opts: ForwardOptions,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        if inputs.refs.is_empty() {
            return invalid("at least one reference is required");
        }
        let source = tape.constant(inputs.source.clone());
        let xs = tape.constant(cfg.prepare_keypoints(&inputs.x_s).into_tensor());
        let xd = tape.constant(cfg.prepare_keypoints(&inputs.x_d).into_tensor());

        // Explicit stream.
        let feature = encoding::encode_appearance_on(tape, pv, cfg, source)?;
        let flow = dofw::estimate_flow_on(tape, pv, cfg, feature, xs, xd)?;
        let explicit = tape.apply(Op::TrilinearSample, &[feature, flow.flow])?;
        let aligned = cgf::align_explicit_on(tape, pv, explicit)?;

        // Attention stream.
        let hdims = [cfg.heatmap_depth, cfg.heatmap_size, cfg.heatmap_size];
        let heat = Op::GaussianHeatmap { dims: hdims, variance: cfg.sigma2 };
        let hd = tape.apply1(heat.clone(), xd)?;
        let qd = rac::encode_keypoint_heatmap_on(tape, pv, cfg, hd)?;
        let mut refs = Vec::with_capacity(inputs.refs.len());
        for (img, kp) in &inputs.refs {
            let xr = tape.constant(cfg.prepare_keypoints(kp).into_tensor());
            let hr = tape.apply1(heat.clone(), xr)?;
            let kr = rac::encode_keypoint_heatmap_on(tape, pv, cfg, hr)?;
            let img = tape.constant(img.clone());
            let vr = rac::encode_texture_on(tape, pv, cfg, img)?;
            refs.push((kr, vr));
        }
        let implicit = rac::cross_attention_on(tape, pv, cfg, qd, &refs)?.warped;

        // Fusion and decoding.
        let variant = cfg.fusion;
        let (fused, mask) = if opts.force_mask_zero {
            (implicit, None)
        } else if variant.uses_mask() {
            let m = cgf::predict_mask_on(tape, pv, cfg, aligned, implicit)?;
            (cgf::fuse_on(tape, pv, aligned, implicit, Some(m), variant)?, Some(m))
        } else {
            (cgf::fuse_on(tape, pv, aligned, implicit, None, variant)?, None)
        };
        let image = cgf::decode_on(tape, pv, cfg, fused)?;
        Ok(ForwardVars {
            image,
            feature,
            flow: flow.flow,
            flow_masks: flow.masks,
            explicit,
            aligned,
            implicit,
            mask,
            fused,
        })
    }

    /// Runs the pipeline for inference.
    pub fn animate(&self, inputs: &FrameInputs<T>) -> Result<Animation<T>> {
        let mut tape = Tape::new();
        let pv = self.params.bind_constants(&mut tape);
        let out = self.forward_on(&mut tape, &pv, inputs, ForwardOptions::default())?;
        Ok(Animation {
            image: tape.value(out.image).clone(),
            flow: tape.value(out.flow).clone(),
            flow_masks: tape.value(out.flow_masks).clone(),
            mask: out.mask.map(|m| tape.value(m).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::smoke().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        ModelConfig::smoke().planar().validate().unwrap();
        assert_eq!(ModelConfig::default().feat_size(), 16);
        assert_eq!(ModelConfig::default().kp_down_layers(), 2);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let cfg = ModelConfig { heatmap_size: 24, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { keypoint_mode: KeypointMode::TwoD, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_config_fields_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"keypoints": 5, "bogus": 1}"#).is_err());
        let cfg: ModelConfig = serde_json::from_str(r#"{"keypoints": 5, "fusion": "sum-mask"}"#).unwrap();
        assert_eq!(cfg.keypoints, 5);
        assert_eq!(cfg.fusion, FusionVariant::SumMask);
    }
}
