//! Appearance and motion encoding: keypoint transformation, rotation
//! parameterization, Gaussian heatmaps and the two image encoders.

use std::f64::consts::FRAC_PI_2;

use crate::error::{invalid, Result};
use crate::kernels;
use crate::model::ModelConfig;
use crate::nn::{self, Rank};
use crate::ops::Op;
use crate::params::{ParamStore, ParamVars};
use crate::rng::{init_params, Rng};
use crate::scalar::{sc, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bound of the expression deformation in normalized units.
pub const DELTA_BOUND: f64 = 0.3;
/// Bound of the pre-activation of `ln s`.
pub const LOG_SCALE_BOUND: f64 = 0.5;
/// Bound of the Euler angles, in radians.
pub const ANGLE_BOUND: f64 = FRAC_PI_2;

/// K×3 keypoint coordinates in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet<T>(Tensor<T>);

impl<T: Scalar> KeypointSet<T> {
    pub fn new(coords: Tensor<T>) -> Result<Self> {
        if coords.ndim() != 2 || coords.shape()[1] != 3 {
            return invalid(format!("keypoints must be K×3, got {:?}", coords.shape()));
        }
        if !coords.all_finite() {
            return invalid("keypoint coordinates must be finite");
        }
        Ok(Self(coords))
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn point(&self, k: usize) -> [T; 3] {
        let r = &self.0.data()[k * 3..k * 3 + 3];
        [r[0], r[1], r[2]]
    }

    /// Copy with every z coordinate set to zero (planar keypoints).
    pub fn flattened(&self) -> Self {
        let mut t = self.0.clone();
        for p in t.data_mut().chunks_exact_mut(3) {
            p[2] = T::zero();
        }
        Self(t)
    }
}

/// Per-image pose, expression and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams<T> {
    pub yaw: T,
    pub pitch: T,
    pub roll: T,
    pub translation: [T; 3],
    pub delta: Tensor<T>,
    pub scale: T,
}

impl<T: Scalar> MotionParams<T> {
    /// Zero angles, zero translation and expression, unit scale.
    pub fn identity(k: usize) -> Self {
        Self {
            yaw: T::zero(),
            pitch: T::zero(),
            roll: T::zero(),
            translation: [T::zero(); 3],
            delta: Tensor::zeros(&[k, 3]).expect("k >= 1"),
            scale: T::one(),
        }
    }

    pub fn rotation(&self) -> [[T; 3]; 3] {
        euler_to_rotation(self.yaw, self.pitch, self.roll)
    }

    pub fn cast<U: Scalar>(&self) -> MotionParams<U> {
        let c = |v: T| U::from(v).expect("finite");
        MotionParams {
            yaw: c(self.yaw),
            pitch: c(self.pitch),
            roll: c(self.roll),
            translation: self.translation.map(c),
            delta: self.delta.cast(),
            scale: c(self.scale),
        }
    }
}

fn matmul3<T: Scalar>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation applied to keypoint row vectors as `x · R`.
///
/// Composes `R_z(roll) · R_y(yaw) · R_x(pitch)` acting on column vectors and
/// returns its transpose, so `x · R` rotates `x` by that composition.
pub fn euler_to_rotation<T: Scalar>(yaw: T, pitch: T, roll: T) -> [[T; 3]; 3] {
    let (o, z) = (T::one(), T::zero());
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rx = [[o, z, z], [z, cp, -sp], [z, sp, cp]];
    let ry = [[cy, z, sy], [z, o, z], [-sy, z, cy]];
    let rz = [[cr, -sr, z], [sr, cr, z], [z, z, o]];
    let r = matmul3(&matmul3(&rz, &ry), &rx);
    let mut t = [[z; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = r[j][i];
        }
    }
    t
}

/// `x = s · (x_c · R + δ) + t` for every keypoint row.
pub fn transform_keypoints<T: Scalar>(xc: &KeypointSet<T>, p: &MotionParams<T>) -> Result<KeypointSet<T>> {
    if !(p.scale > T::zero()) {
        return invalid("scale must be positive");
    }
    if p.delta.shape() != xc.tensor().shape() {
        return invalid(format!(
            "expression deformation {:?} does not match keypoints {:?}",
            p.delta.shape(),
            xc.tensor().shape()
        ));
    }
    let r = p.rotation();
    let mut out = Vec::with_capacity(xc.count() * 3);
    for (row, d) in xc.tensor().data().chunks_exact(3).zip(p.delta.data().chunks_exact(3)) {
        for j in 0..3 {
            let rot: T = (0..3).map(|i| row[i] * r[i][j]).sum();
            out.push(p.scale * (rot + d[j]) + p.translation[j]);
        }
    }
    KeypointSet::new(Tensor::new(xc.tensor().shape(), out)?)
}

/// Source and driving keypoints, both derived from the source's canonical set.
pub fn driving_keypoints<T: Scalar>(
    source_canonical: &KeypointSet<T>,
    source: &MotionParams<T>,
    driving: &MotionParams<T>,
) -> Result<(KeypointSet<T>, KeypointSet<T>)> {
    Ok((transform_keypoints(source_canonical, source)?, transform_keypoints(source_canonical, driving)?))
}

/// K×D×H×W Gaussian heatmap volume with its variance.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapVolume<T> {
    pub values: Tensor<T>,
    pub variance: f64,
}

pub fn gaussian_heatmap<T: Scalar>(x: &KeypointSet<T>, dims: [usize; 3], variance: f64) -> Result<HeatmapVolume<T>> {
    Ok(HeatmapVolume { values: kernels::gaussian_heatmap(x.tensor(), dims, variance)?, variance })
}

/// Volumetric appearance feature `C×D×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceFeature<T>(pub Tensor<T>);

pub(crate) fn check_image<T: Scalar>(img: &Tensor<T>, size: usize) -> Result<()> {
    if img.shape() != [3, size, size] {
        return invalid(format!("expected a 3×{size}×{size} image, got {:?}", img.shape()));
    }
    Ok(())
}

pub fn init_appearance_encoder<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) -> Result<()> {
    let layers = nn::strided_encoder(cfg.down_layers, cfg.app_hidden, cfg.feat_channels * cfg.feat_depth);
    nn::init_stack(store, rng, "enc.app", 3, &layers, Rank::Two)
}

/// Strided 2D conv stack emitting `C·D` channels, reshaped into `C×D×H×W`.
pub fn encode_appearance_on<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, image: Var) -> Result<Var> {
    check_image(tape.value(image), cfg.image_size)?;
    let layers = nn::strided_encoder(cfg.down_layers, cfg.app_hidden, cfg.feat_channels * cfg.feat_depth);
    let flat = nn::stack(tape, pv, "enc.app", image, &layers)?;
    let f = cfg.feat_size();
    nn::reshape(tape, flat, &[cfg.feat_channels, cfg.feat_depth, f, f])
}

pub fn encode_appearance<T: Scalar>(params: &ParamStore<T>, cfg: &ModelConfig, image: &Tensor<T>) -> Result<AppearanceFeature<T>> {
    let mut tape = Tape::new();
    let pv = bind_frozen(params, &mut tape);
    let img = tape.constant(image.clone());
    let out = encode_appearance_on(&mut tape, &pv, cfg, img)?;
    Ok(AppearanceFeature(tape.value(out).clone()))
}

/// Binds every parameter as a constant for inference.
pub(crate) fn bind_frozen<T: Scalar>(params: &ParamStore<T>, tape: &mut Tape<T>) -> ParamVars {
    params.bind_constants(tape)
}

/// Width of the motion head output: canonical K·3, three angles, t, δ K·3, s.
pub fn motion_head_width(k: usize) -> usize {
    6 * k + 7
}

pub fn init_motion_encoder<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) -> Result<()> {
    let trunk = nn::strided_encoder(cfg.motion_layers, cfg.motion_hidden, cfg.motion_hidden);
    nn::init_stack(store, rng, "enc.mot", 3, &trunk, Rank::Two)?;
    let out = motion_head_width(cfg.keypoints);
    // Small head weights keep the initial prediction near the identity motion.
    let mut w: Tensor<T> = init_params(rng, &[cfg.motion_hidden, out], cfg.motion_hidden)?;
    w.scale_in_place(sc(0.01));
    store.insert("enc.mot.head.weight", w)?;
    store.insert("enc.mot.head.bias", Tensor::zeros(&[1, out])?)?;
    Ok(())
}

/// Bounded motion head activations, laid out like [`motion_targets`].
pub fn encode_motion_on<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, image: Var) -> Result<Var> {
    check_image(tape.value(image), cfg.image_size)?;
    let k = cfg.keypoints;
    let trunk = nn::strided_encoder(cfg.motion_layers, cfg.motion_hidden, cfg.motion_hidden);
    let feat = nn::stack(tape, pv, "enc.mot", image, &trunk)?;
    let feat = nn::leaky(tape, feat)?;
    let pooled = tape.apply1(Op::SpatialMean, feat)?;
    let w = pv.get("enc.mot.head.weight")?;
    let b = pv.get("enc.mot.head.bias")?;
    let lin = tape.apply(Op::MatMul, &[pooled, w])?;
    let raw = tape.apply(Op::AddRowBcast, &[lin, b])?;
    let raw = nn::reshape(tape, raw, &[motion_head_width(k)])?;

    let mut parts = Vec::new();
    let mut at = 0;
    let mut seg = |tape: &mut Tape<T>, len: usize, bound: Option<f64>| -> Result<Var> {
        let s = tape.apply1(Op::Slice { start: at, len }, raw)?;
        at += len;
        match bound {
            Some(b) => {
                let t = tape.apply1(Op::Tanh, s)?;
                tape.apply1(Op::Scale(b), t)
            }
            None => Ok(s),
        }
    };
    parts.push(seg(tape, 3 * k, Some(1.0))?);
    parts.push(seg(tape, 3, Some(ANGLE_BOUND))?);
    parts.push(seg(tape, 3, None)?);
    parts.push(seg(tape, 3 * k, Some(DELTA_BOUND))?);
    parts.push(seg(tape, 1, Some(LOG_SCALE_BOUND))?);
    tape.apply(Op::Concat, &parts)
}

/// Regression target vector for [`encode_motion_on`]: canonical keypoints,
/// angles, translation, expression and `ln s`.
pub fn motion_targets<T: Scalar>(canonical: &KeypointSet<T>, p: &MotionParams<T>) -> Result<Tensor<T>> {
    let mut v = canonical.tensor().data().to_vec();
    v.extend([p.yaw, p.pitch, p.roll]);
    v.extend(p.translation);
    v.extend_from_slice(p.delta.data());
    v.push(p.scale.ln());
    let n = v.len();
    Tensor::new(&[n], v)
}

/// Inverse of [`motion_targets`].
pub fn decode_motion<T: Scalar>(head: &Tensor<T>, k: usize) -> Result<(KeypointSet<T>, MotionParams<T>)> {
    if head.len() != motion_head_width(k) {
        return invalid(format!("motion head has {} values, expected {}", head.len(), motion_head_width(k)));
    }
    let h = head.data();
    let canonical = KeypointSet::new(Tensor::new(&[k, 3], h[..3 * k].to_vec())?)?;
    let a = 3 * k;
    let params = MotionParams {
        yaw: h[a],
        pitch: h[a + 1],
        roll: h[a + 2],
        translation: [h[a + 3], h[a + 4], h[a + 5]],
        delta: Tensor::new(&[k, 3], h[a + 6..a + 6 + 3 * k].to_vec())?,
        scale: h[a + 6 + 3 * k].exp(),
    };
    Ok((canonical, params))
}

/// Where motion parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum MotionSource<'a, T> {
    /// Run the motion encoder network.
    Network(&'a ParamStore<T>),
    /// Return ground-truth parameters supplied by the data generator.
    Oracle(&'a KeypointSet<T>, &'a MotionParams<T>),
}

pub fn encode_motion<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ModelConfig,
    source: MotionSource<'_, T>,
) -> Result<(KeypointSet<T>, MotionParams<T>)> {
    match source {
        MotionSource::Oracle(c, p) => Ok((c.clone(), p.clone())),
        MotionSource::Network(params) => {
            let mut tape = Tape::new();
            let pv = bind_frozen(params, &mut tape);
            let img = tape.constant(image.clone());
            let head = encode_motion_on(&mut tape, &pv, cfg, img)?;
            decode_motion(tape.value(head), cfg.keypoints)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(v: &[f64]) -> KeypointSet<f64> {
        KeypointSet::new(Tensor::from_f64(&[v.len() / 3, 3], v).unwrap()).unwrap()
    }

    #[test]
    fn zero_angles_give_identity() {
        let r = euler_to_rotation(0.0f64, 0.0, 0.0);
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_yaw_sends_x_to_minus_z() {
        let r = euler_to_rotation(FRAC_PI_2, 0.0, 0.0);
        let row = r[0];
        assert!(row[0].abs() < 1e-12 && row[1].abs() < 1e-12 && (row[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotations_are_proper() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let (y, p, r) = (rng.uniform(-3.2, 3.2), rng.uniform(-3.2, 3.2), rng.uniform(-3.2, 3.2));
            let m = euler_to_rotation(y, p, r);
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_motion_is_noop() {
        let xc = kp(&[0.1, -0.2, 0.3, -0.5, 0.4, 0.0]);
        let x = transform_keypoints(&xc, &MotionParams::identity(2)).unwrap();
        assert_eq!(x, xc);
    }

    #[test]
    fn forced_arithmetic() {
        let xc = kp(&[0.0, 0.0, 0.0]);
        let mut p = MotionParams::identity(1);
        p.scale = 2.0;
        p.delta = Tensor::from_f64(&[1, 3], &[0.1, 0.0, 0.0]).unwrap();
        p.translation = [0.5, 0.0, 0.0];
        let x = transform_keypoints(&xc, &p).unwrap();
        assert!((x.point(0)[0] - 0.7).abs() < 1e-12);
        p.scale = 0.0;
        assert!(transform_keypoints(&xc, &p).is_err());
    }

    #[test]
    fn translation_only_shifts() {
        let xc = kp(&[0.1, 0.2, 0.3, -0.4, 0.0, 0.25]);
        let ps = MotionParams::identity(2);
        let mut pd = MotionParams::identity(2);
        pd.translation = [0.25, -0.125, 0.5];
        let (xs, xd) = driving_keypoints(&xc, &ps, &pd).unwrap();
        assert_eq!(xs, xc);
        for k in 0..2 {
            for j in 0..3 {
                assert!((xd.point(k)[j] - xs.point(k)[j] - pd.translation[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_round_trip() {
        let xc = kp(&[0.1, -0.2, 0.3]);
        let mut p = MotionParams::identity(1);
        p.yaw = 0.2;
        p.scale = 1.1;
        let t = motion_targets(&xc, &p).unwrap();
        let (c2, p2) = decode_motion(&t, 1).unwrap();
        assert_eq!(c2, xc);
        assert!((p2.scale - 1.1).abs() < 1e-12);
        assert_eq!(p2.yaw, 0.2);
    }
}
