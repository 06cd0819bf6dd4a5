//! Training objectives: L1 reconstruction, a Gaussian-pyramid stand-in for the
//! perceptual loss, and an optional hinge adversarial term.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{self, LayerSpec, Rank};
use crate::ops::Op;
use crate::params::{ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PYRAMID_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub adversarial: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { perceptual: 1.0, adversarial: 0.0, reconstruction: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.adversarial, self.reconstruction];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("loss weights must be finite and non-negative");
        }
        if all.iter().all(|&w| w == 0.0) {
            return invalid("at least one loss weight must be positive");
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &Self) {
        self.total += other.total;
        self.reconstruction += other.reconstruction;
        self.perceptual += other.perceptual;
        self.adversarial += other.adversarial;
    }

    pub fn scaled(mut self, f: f64) -> Self {
        self.total *= f;
        self.reconstruction *= f;
        self.perceptual *= f;
        self.adversarial *= f;
        self
    }
}

pub fn reconstruction_loss_on<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    tape.apply(Op::L1, &[pred, gt])
}

/// Mean of the per-level L1 over a `levels`-deep binomial pyramid.
pub fn perceptual_proxy_loss_on<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, levels: usize) -> Result<Var> {
    if levels == 0 {
        return invalid("pyramid needs at least one level");
    }
    let s = tape.value(pred).shape().to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return invalid(format!("perceptual loss expects square C×H×W images, got {s:?}"));
    }
    if s[1] % (1 << (levels - 1)) != 0 {
        return invalid(format!("image side {} is not divisible by 2^{}", s[1], levels - 1));
    }
    let (mut a, mut b) = (pred, gt);
    let mut terms = Vec::with_capacity(levels);
    for level in 0..levels {
        if level > 0 {
            a = tape.apply1(Op::BlurDown, a)?;
            b = tape.apply1(Op::BlurDown, b)?;
        }
        let t = tape.apply(Op::L1, &[a, b])?;
        terms.push(nn::reshape(tape, t, &[1])?);
    }
    let all = tape.apply(Op::Concat, &terms)?;
    tape.apply1(Op::Mean, all)
}

pub fn reconstruction_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
    let l = reconstruction_loss_on(&mut tape, a, b)?;
    Ok(tape.value(l).item().to_f64().unwrap_or(f64::NAN))
}

pub fn perceptual_proxy_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, levels: usize) -> Result<f64> {
    pred.expect_same_shape(gt)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
    let l = perceptual_proxy_loss_on(&mut tape, a, b, levels)?;
    Ok(tape.value(l).item().to_f64().unwrap_or(f64::NAN))
}

/// Which side of the hinge game a loss is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

const DISC_HIDDEN: usize = 16;

fn disc_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec { cout: DISC_HIDDEN, kernel: 3, stride: 2 },
        LayerSpec { cout: 2 * DISC_HIDDEN, kernel: 3, stride: 2 },
        LayerSpec { cout: 1, kernel: 3, stride: 1 },
    ]
}

/// Registers the 3-layer strided patch discriminator under `disc.*`.
pub fn init_discriminator<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
    nn::init_stack(store, rng, "disc", 3, &disc_layers(), Rank::Two)
}

pub fn discriminate_on<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, image: Var) -> Result<Var> {
    nn::stack(tape, pv, "disc", image, &disc_layers())
}

fn hinge<T: Scalar>(tape: &mut Tape<T>, logits: Var, sign: f64) -> Result<Var> {
    // mean(relu(1 + sign·D))
    let s = tape.apply1(Op::Scale(sign), logits)?;
    let s = tape.apply1(Op::AddScalar(1.0), s)?;
    let r = tape.apply1(Op::LeakyRelu(0.0), s)?;
    tape.apply1(Op::Mean, r)
}

/// Hinge loss from discriminator logits on real and generated images.
pub fn hinge_from_logits<T: Scalar>(tape: &mut Tape<T>, real: Option<Var>, fake: Var, role: Role) -> Result<Var> {
    match role {
        Role::Generator => {
            let m = tape.apply1(Op::Mean, fake)?;
            tape.apply1(Op::Scale(-1.0), m)
        }
        Role::Discriminator => {
            let real = real.ok_or_else(|| Error::InvalidArgument("discriminator loss needs real logits".into()))?;
            let a = hinge(tape, real, -1.0)?;
            let b = hinge(tape, fake, 1.0)?;
            tape.apply(Op::Add, &[a, b])
        }
    }
}

/// `pv` is `None` when the discriminator is disabled.
pub fn adversarial_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    pv: Option<&ParamVars>,
    pred: Var,
    gt: Var,
    role: Role,
) -> Result<Var> {
    let pv = pv.ok_or_else(|| Error::UnsupportedOperation("adversarial loss is disabled".into()))?;
    let fake = discriminate_on(tape, pv, pred)?;
    let real = match role {
        Role::Discriminator => Some(discriminate_on(tape, pv, gt)?),
        Role::Generator => None,
    };
    hinge_from_logits(tape, real, fake, role)
}

/// Handles of each term and the weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Option<Var>,
    pub perceptual: Option<Var>,
    pub adversarial: Option<Var>,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item().to_f64().unwrap_or(f64::NAN));
        LossBreakdown {
            total: v(Some(self.total)),
            reconstruction: v(self.reconstruction),
            perceptual: v(self.perceptual),
            adversarial: v(self.adversarial),
        }
    }
}

/// Weighted generator objective. Terms with zero weight are not evaluated;
/// the adversarial term is evaluated only when `disc` is bound.
pub fn total_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    weights: &LossWeights,
    disc: Option<&ParamVars>,
) -> Result<LossVars> {
    tape.value(pred).expect_same_shape(tape.value(gt))?;
    let mut weighted = Vec::new();
    let mut term = |tape: &mut Tape<T>, w: f64, v: Var| -> Result<()> {
        let s = tape.apply1(Op::Scale(w), v)?;
        weighted.push(nn::reshape(tape, s, &[1])?);
        Ok(())
    };
    let mut out = LossVars { total: pred, reconstruction: None, perceptual: None, adversarial: None };
    if weights.reconstruction > 0.0 {
        let v = reconstruction_loss_on(tape, pred, gt)?;
        term(tape, weights.reconstruction, v)?;
        out.reconstruction = Some(v);
    }
    if weights.perceptual > 0.0 {
        let v = perceptual_proxy_loss_on(tape, pred, gt, PYRAMID_LEVELS)?;
        term(tape, weights.perceptual, v)?;
        out.perceptual = Some(v);
    }
    if weights.adversarial > 0.0 && disc.is_some() {
        let v = adversarial_loss_on(tape, disc, pred, gt, Role::Generator)?;
        term(tape, weights.adversarial, v)?;
        out.adversarial = Some(v);
    }
    if weighted.is_empty() {
        let zero = tape.constant(Tensor::zeros(&[1])?);
        weighted.push(zero);
    }
    let all = tape.apply(Op::Concat, &weighted)?;
    out.total = tape.apply1(Op::Sum, all)?;
    Ok(out)
}

/// Plain-tensor evaluation of [`total_loss_on`].
pub fn total_loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    weights: &LossWeights,
    disc: Option<&ParamStore<T>>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let pv = disc.map(|d| d.bind_constants(&mut tape));
    let (a, b) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
    let l = total_loss_on(&mut tape, a, b, weights, pv.as_ref())?;
    Ok(l.breakdown(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(rng: &mut Rng, side: usize) -> Tensor<f64> {
        rng.uniform_tensor(&[3, side, side], 0.0, 1.0)
    }

    #[test]
    fn identical_images_cost_nothing() {
        let mut rng = Rng::new(1);
        let a = img(&mut rng, 16);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(perceptual_proxy_loss(&a, &a, 3).unwrap(), 0.0);
        let w = LossWeights { perceptual: 2.0, adversarial: 0.0, reconstruction: 0.5 };
        assert_eq!(total_loss(&a, &a, &w, None).unwrap().total, 0.0);
    }

    #[test]
    fn constant_offset() {
        let a = Tensor::<f64>::full(&[3, 8, 8], 0.5).unwrap();
        let b = a.map(|v| v + 0.25);
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!((perceptual_proxy_loss(&a, &b, 3).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rec_only_weights() {
        let mut rng = Rng::new(2);
        let (a, b) = (img(&mut rng, 8), img(&mut rng, 8));
        let w = LossWeights { perceptual: 0.0, adversarial: 0.0, reconstruction: 1.0 };
        let t = total_loss(&a, &b, &w, None).unwrap();
        assert_eq!(t.total, reconstruction_loss(&a, &b).unwrap());
        assert_eq!(t.perceptual, 0.0);
    }

    #[test]
    fn pyramid_geometry_checked() {
        let a = Tensor::<f64>::zeros(&[3, 6, 6]).unwrap();
        assert!(perceptual_proxy_loss(&a, &a, 3).is_err());
        assert!(perceptual_proxy_loss(&a, &a, 2).is_ok());
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { perceptual: 0.0, adversarial: 0.0, reconstruction: 0.0 }.validate().is_err());
        assert!(LossWeights { perceptual: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn hinge_at_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let real = tape.constant(Tensor::zeros(&[1, 4, 4]).unwrap());
        let fake = tape.constant(Tensor::zeros(&[1, 4, 4]).unwrap());
        let d = hinge_from_logits(&mut tape, Some(real), fake, Role::Discriminator).unwrap();
        let g = hinge_from_logits(&mut tape, None, fake, Role::Generator).unwrap();
        assert_eq!(tape.value(d).item(), 2.0);
        assert_eq!(tape.value(g).item(), 0.0);
    }

    #[test]
    fn hinge_saturates() {
        let mut tape = Tape::<f64>::new();
        let real = tape.constant(Tensor::full(&[1, 2, 2], 1.5).unwrap());
        let fake = tape.constant(Tensor::full(&[1, 2, 2], -1.0).unwrap());
        let d = hinge_from_logits(&mut tape, Some(real), fake, Role::Discriminator).unwrap();
        assert_eq!(tape.value(d).item(), 0.0);
    }

    #[test]
    fn disabled_adversarial_is_unsupported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3, 8, 8]).unwrap());
        let err = adversarial_loss_on(&mut tape, None, a, a, Role::Generator).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOperation(_)));
    }
}
