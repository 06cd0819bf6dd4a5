//! Bias-corrected Adam over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, IntoEntry};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
}

/// First/second moments and a step counter per parameter. Parameters get a
/// moment slot the first time they receive a gradient, so a parameter frozen
/// during warm-up starts its bias correction from its own first update.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.step)
    }

    /// Applies one update to every trainable parameter named in `grads`.
    /// Gradients are all checked for finiteness before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            g.expect_same_shape(p)?;
            if !g.all_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for parameter `{name}`")));
            }
        }
        let c = self.config;
        let (b1, b2): (T, T) = (sc(c.beta1), sc(c.beta2));
        let (one, lr, eps): (T, T, T) = (T::one(), sc(c.lr), sc(c.eps));
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: p.value.zeros_like(),
                v: p.value.zeros_like(),
                step: 0,
            });
            st.step += 1;
            let bc1 = one - b1.powi(st.step as i32);
            let bc2 = one - b2.powi(st.step as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Stores moments as `adam.m.{name}`, `adam.v.{name}` and `adam.step.{name}`.
    pub fn write_into(&self, bundle: &mut Bundle)
    where
        Tensor<T>: IntoEntry,
    {
        for (name, s) in &self.state {
            bundle.insert(format!("adam.m.{name}"), s.m.clone());
            bundle.insert(format!("adam.v.{name}"), s.v.clone());
            bundle.insert(format!("adam.step.{name}"), Tensor::<f64>::scalar(s.step as f64));
        }
    }

    pub fn read_from(&mut self, bundle: &Bundle) -> Result<()> {
        self.state.clear();
        for name in bundle.names() {
            let Some(param) = name.strip_prefix("adam.step.") else { continue };
            let step: Tensor<f64> = bundle.tensor(name)?;
            let m = bundle.tensor(&format!("adam.m.{param}"))?;
            let v = bundle.tensor(&format!("adam.v.{param}"))?;
            self.state.insert(param.to_string(), Moments { m, v, step: step.item() as u64 });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &grads(1.0)).unwrap();
        let delta = s.get("w").unwrap().item() - 1.0;
        // m̂ = v̂ = 1 so the step is lr / (1 + eps).
        assert!((delta + 2e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.step_count("w"), 1);
    }

    #[test]
    fn zero_gradient_keeps_value() {
        let mut s = store(0.3);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &grads(0.0)).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.3);
        assert_eq!(adam.step_count("w"), 1);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut s = store(0.3);
        s.set_trainable(|_| false);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &grads(5.0)).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.3);
        assert_eq!(adam.step_count("w"), 0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(0.3);
        let mut adam = Adam::new(AdamConfig::default());
        match adam.step(&mut s, &grads(f64::NAN)) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("`w`")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.get("w").unwrap().item(), 0.3);
    }

    #[test]
    fn state_round_trips_through_bundle() {
        let mut s = store(0.3);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &grads(0.7)).unwrap();
        let mut b = Bundle::new();
        adam.write_into(&mut b);
        let mut back = Adam::<f64>::new(AdamConfig::default());
        back.read_from(&b).unwrap();
        assert_eq!(back, adam);
    }
}
