//! Named parameter collections and their binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use crate::bundle::{Bundle, IntoEntry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Parameters of every sub-network, keyed by dotted name (`rac.kp.l0.weight`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, trainable: true });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Marks each parameter trainable according to `rule`.
    pub fn set_trainable(&mut self, rule: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = rule(name);
        }
    }

    /// Records every parameter on `tape`; trainable ones as gradient leaves,
    /// the rest as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        self.bind_where(tape, |p| p.trainable)
    }

    /// Records every parameter as a constant.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> ParamVars {
        self.bind_where(tape, |_| false)
    }

    fn bind_where(&self, tape: &mut Tape<T>, grad: impl Fn(&Param<T>) -> bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if grad(p) { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), trainable: p.trainable }))
                .collect(),
        }
    }

    pub fn write_into(&self, bundle: &mut Bundle)
    where
        Tensor<T>: IntoEntry,
    {
        for (name, p) in &self.params {
            bundle.insert(name.clone(), p.value.clone());
        }
    }

    /// Overwrites every parameter from `bundle`, checking shapes.
    pub fn read_from(&mut self, bundle: &Bundle) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let t: Tensor<T> = bundle.tensor(name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?} in bundle, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// Tape handles of bound parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
