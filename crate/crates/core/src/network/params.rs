//! Named, ordered parameter tensors and matching gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule for one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `N(0, 2 / fan_in)`; for layers feeding batch renormalization.
    HeNormal { fan_in: usize },
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collects parameter declarations while a network is wired up.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.push(name.into(), shape, init, true)
    }

    /// Non-learnable state such as running statistics.
    pub fn add_state(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.push(name.into(), shape, init, false)
    }

    fn push(&mut self, name: String, shape: &[usize], init: Init, learnable: bool) -> ParamId {
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            learnable,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn learnable_count(&self) -> usize {
        self.specs.iter().filter(|s| s.learnable).map(ParamSpec::len).sum()
    }
}

/// Parameter values in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn initialize<R: Rng>(registry: &ParamRegistry, rng: &mut R) -> Self {
        let values = registry
            .specs
            .iter()
            .map(|spec| {
                let n = spec.len();
                match spec.init {
                    Init::Zeros => vec![S::zero(); n],
                    Init::Const(v) => vec![S::c(v); n],
                    Init::HeNormal { fan_in } => {
                        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                        (0..n).map(|_| S::c(d.sample(rng))).collect()
                    }
                    Init::GlorotUniform { fan_in, fan_out } => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        let d = Uniform::new_inclusive(-a, a).expect("valid range");
                        (0..n).map(|_| S::c(d.sample(rng))).collect()
                    }
                    Init::Normal { std } => {
                        let d = Normal::new(0.0, std).expect("valid std");
                        (0..n).map(|_| S::c(d.sample(rng))).collect()
                    }
                }
            })
            .collect();
        Self::from_parts(registry.specs.clone(), values).expect("sizes match specs")
    }

    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Vec<S>>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::shape("parameter list", specs.len(), values.len()));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.len() != v.len() {
                return Err(Error::shape(format!("parameter {}", s.name), s.len(), v.len()));
            }
        }
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Self { specs, values, index })
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&[S]> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Vec<S>] {
        &self.values
    }

    pub fn learnable_count(&self) -> usize {
        self.specs.iter().filter(|s| s.learnable).map(ParamSpec::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (s, v) in self.specs.iter().zip(&self.values) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", s.name)));
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| T::c(x.to_f64_lossy())).collect())
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; state tensors stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    values: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self {
            values: store.values.iter().map(|v| vec![S::zero(); v.len()]).collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<S>] {
        &self.values
    }

    pub fn add(&mut self, other: &Grads<S>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, f: S) {
        for v in self.values.iter_mut() {
            v.iter_mut().for_each(|x| *x *= f);
        }
    }

    pub fn global_norm(&self) -> S {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt()
    }
}
