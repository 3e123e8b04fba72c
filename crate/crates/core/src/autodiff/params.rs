use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use super::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Named trainable tensors. Names are sorted so iteration order, and with it
/// every optimizer update, is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Arc<Matrix>>,
}

/// Per-parameter gradients, keyed like [`ParamStore`].
pub type GradMap = BTreeMap<String, Matrix>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        bound: f64,
        rng: &mut impl Rng,
    ) {
        let m = Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..=bound));
        self.insert(name, m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.entries
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Record every parameter on `tape`, trainable or frozen.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param_shared(Arc::clone(v))
                } else {
                    tape.constant_shared(Arc::clone(v))
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Copy of `self` where every entry in `other` overrides ours.
    pub fn merged(&self, other: &ParamStore) -> ParamStore {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            out.entries.insert(k.clone(), Arc::clone(v));
        }
        out
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), Arc::clone(v)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    /// Gradients for every bound parameter; unreachable ones are zero.
    pub fn collect(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}
