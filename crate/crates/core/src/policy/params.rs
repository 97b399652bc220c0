use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::rng;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Named parameter arrays, ordered by name. Names follow
/// `module.layer.tensor`; names ending in `running_mean`/`running_var` are
/// normalization buffers rather than trainable weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scalar count of trainable weights.
    pub fn num_weights(&self) -> usize {
        self.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            map: self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.map.extend(other.map);
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// U(−1/√fan_in, 1/√fan_in) with fan_in the leading extent (the
    /// `fan` override is used for biases).
    Uniform {
        fan: usize,
    },
    Const(f32),
}

/// Parameter declarations in creation order.
#[derive(Debug, Default)]
pub struct ParamSpecs {
    pub specs: Vec<(String, Vec<usize>, Init)>,
}

impl ParamSpecs {
    pub fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) {
        self.specs.push((name, vec![fan_in, fan_out], Init::Uniform { fan: fan_in }));
    }

    pub fn bias(&mut self, name: String, fan_in: usize, len: usize) {
        self.specs.push((name, vec![len], Init::Uniform { fan: fan_in }));
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) {
        self.specs.push((name, shape, Init::Const(value)));
    }

    pub fn uniform(&mut self, name: String, shape: Vec<usize>, fan: usize) {
        self.specs.push((name, shape, Init::Uniform { fan }));
    }

    /// Each array draws from its own stream keyed by name, so adding a
    /// parameter never changes the values of the others.
    pub fn materialize(&self, seed: u64) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (name, shape, init) in &self.specs {
            let t = match *init {
                Init::Const(v) => Tensor::full(shape.clone(), v),
                Init::Uniform { fan } => {
                    let bound = 1.0 / (fan.max(1) as f32).sqrt();
                    let mut r = rng::stream(rng::derive(seed, name, 0), 0);
                    Tensor::from_fn(shape.clone(), |_| r.random_range(-bound..bound))
                }
            };
            out.insert(name.clone(), t);
        }
        out
    }
}

/// Parameters placed on a tape. Trainable entries are leaves; the rest are
/// constants.
pub struct Bound<'t, T: Float> {
    pub tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Float> Bound<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &ParamSet<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v =
                    if !is_buffer(name) && trainable(name) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (name.to_string(), v)
            })
            .collect();
        Bound { tape, vars }
    }

    /// All parameters constant (inference).
    pub fn frozen(tape: &'t Tape<T>, params: &ParamSet<T>) -> Self {
        Self::new(tape, params, |_| false)
    }

    pub fn get(&self, name: &str) -> &Var<'t, T> {
        self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Var<'t, T>> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var<'t, T>) {
        self.vars.insert(name.into(), var);
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Gradients of every trainable entry, zeros where the loss does not reach.
    pub fn gradients(&self, grads: &crate::tensor::Gradients<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            if v.requires_grad() {
                out.insert(name.clone(), grads.wrt(v));
            }
        }
        out
    }

    /// A prefixed view, e.g. `"critic."`.
    pub fn scope<'a>(&'a self, prefix: &'a str) -> Scope<'a, 't, T> {
        Scope { bound: self, prefix }
    }
}

/// Parameter lookup under a name prefix.
#[derive(Clone, Copy)]
pub struct Scope<'a, 't, T: Float> {
    pub bound: &'a Bound<'t, T>,
    pub prefix: &'a str,
}

impl<'a, 't, T: Float> Scope<'a, 't, T> {
    pub fn get(&self, name: &str) -> &'a Var<'t, T> {
        self.bound.get(&format!("{}{}", self.prefix, name))
    }

    pub fn try_get(&self, name: &str) -> Option<&'a Var<'t, T>> {
        self.bound.try_get(&format!("{}{}", self.prefix, name))
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.bound.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn materialize_is_per_name() {
        let mut a = ParamSpecs::default();
        a.weight("x.w".into(), 4, 3);
        let mut b = ParamSpecs::default();
        b.weight("y.w".into(), 2, 2);
        b.weight("x.w".into(), 4, 3);
        assert_eq!(a.materialize(1).get("x.w"), b.materialize(1).get("x.w"));
        assert_ne!(a.materialize(1).get("x.w"), a.materialize(2).get("x.w"));
        let p = a.materialize(1);
        assert!(p.get("x.w").unwrap().data().iter().all(|&v| v.abs() <= 0.5));
        assert_eq!(p.checksum(), p.clone().checksum());
    }
}
