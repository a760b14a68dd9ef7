use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Ordered `(path, shape)` list describing a parameter registry without
/// allocating it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ParamLayout {
    pub fn push(&mut self, path: String, shape: Vec<usize>) {
        self.entries.push((path, shape));
    }

    /// `{path}.weight: [out, in]` and optionally `{path}.bias: [out]`.
    pub fn linear(&mut self, path: &str, out: usize, inp: usize, bias: bool) {
        self.push(format!("{path}.weight"), vec![out, inp]);
        if bias {
            self.push(format!("{path}.bias"), vec![out]);
        }
    }

    pub fn norm(&mut self, path: &str, d: usize) {
        self.push(format!("{path}.gamma"), vec![d]);
        self.push(format!("{path}.beta"), vec![d]);
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn shape_of(&self, path: &str) -> Option<&[usize]> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, s)| s.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    pub role: ParamRole,
}

/// Which parameters [`ParamStore::count`] includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountFilter {
    All,
    Trainable,
}

/// Path-keyed parameter registry in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, trainable: bool, role: ParamRole) -> Result<()> {
        let path = path.into();
        if self.map.contains_key(&path) {
            return Err(Error::Model(format!("duplicate parameter path `{path}`")));
        }
        self.map.insert(path, Param { value, trainable, role });
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Option<Param> {
        self.map.shift_remove(path)
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.map
            .get(path)
            .ok_or_else(|| Error::Model(format!("unknown parameter path `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.map
            .get_mut(path)
            .ok_or_else(|| Error::Model(format!("unknown parameter path `{path}`")))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        Ok(&self.get(path)?.value)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, path: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(path)?;
        if p.value.shape() != value.shape() {
            return Err(shape_err("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn count(&self, filter: CountFilter) -> usize {
        self.map
            .values()
            .filter(|p| filter == CountFilter::All || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn count_where(&self, f: impl Fn(&str, &Param) -> bool) -> usize {
        self.map.iter().filter(|(k, p)| f(k, p)).map(|(_, p)| p.value.len()).sum()
    }

    pub fn set_trainable_where(&mut self, f: impl Fn(&str, &Param) -> bool) {
        for (k, p) in self.map.iter_mut() {
            p.trainable = f(k, p);
        }
    }

    /// SHA-256 over `(path, shape, little-endian f64 bits)` of every parameter
    /// matching `f`, in registry order.
    pub fn digest_where(&self, f: impl Fn(&str, &Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, p) in self.map.iter().filter(|(k, p)| f(k, p)) {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on `tape`; only trainable ones get gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone(), p.trainable)))
            .collect();
        Bound { vars }
    }
}

/// Parameter paths mapped to tape leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn new(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter `{path}` is not bound")))
    }

    pub fn try_var(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
