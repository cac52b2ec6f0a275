use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_util::hash_tensor;

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Params) {
        for (k, v) in other.iter() {
            self.map.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Deep copy with gradient tracking cut.
    pub fn detached_copy(&self) -> Result<Params> {
        let mut out = Params::new();
        for (k, v) in self.iter() {
            out.insert(k.clone(), v.detach().copy()?);
        }
        Ok(out)
    }

    /// Wraps every tensor in a fresh `Var`, returning the tracked view and
    /// the vars in name order.
    pub fn into_vars(self) -> Result<(Params, Vec<(String, Var)>)> {
        let mut view = Params::new();
        let mut vars = Vec::with_capacity(self.map.len());
        for (k, v) in self.map {
            let var = Var::from_tensor(&v)?;
            view.insert(k.clone(), var.as_tensor().clone());
            vars.push((k, var));
        }
        Ok((view, vars))
    }

    pub fn hash_hex(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (k, v) in self.iter() {
            hasher.update(k.as_bytes());
            hash_tensor(&mut hasher, v)?;
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Params {
            map: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for Params {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.map.into_iter()
    }
}
