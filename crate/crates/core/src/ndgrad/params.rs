use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndgrad::{Gradients, NodeId, Tape, Tensor};

/// Named parameter tensors in a fixed registration order.
///
/// The order is what makes optimizer traversal and checkpoint layout
/// deterministic, so iteration always follows insertion order.
#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    values: BTreeMap<String, Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name:?}")));
        }
        self.names.push(name.to_string());
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(move |n| (n.as_str(), &self.values[n]))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    /// Merge another set in; names must not collide.
    pub fn absorb(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in other.iter() {
            self.insert(name, t.clone())?;
        }
        Ok(())
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn leaves(&self, tape: &mut Tape) -> Result<LeafMap> {
        let mut ids = BTreeMap::new();
        for (name, t) in self.iter() {
            ids.insert(name.to_string(), tape.leaf(name, t.clone())?);
        }
        Ok(LeafMap { ids })
    }

    /// Register every parameter as a constant (no gradients).
    pub fn constants(&self, tape: &mut Tape) -> Result<LeafMap> {
        let mut ids = BTreeMap::new();
        for (name, t) in self.iter() {
            ids.insert(name.to_string(), tape.constant(t.clone())?);
        }
        Ok(LeafMap { ids })
    }

    /// In-place `p += scale * grad` over every named gradient.
    pub fn apply_scaled(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .values
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name:?}")))?;
            p.add_assign_scaled(g, scale);
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits; used by the tests that
    /// assert a player's parameters were untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &e in t.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Leaf/constant node ids keyed by parameter name.
pub struct LeafMap {
    ids: BTreeMap<String, NodeId>,
}

impl LeafMap {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no tape node for parameter {name:?}")))
    }
}
