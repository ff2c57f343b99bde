use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Base,
    SimHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<T>,
}

/// All trainable tensors of a model, addressed by [`ParamId`] and unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, group, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids sorted by parameter name; the canonical iteration order for
    /// optimizer updates, norms and digests.
    pub fn ids_by_name(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied()
    }

    pub fn count_elements(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Put every parameter on `tape` as a leaf. With `grad = false` the
    /// leaves are constants and nothing is differentiable.
    pub fn bind(&self, tape: &mut Tape<T>, grad: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if grad {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Per-parameter gradients (zeros where unreachable), indexed like the store.
    pub fn collect_grads(&self, binds: &Bindings, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&binds.vars)
            .map(|(p, &v)| grads.wrt_or_zeros(v, p.tensor.shape()))
            .collect()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        let entries = self
            .ids_by_name()
            .map(|id| {
                let p = self.get(id);
                SnapshotEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_f64_vec(),
                }
            })
            .collect();
        ParamSnapshot { entries }
    }

    /// Overwrite values from a snapshot with matching names and shapes.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.entries.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} parameters, model has {}",
                snap.entries.len(),
                self.params.len()
            )));
        }
        for e in &snap.entries {
            let id = self
                .id(&e.name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {}", e.name)))?;
            let p = self.get_mut(id);
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, snapshot {:?}",
                    e.name,
                    p.tensor.shape(),
                    e.shape
                )));
            }
            p.tensor = Tensor::from_f64(e.shape.clone(), &e.data)?;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store on one tape.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Name-ordered copy of all parameter values, widened to f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub entries: Vec<SnapshotEntry>,
}

impl ParamSnapshot {
    /// 64-bit FNV-1a over names, shapes and value bits.
    pub fn digest(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            eat(&[0]);
            for &d in &e.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Values restricted to one group, for trajectory comparisons.
    pub fn group(&self, group: Group) -> ParamSnapshot {
        ParamSnapshot {
            entries: self.entries.iter().filter(|e| e.group == group).cloned().collect(),
        }
    }
}
