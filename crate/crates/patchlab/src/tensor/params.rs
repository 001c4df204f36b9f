//! Named parameter registry.
//!
//! Models register every trainable tensor here under a stable name; the
//! registry order is the canonical order for binding into graphs, optimizer
//! state, and checkpoints, which keeps all of those deterministic.

use std::collections::BTreeMap;

use super::{numel, Element, Graph, Rng, Tid};
use crate::error::{Error, Result};

pub struct Param<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub grad: Option<Vec<E>>,
}

#[derive(Default)]
pub struct ParamStore<E> {
    entries: Vec<Param<E>>,
    index: BTreeMap<String, usize>,
}

/// How a freshly registered parameter is filled.
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal with the given std (resampled beyond ±2 std).
    TruncNormal(f64),
    Const(f64),
    /// Evenly spaced values from lo to hi (inclusive). Used for scan decay
    /// biases so the state mixes short and long timescales from step zero.
    LinSpace(f64, f64),
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut Rng) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = numel(&shape);
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::Const(v) => vec![E::from_f64(v); n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| E::from_f64(rng.trunc_normal(std)))
                .collect(),
            Init::LinSpace(lo, hi) => (0..n)
                .map(|i| {
                    let t = if n == 1 {
                        0.0
                    } else {
                        i as f64 / (n - 1) as f64
                    };
                    E::from_f64(lo + t * (hi - lo))
                })
                .collect(),
        };
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Param {
            name: name.to_string(),
            shape,
            data,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> u64 {
        self.entries.iter().map(|p| p.data.len() as u64).sum()
    }

    pub fn get(&self, id: usize) -> &Param<E> {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<E> {
        &mut self.entries[id]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    /// Bind every parameter into a graph as a gradient-tracking leaf.
    /// Returns tensor ids aligned with registry order.
    pub fn bind(&self, g: &mut Graph<E>) -> Result<Vec<Tid>> {
        self.entries
            .iter()
            .map(|p| g.leaf(p.data.clone(), p.shape.clone(), true))
            .collect()
    }

    /// Copy gradients out of a backward-completed graph. Parameters the loss
    /// never reached get explicit zero gradients.
    pub fn harvest_grads(&mut self, g: &Graph<E>, binds: &[Tid]) {
        for (p, &t) in self.entries.iter_mut().zip(binds) {
            let n = p.data.len();
            match g.grad(t) {
                Some(gr) => match &mut p.grad {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(gr) {
                            *a += v;
                        }
                    }
                    None => p.grad = Some(gr.to_vec()),
                },
                None => {
                    if p.grad.is_none() {
                        p.grad = Some(vec![E::zero(); n]);
                    }
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// Strict equality of all parameter bytes (determinism checks).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
            })
    }

    /// Overwrite a parameter's data (checkpoint load, pos-embed surgery).
    pub fn set_data(&mut self, name: &str, shape: Vec<usize>, data: Vec<E>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let p = &mut self.entries[id];
        p.shape = shape;
        p.data = data;
        Ok(())
    }
}
