use std::collections::{BTreeMap, HashMap};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid("params", format!("duplicate parameter {name}"));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return crate::error::shape_err("set_param", self.tensors[id.0].shape(), value.shape());
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradient for one parameter: dense, or a sparse set of touched rows
/// (embedding tables).
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    pub fn add_assign(&mut self, other: &GradBuf) {
        match (&mut *self, other) {
            (GradBuf::Dense(a), GradBuf::Dense(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (GradBuf::Dense(a), GradBuf::Rows { width, rows }) => {
                for (r, v) in rows {
                    for (x, y) in a[r * width..(r + 1) * width].iter_mut().zip(v) {
                        *x += y;
                    }
                }
            }
            (GradBuf::Rows { width, rows }, GradBuf::Rows { rows: other_rows, .. }) => {
                for (r, v) in other_rows {
                    let slot = rows.entry(*r).or_insert_with(|| vec![0.0; *width]);
                    for (x, y) in slot.iter_mut().zip(v) {
                        *x += y;
                    }
                }
            }
            (GradBuf::Rows { width, rows }, GradBuf::Dense(b)) => {
                let mut dense = b.clone();
                for (r, v) in rows.iter() {
                    for (x, y) in dense[r * *width..(r + 1) * *width].iter_mut().zip(v) {
                        *x += y;
                    }
                }
                *self = GradBuf::Dense(dense);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        match self {
            GradBuf::Dense(a) => a.iter_mut().for_each(|x| *x *= c),
            GradBuf::Rows { rows, .. } => rows
                .values_mut()
                .for_each(|v| v.iter_mut().for_each(|x| *x *= c)),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        match self {
            GradBuf::Dense(a) => a.iter().map(|x| x * x).sum(),
            GradBuf::Rows { rows, .. } => rows.values().flatten().map(|x| x * x).sum(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            GradBuf::Dense(a) => a.iter().all(|x| x.is_finite()),
            GradBuf::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            GradBuf::Dense(a) => a.clone(),
            GradBuf::Rows { width, rows } => {
                let mut out = vec![0.0; len];
                for (r, v) in rows {
                    out[r * width..(r + 1) * width].copy_from_slice(v);
                }
                out
            }
        }
    }
}

/// Parameter gradients produced by one or more backward passes. A parameter
/// that took no part in the computation has no entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    bufs: BTreeMap<ParamId, GradBuf>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, buf: GradBuf) {
        match self.bufs.get_mut(&id) {
            Some(existing) => existing.add_assign(&buf),
            None => {
                self.bufs.insert(id, buf);
            }
        }
    }

    /// Adds `other` into `self`. Summation order is the caller's call order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, buf) in &other.bufs {
            match self.bufs.get_mut(id) {
                Some(existing) => existing.add_assign(buf),
                None => {
                    self.bufs.insert(*id, buf.clone());
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.bufs.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &GradBuf)> {
        self.bufs.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn scale(&mut self, c: f64) {
        self.bufs.values_mut().for_each(|b| b.scale(c));
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs.values().map(GradBuf::norm_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn dense(&self, id: ParamId, len: usize) -> Option<Vec<f64>> {
        self.bufs.get(&id).map(|b| b.to_dense(len))
    }
}
