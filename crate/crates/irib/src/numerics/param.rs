//! Named trainable parameters. A `ParamStore` is an ordered table of
//! parameters; order is part of the contract (flat coordinate indexing,
//! checkpoint layout, and gradient vectors all follow it).

use std::collections::BTreeMap;

use crate::numerics::tape::{Grads, Tape, Var};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// One trainable tensor. The gradient buffer always has the value's shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn at(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    /// Total scalar coordinate count across all parameters.
    pub fn coord_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Maps a flat coordinate to (parameter index, offset within it).
    pub fn locate(&self, coord: usize) -> Result<(usize, usize)> {
        let mut rest = coord;
        for (i, p) in self.params.iter().enumerate() {
            if rest < p.value.len() {
                return Ok((i, rest));
            }
            rest -= p.value.len();
        }
        Err(Error::invalid(format!("coordinate {coord} out of range")))
    }

    pub fn nudge(&mut self, coord: usize, delta: f64) -> Result<()> {
        let (i, off) = self.locate(coord)?;
        self.params[i].value.data_mut()[off] += delta;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for v in p.grad.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Records every parameter on a tape, as leaves when trainable or as
    /// constants when frozen. Returned handles parallel the store order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Adds tape cotangents into `Parameter.grad`, scaled. Handles produced
    /// by `bind` must be passed back in the same order.
    pub fn accumulate_grads(&mut self, grads: &Grads, vars: &[Var], scale: f64) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.wrt(v) {
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += scale * src;
                }
            }
        }
    }

    /// Flattened gradient vector in store order; unreached parameters
    /// contribute zeros.
    pub fn collect_grad_vector(&self, grads: &Grads, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coord_count());
        for (p, &v) in self.params.iter().zip(vars) {
            match grads.wrt(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
            }
        }
        out
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn grad_abs_sum(&self) -> f64 {
        self.params.iter().flat_map(|p| p.grad.data()).map(|v| v.abs()).sum()
    }

    /// Bitwise equality of all parameter values, in order.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}
