//! Named parameter storage shared by every learned module.

use std::collections::HashMap;

use rand::Rng;

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.values[i] = value,
            None => {
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .iter()
            .map(|(n, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (n.to_string(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Glorot-uniform `fan_in x fan_out` weight plus a zero `1 x fan_out` bias.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::matrix(fan_in, fan_out, w).expect("weight shape"),
        );
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out]));
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Replaces the variable bound to `name`.
    pub fn with(mut self, name: &str, var: Var) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }

    /// `x W + b` with the `{prefix}.weight` / `{prefix}.bias` pair.
    pub fn linear(&self, tape: &Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Gradients for every parameter of `params`, zero where none flowed.
    pub fn gradients(&self, tape: &Tape, params: &ParamSet) -> Vec<Tensor> {
        params
            .iter()
            .map(|(name, value)| {
                self.vars
                    .get(name)
                    .and_then(|&v| tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect()
    }
}
