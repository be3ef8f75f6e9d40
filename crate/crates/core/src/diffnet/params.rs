use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::error::{Error, Result};

/// Flat trainable parameters with gradient slot and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub name: String,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            values: vec![0.0; len],
            grads: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn from_values(name: impl Into<String>, values: Vec<f64>) -> Self {
        let mut p = Self::zeros(name, values.len());
        p.values = values;
        p
    }

    /// Zero-mean Gaussian init.
    pub fn gaussian(name: impl Into<String>, len: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let values = (0..len).map(|_| normal.sample(rng)).collect();
        Self::from_values(name, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_grads(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.grads.len() {
            return Err(Error::length("gradient", g.len(), self.grads.len()));
        }
        for (a, b) in self.grads.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn check_consistent(&self) -> Result<()> {
        let n = self.values.len();
        if self.grads.len() != n || self.m.len() != n || self.v.len() != n {
            return Err(Error::Checkpoint(format!(
                "parameter vector `{}` has inconsistent array lengths",
                self.name
            )));
        }
        Ok(())
    }
}
