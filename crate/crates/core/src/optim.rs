//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Precision};

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Keyed by parameter name; present only for trainable parameters.
    pub moments: BTreeMap<String, Moments>,
    pub precision: Precision,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
            precision: Precision::F64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Applies one update to every trainable parameter of `sets`, then clears
    /// all gradient buffers. Fails before touching anything if a trainable
    /// parameter has no gradient.
    pub fn apply(&mut self, sets: &mut [&mut ParamSet]) -> Result<()> {
        for set in sets.iter() {
            if let Some(p) = set.iter().find(|p| p.trainable && p.value.grad().is_none()) {
                return Err(Error::Training(format!(
                    "trainable parameter `{}` has no gradient",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for set in sets.iter_mut() {
            for p in set.iter_mut() {
                if !p.trainable {
                    self.moments.remove(&p.name);
                    p.value.clear_grad();
                    continue;
                }
                let n = p.value.len();
                let m = self
                    .moments
                    .entry(p.name.clone())
                    .or_insert_with(|| Moments {
                        first: vec![0.0; n],
                        second: vec![0.0; n],
                    });
                let grad = p.value.grad().expect("checked above").to_vec();
                for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad[i];
                    m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * g;
                    m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * g * g;
                    let mhat = m.first[i] / bc1;
                    let vhat = m.second[i] / bc2;
                    *v = self
                        .precision
                        .round(*v - self.lr * mhat / (vhat.sqrt() + self.eps));
                }
                p.value.clear_grad();
            }
        }
        Ok(())
    }
}
