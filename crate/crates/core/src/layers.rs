//! Parameterized layers that read weights from, and accumulate gradients
//! into, a [`ParamSet`].

use rand::Rng;

use crate::error::Result;
use crate::ops::{self, LayerNormCache};
use crate::tensor::{trunc_normal, ParamId, ParamSet, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[inputs, outputs], INIT_STD),
        )?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self, params: &ParamSet) -> usize {
        params.value(self.weight).rows()
    }

    pub fn out_dim(&self, params: &ParamSet) -> usize {
        params.value(self.weight).cols()
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, params.value(self.weight), params.value(self.bias))
    }

    /// Accumulates weight and bias gradients (skipped for frozen weights);
    /// returns the input gradient.
    pub fn backward(&self, params: &mut ParamSet, x: &Tensor, dy: &Tensor) -> Tensor {
        if !params.param(self.weight).trainable && !params.param(self.bias).trainable {
            return ops::matmul_backward_input(params.value(self.weight), dy);
        }
        let (dx, dw, db) = ops::linear_backward(x, params.value(self.weight), dy);
        params.value_mut(self.weight).accumulate_grad(dw.data());
        params.value_mut(self.bias).accumulate_grad(db.data());
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn init(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        let gamma = params.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?;
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        ops::layer_norm(x, params.value(self.gamma), params.value(self.beta), LN_EPS)
    }

    pub fn backward(&self, params: &mut ParamSet, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let (dx, dg, db) = ops::layer_norm_backward(cache, params.value(self.gamma), dy);
        if params.param(self.gamma).trainable || params.param(self.beta).trainable {
            params.value_mut(self.gamma).accumulate_grad(dg.data());
            params.value_mut(self.beta).accumulate_grad(db.data());
        }
        dx
    }
}

/// Max over consecutive groups of `k` rows. Returns the pooled matrix and,
/// per output cell, the source row that won.
pub fn max_pool_groups(x: &Tensor, k: usize) -> (Tensor, Vec<usize>) {
    let groups = x.rows() / k;
    let d = x.cols();
    let mut out = Tensor::zeros(&[groups, d]);
    let mut winners = vec![0; groups * d];
    for g in 0..groups {
        for j in 0..d {
            let mut best = g * k;
            for r in g * k + 1..(g + 1) * k {
                if x.row(r)[j] > x.row(best)[j] {
                    best = r;
                }
            }
            out.row_mut(g)[j] = x.row(best)[j];
            winners[g * d + j] = best;
        }
    }
    (out, winners)
}

pub fn max_pool_groups_backward(rows: usize, winners: &[usize], dy: &Tensor) -> Tensor {
    let d = dy.cols();
    let mut dx = Tensor::zeros(&[rows, d]);
    for (cell, &src) in winners.iter().enumerate() {
        let (g, j) = (cell / d, cell % d);
        dx.row_mut(src)[j] += dy.row(g)[j];
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let x = Tensor::from_rows(&[
            vec![1.0, 5.0],
            vec![3.0, 2.0],
            vec![0.0, 0.0],
            vec![-1.0, 4.0],
        ])
        .unwrap();
        let (y, w) = max_pool_groups(&x, 2);
        assert_eq!(y.data(), &[3.0, 5.0, 0.0, 4.0]);
        let dx = max_pool_groups_backward(4, &w, &Tensor::filled(&[2, 2], 1.0));
        assert_eq!(dx.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
