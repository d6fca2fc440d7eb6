use rand::Rng;

use super::param::{join, Param, ParamVisitor};
use crate::math;
use crate::tensor::{gemm, Matrix};

/// Fully connected layer `y = x Wᵀ + b` on row-major batches.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`.
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Matrix>,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / math::sqrt(in_dim as f64);
        Self::with_weight(Param::uniform(&[out_dim, in_dim], bound, rng), bias)
    }

    pub fn with_weight(weight: Param, bias: bool) -> Self {
        let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
        let bias = bias.then(|| Param::filled(&[out_dim], 0.0));
        Self { in_dim, out_dim, weight, bias, input: None }
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        let y = self.apply(x);
        self.input = Some(x.clone());
        y
    }

    /// Forward pass without caching.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.in_dim, "linear input width");
        let mut y = Matrix::zeros(x.rows, self.out_dim);
        if let Some(b) = &self.bias {
            for r in 0..x.rows {
                y.row_mut(r).copy_from_slice(&b.value);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        gemm(x.rows, self.in_dim, self.out_dim, 1.0, &x.data, false, &self.weight.value, true, beta, &mut y.data);
        y
    }

    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        let x = self.input.as_ref().expect("linear backward before forward");
        gemm(self.out_dim, x.rows, self.in_dim, 1.0, &dy.data, true, &x.data, false, 1.0, &mut self.weight.grad);
        if let Some(b) = self.bias.as_mut() {
            for r in 0..dy.rows {
                for (g, d) in b.grad.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        let mut dx = Matrix::zeros(dy.rows, self.in_dim);
        gemm(dy.rows, self.out_dim, self.in_dim, 1.0, &dy.data, false, &self.weight.value, false, 0.0, &mut dx.data);
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}
