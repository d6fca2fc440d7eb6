use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::param::{join, Param, ParamVisitor};
use crate::math;
use crate::tensor::{gemm, Matrix};

/// Normalization over the feature dimension of each row, with learned
/// per-feature scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
    cache: Option<(Vec<f64>, Vec<f64>)>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { dim, gamma: Param::filled(&[dim], 1.0), beta: Param::filled(&[dim], 0.0), eps: 1e-5, cache: None }
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.dim, "layer norm width");
        let d = self.dim as f64;
        let mut y = Matrix::zeros(x.rows, x.cols);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.rows];
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / math::sqrt(var + self.eps);
            inv_std[r] = is;
            for j in 0..self.dim {
                let xh = (row[j] - mean) * is;
                xhat[r * self.dim + j] = xh;
                y.data[r * self.dim + j] = self.gamma.value[j] * xh + self.beta.value[j];
            }
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        let (xhat, inv_std) = self.cache.as_ref().expect("layer norm backward before forward");
        let d = self.dim as f64;
        let mut dx = Matrix::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let g = dy.row(r);
            let xh = &xhat[r * self.dim..(r + 1) * self.dim];
            let (mut sum, mut sum_xh) = (0.0, 0.0);
            for j in 0..self.dim {
                self.gamma.grad[j] += g[j] * xh[j];
                self.beta.grad[j] += g[j];
                let dxh = g[j] * self.gamma.value[j];
                sum += dxh;
                sum_xh += dxh * xh[j];
            }
            let out = dx.row_mut(r);
            for j in 0..self.dim {
                let dxh = g[j] * self.gamma.value[j];
                out[j] = inv_std[r] / d * (d * dxh - sum - xh[j] * sum_xh);
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Fully connected layer with weight normalization: each output row is
/// `g_o · v_o / ‖v_o‖`.
#[derive(Debug, Clone)]
pub struct WeightNormLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Direction, `out_dim × in_dim`.
    pub direction: Param,
    /// Per-output magnitude.
    pub magnitude: Param,
    pub bias: Param,
    cache: Option<(Matrix, Vec<f64>, Vec<f64>)>,
}

impl WeightNormLinear {
    /// Direction uniform in `±1/sqrt(fan_in)`, magnitude initialised to the
    /// direction norm (so the effective weight starts equal to the direction),
    /// zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / math::sqrt(in_dim as f64);
        let direction = Param::uniform(&[out_dim, in_dim], bound, rng);
        let magnitude = Param::new(&[out_dim], row_norms(&direction.value, in_dim));
        Self { in_dim, out_dim, direction, magnitude, bias: Param::filled(&[out_dim], 0.0), cache: None }
    }

    /// The effective weight matrix.
    pub fn weight(&self) -> Vec<f64> {
        let norms = row_norms(&self.direction.value, self.in_dim);
        let mut w = self.direction.value.clone();
        for o in 0..self.out_dim {
            let s = if norms[o] > 0.0 { self.magnitude.value[o] / norms[o] } else { 0.0 };
            w[o * self.in_dim..(o + 1) * self.in_dim].iter_mut().for_each(|v| *v *= s);
        }
        w
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.in_dim, "weight-norm input width");
        let w = self.weight();
        let mut y = Matrix::zeros(x.rows, self.out_dim);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(x.rows, self.in_dim, self.out_dim, 1.0, &x.data, false, &w, true, 1.0, &mut y.data);
        let norms = row_norms(&self.direction.value, self.in_dim);
        self.cache = Some((x.clone(), w, norms));
        y
    }

    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        let (x, w, norms) = self.cache.as_ref().expect("weight-norm backward before forward");
        let (i, o) = (self.in_dim, self.out_dim);
        let mut dw = vec![0.0; o * i];
        gemm(o, x.rows, i, 1.0, &dy.data, true, &x.data, false, 0.0, &mut dw);
        for r in 0..dy.rows {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        for row in 0..o {
            let n = norms[row];
            if n == 0.0 {
                continue;
            }
            let v = &self.direction.value[row * i..(row + 1) * i];
            let dwr = &dw[row * i..(row + 1) * i];
            let proj: f64 = dwr.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / n;
            self.magnitude.grad[row] += proj;
            let g = self.magnitude.value[row];
            let dv = &mut self.direction.grad[row * i..(row + 1) * i];
            for j in 0..i {
                dv[j] += g / n * (dwr[j] - proj * v[j] / n);
            }
        }
        let mut dx = Matrix::zeros(dy.rows, i);
        gemm(dy.rows, o, i, 1.0, &dy.data, false, w, false, 0.0, &mut dx.data);
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "direction"), &mut self.direction);
        f(&join(prefix, "magnitude"), &mut self.magnitude);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

fn row_norms(values: &[f64], cols: usize) -> Vec<f64> {
    values.chunks(cols).map(|r| math::sqrt(r.iter().map(|v| v * v).sum())).collect()
}
