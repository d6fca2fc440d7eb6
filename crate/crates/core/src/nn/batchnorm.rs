use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::param::{join, Param, ParamVisitor};
use super::Mode;
use crate::math;
use crate::tensor::{Matrix, Tensor};
use crate::{Error, Result};

/// Per-channel batch normalization over data laid out as
/// `n × channels × spatial`. With `spatial == 1` this is the 1-D variant.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    /// `None` for a bias-free normalization.
    pub beta: Option<Param>,
    pub running_mean: Param,
    pub running_var: Param,
    /// Number of training batches seen; zero means running statistics are unset.
    pub batches: Param,
    pub momentum: f64,
    pub eps: f64,
    name: String,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    spatial: usize,
}

impl BatchNorm {
    pub fn new(channels: usize, with_bias: bool, momentum: f64) -> Self {
        Self {
            channels,
            gamma: Param::filled(&[channels], 1.0),
            beta: with_bias.then(|| Param::filled(&[channels], 0.0)),
            running_mean: Param::buffer(&[channels], 0.0),
            running_var: Param::buffer(&[channels], 1.0),
            batches: Param::buffer(&[1], 0.0),
            momentum,
            eps: 1e-5,
            name: String::from("batch norm"),
            cache: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn is_initialized(&self) -> bool {
        self.batches.value[0] > 0.0
    }

    pub fn forward(&mut self, x: &[f64], n: usize, spatial: usize, mode: Mode) -> Result<Vec<f64>> {
        let c = self.channels;
        if x.len() != n * c * spatial {
            return Err(Error::Shape(format!("{}: {} values for {n}x{c}x{spatial}", self.name, x.len())));
        }
        let mut y = vec![0.0; x.len()];
        let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * spatial + p;
        match mode {
            Mode::Train => {
                let m = (n * spatial) as f64;
                let mut xhat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for s in 0..n {
                        for p in 0..spatial {
                            sum += x[idx(s, ch, p)];
                        }
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for s in 0..n {
                        for p in 0..spatial {
                            let d = x[idx(s, ch, p)] - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / m;
                    let is = 1.0 / math::sqrt(var + self.eps);
                    inv_std[ch] = is;
                    let g = self.gamma.value[ch];
                    let b = self.beta.as_ref().map_or(0.0, |b| b.value[ch]);
                    for s in 0..n {
                        for p in 0..spatial {
                            let i = idx(s, ch, p);
                            let xh = (x[i] - mean) * is;
                            xhat[i] = xh;
                            y[i] = g * xh + b;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let mo = self.momentum;
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - mo) * *rm + mo * mean;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - mo) * *rv + mo * unbiased;
                }
                self.batches.value[0] += 1.0;
                self.cache = Some(BnCache { xhat, inv_std, n, spatial });
            }
            Mode::Eval => {
                if !self.is_initialized() {
                    return Err(Error::Uninitialized(self.name.clone()));
                }
                for ch in 0..c {
                    let is = 1.0 / math::sqrt(self.running_var.value[ch] + self.eps);
                    let scale = self.gamma.value[ch] * is;
                    let shift = self.beta.as_ref().map_or(0.0, |b| b.value[ch]) - self.running_mean.value[ch] * scale;
                    for s in 0..n {
                        for p in 0..spatial {
                            let i = idx(s, ch, p);
                            y[i] = x[i] * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let cache = self.cache.as_ref().expect("batch norm backward needs a training forward");
        let (n, spatial, c) = (cache.n, cache.spatial, self.channels);
        let m = (n * spatial) as f64;
        let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * spatial + p;
        let mut dx = vec![0.0; dy.len()];
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for s in 0..n {
                for p in 0..spatial {
                    let i = idx(s, ch, p);
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * cache.xhat[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            if let Some(b) = self.beta.as_mut() {
                b.grad[ch] += sum_dy;
            }
            let k = g * cache.inv_std[ch] / m;
            for s in 0..n {
                for p in 0..spatial {
                    let i = idx(s, ch, p);
                    dx[i] = k * (m * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn forward_tensor(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let data = self.forward(&x.data, x.n, x.plane(), mode)?;
        Tensor::from_vec(x.n, x.c, x.h, x.w, data)
    }

    pub fn backward_tensor(&mut self, dy: &Tensor) -> Tensor {
        let data = self.backward(&dy.data);
        Tensor { n: dy.n, c: dy.c, h: dy.h, w: dy.w, data }
    }

    pub fn forward_matrix(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let data = self.forward(&x.data, x.rows, 1, mode)?;
        Matrix::from_vec(x.rows, x.cols, data)
    }

    pub fn backward_matrix(&mut self, dy: &Matrix) -> Matrix {
        Matrix { rows: dy.rows, cols: dy.cols, data: self.backward(&dy.data) }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        if let Some(b) = self.beta.as_mut() {
            f(&join(prefix, "beta"), b);
        }
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
        f(&join(prefix, "batches"), &mut self.batches);
    }
}
