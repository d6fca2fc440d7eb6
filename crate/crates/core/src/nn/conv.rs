use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::param::{join, Param, ParamVisitor};
use crate::math;
use crate::tensor::{gemm, Tensor};

/// 2-D convolution over a whole batch via im2col and one matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_c × (in_c * kernel * kernel)`.
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<f64>,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    /// He-uniform initialized convolution.
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let bound = math::sqrt(6.0 / fan_in as f64);
        let weight = Param::uniform(&[out_c, fan_in], bound, rng);
        let bias = bias.then(|| Param::filled(&[out_c], 0.0));
        Self { in_c, out_c, kernel, stride, pad, weight, bias, cache: None }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.output_size(x.h, x.w);
        let p = oh * ow;
        let cols_n = x.n * p;
        let k = self.kernel;
        let mut cols = vec![0.0; self.rows() * cols_n];
        for s in 0..x.n {
            let img = x.sample(s);
            for ci in 0..self.in_c {
                let plane = &img[ci * x.h * x.w..(ci + 1) * x.h * x.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut cols[row * cols_n + s * p..row * cols_n + (s + 1) * p];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    dst[oy * ow + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut ymat = vec![0.0; self.out_c * cols_n];
        gemm(self.out_c, self.rows(), cols_n, 1.0, &self.weight.value, false, &cols, false, 0.0, &mut ymat);
        let mut y = Tensor::zeros(x.n, self.out_c, oh, ow);
        for s in 0..x.n {
            let out = y.sample_mut(s);
            for o in 0..self.out_c {
                let b = self.bias.as_ref().map_or(0.0, |b| b.value[o]);
                let src = &ymat[o * cols_n + s * p..o * cols_n + (s + 1) * p];
                for (d, v) in out[o * p..(o + 1) * p].iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        self.cache = Some(ConvCache { cols, n: x.n, h: x.h, w: x.w, oh, ow });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("conv backward before forward");
        let (n, oh, ow) = (cache.n, cache.oh, cache.ow);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (n, self.out_c, oh, ow), "conv output gradient shape");
        let p = oh * ow;
        let cols_n = n * p;
        let rows = self.rows();
        let mut dymat = vec![0.0; self.out_c * cols_n];
        for s in 0..n {
            let g = dy.sample(s);
            for o in 0..self.out_c {
                dymat[o * cols_n + s * p..o * cols_n + (s + 1) * p].copy_from_slice(&g[o * p..(o + 1) * p]);
            }
        }
        if let Some(b) = self.bias.as_mut() {
            for o in 0..self.out_c {
                b.grad[o] += dymat[o * cols_n..(o + 1) * cols_n].iter().sum::<f64>();
            }
        }
        gemm(self.out_c, cols_n, rows, 1.0, &dymat, false, &cache.cols, true, 1.0, &mut self.weight.grad);
        let mut dcols = vec![0.0; rows * cols_n];
        gemm(rows, self.out_c, cols_n, 1.0, &self.weight.value, true, &dymat, false, 0.0, &mut dcols);

        let (h, w, k) = (cache.h, cache.w, self.kernel);
        let mut dx = Tensor::zeros(n, self.in_c, h, w);
        for s in 0..n {
            let img = dx.sample_mut(s);
            for ci in 0..self.in_c {
                let plane = &mut img[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let src = &dcols[row * cols_n + s * p..row * cols_n + (s + 1) * p];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += src[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng;

    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = c.output_size(x.h, x.w);
        let mut y = Tensor::zeros(x.n, c.out_c, oh, ow);
        for s in 0..x.n {
            for o in 0..c.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = c.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c.in_c {
                            for ky in 0..c.kernel {
                                for kx in 0..c.kernel {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = c.weight.value[o * c.rows() + (ci * c.kernel + ky) * c.kernel + kx];
                                    acc += wv * x.sample(s)[(ci * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        y.sample_mut(s)[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::rng_for(seed, &[]);
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_direct_convolution() {
        let mut r = rng::rng_for(1, &[]);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 4, k, stride, pad, true, &mut r);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(2, 3, 7, 6, 2);
            let y = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_even_geometry() {
        let mut r = rng::rng_for(0, &[]);
        let conv = Conv2d::new(3, 16, 3, 2, 1, false, &mut r);
        assert_eq!(conv.output_size(64, 64), (32, 32));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::rng_for(3, &[]);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, true, &mut r);
        let x = random_tensor(2, 2, 5, 5, 4);
        let upstream = random_tensor(2, 3, 3, 3, 5);
        let loss = |c: &mut Conv2d, x: &Tensor| -> f64 {
            c.forward(x).data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
        };
        conv.forward(&x);
        let dx = conv.backward(&upstream);
        let err = gradcheck::relative_error(
            &dx.data,
            &gradcheck::numeric(&x.data, |v| {
                let xt = Tensor::from_vec(2, 2, 5, 5, v.to_vec()).unwrap();
                loss(&mut conv.clone(), &xt)
            }),
        );
        assert!(err < 1e-6, "input gradient error {err}");
        let analytic = conv.weight.grad.clone();
        let base = conv.clone();
        let numeric = gradcheck::numeric(&base.weight.value, |v| {
            let mut c = base.clone();
            c.weight.value = v.to_vec();
            loss(&mut c, &x)
        });
        assert!(gradcheck::relative_error(&analytic, &numeric) < 1e-6);
    }
}
