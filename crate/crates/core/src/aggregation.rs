//! Feature aggregation: channel fusion of global and part-guided maps, the
//! refine block (squeeze-and-excitation followed by a projection residual
//! block), global average pooling and the bias-free BN neck.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{
    join, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, BatchNorm, Conv2d, Linear, Mode, ParamVisitor,
};
use crate::tensor::{FeatureMap, Matrix, Tensor};
use crate::{Error, Result};

/// Concatenate along channels, `fg` first.
pub fn fuse(fg: &FeatureMap, fp: &FeatureMap) -> Result<FeatureMap> {
    if (fg.h, fg.w) != (fp.h, fp.w) {
        return Err(Error::Shape(format!("cannot fuse {}x{} with {}x{}", fg.h, fg.w, fp.h, fp.w)));
    }
    let mut data = Vec::with_capacity(fg.data.len() + fp.data.len());
    data.extend_from_slice(&fg.data);
    data.extend_from_slice(&fp.data);
    Ok(FeatureMap { h: fg.h, w: fg.w, c: fg.c + fp.c, data })
}

/// Inverse of [`fuse`]: the first `channels` channels and the rest.
pub fn split(f: &FeatureMap, channels: usize) -> (FeatureMap, FeatureMap) {
    let cut = channels * f.h * f.w;
    (
        FeatureMap { h: f.h, w: f.w, c: channels, data: f.data[..cut].to_vec() },
        FeatureMap { h: f.h, w: f.w, c: f.c - channels, data: f.data[cut..].to_vec() },
    )
}

/// Spatial mean per channel.
pub fn gap(f: &FeatureMap) -> Vec<f64> {
    let p = (f.h * f.w) as f64;
    (0..f.c).map(|ch| f.channel(ch).iter().sum::<f64>() / p).collect()
}

pub(crate) fn fuse_batch(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "fuse batch geometry");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for s in 0..a.n {
        let dst = out.sample_mut(s);
        let cut = a.sample_len();
        dst[..cut].copy_from_slice(a.sample(s));
        dst[cut..].copy_from_slice(b.sample(s));
    }
    out
}

pub(crate) fn split_batch(t: &Tensor, channels: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(t.n, channels, t.h, t.w);
    let mut b = Tensor::zeros(t.n, t.c - channels, t.h, t.w);
    let cut = channels * t.plane();
    for s in 0..t.n {
        a.sample_mut(s).copy_from_slice(&t.sample(s)[..cut]);
        b.sample_mut(s).copy_from_slice(&t.sample(s)[cut..]);
    }
    (a, b)
}

pub(crate) fn gap_batch(t: &Tensor) -> Matrix {
    let p = t.plane();
    let mut out = Matrix::zeros(t.n, t.c);
    for s in 0..t.n {
        let x = t.sample(s);
        for ch in 0..t.c {
            out.data[s * t.c + ch] = x[ch * p..(ch + 1) * p].iter().sum::<f64>() / p as f64;
        }
    }
    out
}

pub(crate) fn gap_batch_backward(d: &Matrix, h: usize, w: usize) -> Tensor {
    let p = h * w;
    let mut out = Tensor::zeros(d.rows, d.cols, h, w);
    for s in 0..d.rows {
        let dst = out.sample_mut(s);
        for ch in 0..d.cols {
            let g = d.get(s, ch) / p as f64;
            dst[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = g);
        }
    }
    out
}

/// Squeeze (GAP), excite (bottleneck FC, rectifier, FC, sigmoid), rescale.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub squeeze: Linear,
    pub excite: Linear,
    cache: Option<SeCache>,
}

#[derive(Debug, Clone)]
struct SeCache {
    input: Tensor,
    hidden_mask: Vec<bool>,
    gates: Matrix,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            squeeze: Linear::new(channels, hidden, true, rng),
            excite: Linear::new(hidden, channels, true, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let pooled = gap_batch(x);
        let mut hidden = self.squeeze.forward(&pooled);
        let hidden_mask = relu_forward(&mut hidden.data);
        let mut gates = self.excite.forward(&hidden);
        sigmoid_forward(&mut gates.data);
        let mut y = x.clone();
        let p = x.plane();
        for s in 0..x.n {
            let out = y.sample_mut(s);
            for ch in 0..x.c {
                let g = gates.get(s, ch);
                out[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v *= g);
            }
        }
        self.cache = Some(SeCache { input: x.clone(), hidden_mask, gates });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("SE backward before forward");
        let x = &cache.input;
        let p = x.plane();
        let mut dx = dy.clone();
        let mut dgates = Matrix::zeros(x.n, x.c);
        for s in 0..x.n {
            let (xs, gs) = (x.sample(s), dy.sample(s));
            let out = dx.sample_mut(s);
            for ch in 0..x.c {
                let g = cache.gates.get(s, ch);
                let range = ch * p..(ch + 1) * p;
                dgates.data[s * x.c + ch] = xs[range.clone()].iter().zip(&gs[range.clone()]).map(|(a, b)| a * b).sum();
                out[range].iter_mut().for_each(|v| *v *= g);
            }
        }
        sigmoid_backward(&mut dgates.data, &cache.gates.data);
        let mut dhidden = self.excite.backward(&dgates);
        relu_backward(&mut dhidden.data, &cache.hidden_mask);
        let dpooled = self.squeeze.backward(&dhidden);
        dx.add_assign(&gap_batch_backward(&dpooled, x.h, x.w));
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.excite.visit(&join(prefix, "excite"), f);
    }
}

/// `BN(conv3×3(relu(BN(conv1×1(x))))) + conv1×1_shortcut(x)`.
///
/// The second normalization starts with zero scale, so a fresh block
/// outputs exactly its projection shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub reduce: Conv2d,
    pub bn_reduce: BatchNorm,
    pub conv: Conv2d,
    pub bn_conv: BatchNorm,
    pub shortcut: Conv2d,
    relu_mask: Vec<bool>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, momentum: f64, rng: &mut R) -> Self {
        let mut bn_conv = BatchNorm::new(c_out, true, momentum).named("refine batch norm");
        bn_conv.gamma.value.iter_mut().for_each(|g| *g = 0.0);
        Self {
            reduce: Conv2d::new(c_in, c_out, 1, 1, 0, false, rng),
            bn_reduce: BatchNorm::new(c_out, true, momentum).named("refine batch norm"),
            conv: Conv2d::new(c_out, c_out, 3, 1, 1, false, rng),
            bn_conv,
            shortcut: Conv2d::new(c_in, c_out, 1, 1, 0, true, rng),
            relu_mask: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let r = self.reduce.forward(x);
        let mut r = self.bn_reduce.forward_tensor(&r, mode)?;
        self.relu_mask = relu_forward(&mut r.data);
        let r = self.conv.forward(&r);
        let mut out = self.bn_conv.forward_tensor(&r, mode)?;
        out.add_assign(&self.shortcut.forward(x));
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.bn_conv.backward_tensor(dy);
        let mut g = self.conv.backward(&g);
        relu_backward(&mut g.data, &self.relu_mask);
        let g = self.bn_reduce.backward_tensor(&g);
        let mut dx = self.reduce.backward(&g);
        dx.add_assign(&self.shortcut.backward(dy));
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.bn_reduce.visit(&join(prefix, "bn_reduce"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn_conv.visit(&join(prefix, "bn_conv"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }
}

/// SE block followed by a residual block changing `c_in` to `c_out` channels.
#[derive(Debug, Clone)]
pub struct Refine {
    pub c_in: usize,
    pub c_out: usize,
    pub se: SeBlock,
    pub residual: ResidualBlock,
}

impl Refine {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, reduction: usize, momentum: f64, rng: &mut R) -> Self {
        Self {
            c_in,
            c_out,
            se: SeBlock::new(c_in, reduction, rng),
            residual: ResidualBlock::new(c_in, c_out, momentum, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.c != self.c_in {
            return Err(Error::Shape(format!("refine expects {} channels, got {}", self.c_in, x.c)));
        }
        let s = self.se.forward(x);
        self.residual.forward(&s, mode)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.residual.backward(dy);
        self.se.backward(&g)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.se.visit(&join(prefix, "se"), f);
        self.residual.visit(&join(prefix, "residual"), f);
    }
}

/// Bias-free batch normalization of the fused embedding.
#[derive(Debug, Clone)]
pub struct BnNeck {
    pub bn: BatchNorm,
}

impl BnNeck {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self { bn: BatchNorm::new(dim, false, momentum).named("BN neck") }
    }

    pub fn forward(&mut self, e: &Matrix, mode: Mode) -> Result<Matrix> {
        self.bn.forward_matrix(e, mode)
    }

    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        self.bn.backward_matrix(dy)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.bn.visit(prefix, f);
    }
}
