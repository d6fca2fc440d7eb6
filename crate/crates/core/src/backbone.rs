//! Global feature extractor: a stack of 3×3 convolution blocks producing the
//! global feature map, plus the plain global-average-pooled embedding.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::aggregation;
use crate::nn::{join, relu_backward, relu_forward, BatchNorm, Conv2d, Mode, ParamVisitor};
use crate::tensor::{FeatureMap, Tensor};
use crate::{Error, Result};

/// Convolution, batch normalization, rectifier.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    relu_mask: Vec<bool>,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, stride: usize, momentum: f64, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_c, out_c, 3, stride, 1, false, rng),
            bn: BatchNorm::new(out_c, true, momentum).named("backbone batch norm"),
            relu_mask: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x);
        let mut y = self.bn.forward_tensor(&y, mode)?;
        self.relu_mask = relu_forward(&mut y.data);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        relu_backward(&mut g.data, &self.relu_mask);
        let g = self.bn.backward_tensor(&g);
        self.conv.backward(&g)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Backbone {
    /// Blocks `in → widths[0] → … → channels`, each halving the resolution
    /// except the last when `remove_last_stride` is set.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        widths: &[usize],
        channels: usize,
        remove_last_stride: bool,
        momentum: f64,
        rng: &mut R,
    ) -> Self {
        let mut dims: Vec<usize> = Vec::with_capacity(widths.len() + 2);
        dims.push(in_channels);
        dims.extend_from_slice(widths);
        dims.push(channels);
        let last = dims.len() - 2;
        let blocks = (0..dims.len() - 1)
            .map(|i| {
                let stride = if i == last && remove_last_stride { 1 } else { 2 };
                ConvBlock::new(dims[i], dims[i + 1], stride, momentum, rng)
            })
            .collect();
        Self { blocks, in_channels, out_channels: channels }
    }

    pub fn output_geometry(&self, h: usize, w: usize) -> (usize, usize) {
        self.blocks.iter().fold((h, w), |(h, w), b| b.conv.output_size(h, w))
    }

    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        if images.c != self.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {}",
                self.in_channels, images.c
            )));
        }
        let (oh, ow) = self.output_geometry(images.h, images.w);
        if oh < 2 || ow < 2 {
            return Err(Error::Shape(format!("{}x{} input collapses to a {oh}x{ow} feature map", images.h, images.w)));
        }
        let mut x = self.blocks[0].forward(images, mode)?;
        for b in &mut self.blocks[1..] {
            x = b.forward(&x, mode)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv.visit(&join(&p, "conv"), f);
            b.bn.visit(&join(&p, "bn"), f);
        }
    }
}

/// Global average pooling of the global feature map; the embedding of the
/// plain global-feature model.
pub fn baseline_embed(fg: &FeatureMap) -> Vec<f64> {
    aggregation::gap(fg)
}
