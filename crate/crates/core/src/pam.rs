//! Part attention: mask-guided average pooling of each part, a learned
//! importance score per part, softmax weights over the D parts, and the
//! part-guided feature `F_p = Σ w_i F_i + F_g`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::nn::{join, relu_backward, relu_forward, LayerNorm, ParamVisitor, WeightNormLinear};
use crate::proposals::PartMask;
use crate::tensor::{FeatureMap, Matrix, Tensor};
use crate::{Error, Result};

/// Tolerance on the simplex sum.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Soft weights over the D candidate parts; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    /// Softmax of raw importance scores.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut w = vec![0.0; scores.len()];
        math::softmax(scores, &mut w);
        Self(w)
    }

    pub fn uniform(d: usize) -> Self {
        Self(vec![1.0 / d as f64; d])
    }

    /// Wrap explicit weights, checking the simplex invariants.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if w.is_empty() || w.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Precondition(format!("attention weights {w:?} are not on the simplex")));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Mask-guided average pooling: per channel, the sum over masked cells
/// divided by the mask area.
pub fn mgap(fi: &FeatureMap, mask: &PartMask) -> Result<Vec<f64>> {
    if (fi.h, fi.w) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!("mask {}x{} on feature map {}x{}", mask.height(), mask.width(), fi.h, fi.w)));
    }
    Ok(mgap_slice(&fi.data, fi.c, fi.h * fi.w, mask))
}

fn mgap_slice(data: &[f64], channels: usize, plane: usize, mask: &PartMask) -> Vec<f64> {
    let area = mask.area() as f64;
    (0..channels)
        .map(|ch| {
            let p = &data[ch * plane..(ch + 1) * plane];
            mask.cells().iter().map(|&cell| p[cell]).sum::<f64>() / area
        })
        .collect()
}

/// The importance function: `mean(relu(LN(WN-FC(v))))`. One set of weights
/// shared by every part.
#[derive(Debug, Clone)]
pub struct Psi {
    pub fc: WeightNormLinear,
    pub ln: LayerNorm,
    relu_mask: Vec<bool>,
}

impl Psi {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self { fc: WeightNormLinear::new(channels, channels, rng), ln: LayerNorm::new(channels), relu_mask: Vec::new() }
    }

    pub fn channels(&self) -> usize {
        self.fc.in_dim
    }

    /// Score one pooled vector without touching the caches.
    pub fn score(&self, v: &[f64]) -> f64 {
        let rows = Matrix::from_vec(1, v.len(), v.to_vec()).expect("one row");
        self.clone().forward(&rows)[0]
    }

    /// Score every row of `pooled`.
    pub fn forward(&mut self, pooled: &Matrix) -> Vec<f64> {
        let u = self.fc.forward(pooled);
        let mut l = self.ln.forward(&u);
        self.relu_mask = relu_forward(&mut l.data);
        let c = l.cols as f64;
        (0..l.rows).map(|r| l.row(r).iter().sum::<f64>() / c).collect()
    }

    /// Back-propagate score gradients to the pooled inputs.
    pub fn backward(&mut self, dscores: &[f64]) -> Matrix {
        let c = self.channels();
        let mut dl = Matrix::zeros(dscores.len(), c);
        for (r, &g) in dscores.iter().enumerate() {
            dl.row_mut(r).iter_mut().for_each(|v| *v = g / c as f64);
        }
        relu_backward(&mut dl.data, &self.relu_mask);
        let du = self.ln.backward(&dl);
        self.fc.backward(&du)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.fc.visit(&join(prefix, "fc"), f);
        self.ln.visit(&join(prefix, "ln"), f);
    }
}

/// Softmax over the ψ scores of the D pooled part vectors.
pub fn attention_weights(pooled: &[Vec<f64>], psi: &Psi) -> Result<AttentionWeights> {
    if pooled.is_empty() {
        return Err(Error::Precondition("attention over zero parts".into()));
    }
    let m = Matrix::from_rows(pooled)?;
    if m.cols != psi.channels() {
        return Err(Error::Shape(format!("pooled width {} for ψ over {} channels", m.cols, psi.channels())));
    }
    let scores = psi.clone().forward(&m);
    Ok(AttentionWeights::from_scores(&scores))
}

/// `F_p = Σ_i w_i F_i + F_g`.
pub fn compose_part_feature(fg: &FeatureMap, parts: &[FeatureMap], w: &AttentionWeights) -> Result<FeatureMap> {
    if parts.len() != w.len() {
        return Err(Error::Shape(format!("{} part maps for {} weights", parts.len(), w.len())));
    }
    let mut acc = FeatureMap::zeros(fg.h, fg.w, fg.c);
    for (fi, &wi) in parts.iter().zip(w.as_slice()) {
        fg.check_same_geometry(fi)?;
        for (a, v) in acc.data.iter_mut().zip(&fi.data) {
            *a += wi * v;
        }
    }
    for (a, v) in acc.data.iter_mut().zip(&fg.data) {
        *a += v;
    }
    Ok(acc)
}

/// An 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Channel mean of `F_p`, min-max scaled to `0..=255`. A constant map gives
/// all zeros.
pub fn pam_heatmap(fp: &FeatureMap) -> GrayMap {
    let plane = fp.h * fp.w;
    let mut mean = vec![0.0; plane];
    for ch in 0..fp.c {
        for (m, v) in mean.iter_mut().zip(fp.channel(ch)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= fp.c as f64);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        mean.iter().map(|m| math::round((m - lo) / (hi - lo) * 255.0) as u8).collect()
    } else {
        vec![0; plane]
    };
    GrayMap { h: fp.h, w: fp.w, data }
}

/// How the part weights are produced.
#[derive(Debug, Clone)]
pub enum WeightMode {
    Learned(Psi),
    Uniform,
}

/// The batched attention layer used inside the model.
#[derive(Debug, Clone)]
pub struct PartAttention {
    pub mode: WeightMode,
    cache: Option<PamCache>,
}

#[derive(Debug, Clone)]
struct PamCache {
    fg: Tensor,
    masks: Vec<Vec<PartMask>>,
    weights: Vec<AttentionWeights>,
    /// Per sample, `Σ_d w_d M_d` over the cells.
    coverage: Vec<Vec<f64>>,
}

impl PartAttention {
    pub fn learned<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self { mode: WeightMode::Learned(Psi::new(channels, rng)), cache: None }
    }

    pub fn uniform() -> Self {
        Self { mode: WeightMode::Uniform, cache: None }
    }

    /// Part-guided features for a batch. `masks[s]` holds the D masks of sample `s`.
    pub fn forward(&mut self, fg: &Tensor, masks: &[Vec<PartMask>]) -> Result<(Tensor, Vec<AttentionWeights>)> {
        if masks.len() != fg.n {
            return Err(Error::Shape(format!("{} mask sets for a batch of {}", masks.len(), fg.n)));
        }
        let d = masks.first().map_or(0, Vec::len);
        if d == 0 || masks.iter().any(|m| m.len() != d) {
            return Err(Error::Shape("every sample needs the same non-zero number of part masks".into()));
        }
        let plane = fg.plane();
        for m in masks.iter().flatten() {
            if (m.height(), m.width()) != (fg.h, fg.w) {
                return Err(Error::Shape(format!(
                    "mask {}x{} on feature map {}x{}",
                    m.height(),
                    m.width(),
                    fg.h,
                    fg.w
                )));
            }
        }
        let weights: Vec<AttentionWeights> = match &mut self.mode {
            WeightMode::Uniform => (0..fg.n).map(|_| AttentionWeights::uniform(d)).collect(),
            WeightMode::Learned(psi) => {
                let mut pooled = Matrix::zeros(fg.n * d, fg.c);
                for (s, sample_masks) in masks.iter().enumerate() {
                    for (k, m) in sample_masks.iter().enumerate() {
                        pooled.row_mut(s * d + k).copy_from_slice(&mgap_slice(fg.sample(s), fg.c, plane, m));
                    }
                }
                let scores = psi.forward(&pooled);
                scores.chunks(d).map(AttentionWeights::from_scores).collect()
            }
        };
        let mut fp = fg.clone();
        let mut coverage = Vec::with_capacity(fg.n);
        for (s, sample_masks) in masks.iter().enumerate() {
            let mut cov = vec![0.0; plane];
            for (m, &w) in sample_masks.iter().zip(weights[s].as_slice()) {
                for &cell in m.cells() {
                    cov[cell] += w;
                }
            }
            let out = fp.sample_mut(s);
            for ch in 0..fg.c {
                for (v, a) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&cov) {
                    *v *= 1.0 + a;
                }
            }
            coverage.push(cov);
        }
        self.cache = Some(PamCache { fg: fg.clone(), masks: masks.to_vec(), weights: weights.clone(), coverage });
        Ok((fp, weights))
    }

    /// Gradient with respect to `F_g` given the gradient of `F_p`.
    pub fn backward(&mut self, dfp: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("attention backward before forward");
        let fg = &cache.fg;
        let plane = fg.plane();
        let d = cache.masks[0].len();
        let mut dfg = dfp.clone();
        let mut dscores = vec![0.0; fg.n * d];
        for s in 0..fg.n {
            let (g, x) = (dfp.sample(s), fg.sample(s));
            let mut dcov = vec![0.0; plane];
            for ch in 0..fg.c {
                for cell in 0..plane {
                    dcov[cell] += g[ch * plane + cell] * x[ch * plane + cell];
                }
            }
            let cov = &cache.coverage[s];
            let out = dfg.sample_mut(s);
            for ch in 0..fg.c {
                for (v, a) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(cov) {
                    *v *= 1.0 + a;
                }
            }
            let dw: Vec<f64> = cache.masks[s].iter().map(|m| m.cells().iter().map(|&c| dcov[c]).sum()).collect();
            let w = cache.weights[s].as_slice();
            let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for k in 0..d {
                dscores[s * d + k] = w[k] * (dw[k] - dot);
            }
        }
        if let WeightMode::Learned(psi) = &mut self.mode {
            let dpooled = psi.backward(&dscores);
            for s in 0..fg.n {
                let out = dfg.sample_mut(s);
                for (k, m) in cache.masks[s].iter().enumerate() {
                    let area = m.area() as f64;
                    let row = dpooled.row(s * d + k);
                    for ch in 0..fg.c {
                        let g = row[ch] / area;
                        for &cell in m.cells() {
                            out[ch * plane + cell] += g;
                        }
                    }
                }
            }
        }
        dfg
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        if let WeightMode::Learned(psi) = &mut self.mode {
            psi.visit(&join(prefix, "psi"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::proposals::apply_mask;
    use crate::rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut r = rng::rng_for(seed, &[]);
        FeatureMap { h, w, c, data: (0..h * w * c).map(|_| r.gen_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn mgap_over_top_row() {
        let f = FeatureMap::from_hwc(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = PartMask::from_grid(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(mgap(&f, &m).unwrap(), vec![1.5]);
    }

    #[test]
    fn mgap_full_mask_is_gap_and_single_cell_is_that_cell() {
        let f = random_map(4, 4, 3, 1);
        let full = mgap(&f, &PartMask::full(4, 4)).unwrap();
        for (a, b) in full.iter().zip(crate::aggregation::gap(&f)) {
            assert!((a - b).abs() < 1e-15);
        }
        let one = mgap(&f, &PartMask::single_cell(4, 4, 2, 1)).unwrap();
        assert_eq!(one, vec![f.at(2, 1, 0), f.at(2, 1, 1), f.at(2, 1, 2)]);
    }

    #[test]
    fn psi_is_zero_for_zero_weights_and_input() {
        let mut r = rng::rng_for(0, &[]);
        let mut psi = Psi::new(4, &mut r);
        psi.fc.magnitude.value.iter_mut().for_each(|g| *g = 0.0);
        assert_eq!(psi.score(&[0.0; 4]), 0.0);
        let v = [0.3, -0.1, 0.7, 0.2];
        let fresh = Psi::new(4, &mut r);
        assert_eq!(fresh.score(&v), fresh.score(&v));
    }

    #[test]
    fn psi_gradients_match_finite_differences() {
        let mut r = rng::rng_for(11, &[]);
        let mut psi = Psi::new(5, &mut r);
        let pooled = Matrix::from_vec(3, 5, (0..15).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let up = [0.7, -1.3, 0.4];
        let probe = psi.clone();
        psi.forward(&pooled);
        let dv = psi.backward(&up);
        let f = |p: &mut Psi, m: &Matrix| p.forward(m).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let num =
            gradcheck::numeric(&pooled.data, |v| f(&mut probe.clone(), &Matrix::from_vec(3, 5, v.to_vec()).unwrap()));
        assert!(gradcheck::relative_error(&dv.data, &num) < 1e-4);
        let num_dir = gradcheck::numeric(&probe.fc.direction.value, |v| {
            let mut p = probe.clone();
            p.fc.direction.value = v.to_vec();
            f(&mut p, &pooled)
        });
        assert!(gradcheck::relative_error(&psi.fc.direction.grad, &num_dir) < 1e-4);
    }

    #[test]
    fn identical_parts_get_uniform_weights() {
        let mut r = rng::rng_for(3, &[]);
        let psi = Psi::new(4, &mut r);
        let v = vec![0.2, -0.4, 0.9, 0.1];
        let w = attention_weights(&vec![v; 5], &psi).unwrap();
        for &x in w.as_slice() {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_ln2_and_zero_scores() {
        let w = AttentionWeights::from_scores(&[math::ln(2.0), 0.0]);
        assert!((w.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = AttentionWeights::from_scores(&[math::ln(2.0) + 40.0, 40.0]);
        for (a, b) in w.as_slice().iter().zip(shifted.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_select_a_single_part_exactly() {
        let fg = random_map(3, 3, 2, 5);
        let parts: Vec<FeatureMap> = (0..3).map(|i| random_map(3, 3, 2, 10 + i)).collect();
        let w = AttentionWeights::new(vec![0.0, 1.0, 0.0]).unwrap();
        let fp = compose_part_feature(&fg, &parts, &w).unwrap();
        for i in 0..fp.data.len() {
            assert_eq!(fp.data[i], parts[1].data[i] + fg.data[i]);
        }
    }

    #[test]
    fn full_frame_parts_double_the_global_map() {
        let fg = random_map(4, 4, 3, 6);
        let parts: Vec<FeatureMap> = (0..3).map(|_| apply_mask(&fg, &PartMask::full(4, 4)).unwrap()).collect();
        let w = AttentionWeights::new(vec![0.2, 0.5, 0.3]).unwrap();
        let fp = compose_part_feature(&fg, &parts, &w).unwrap();
        for (a, b) in fp.data.iter().zip(&fg.data) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn half_masks_with_equal_weights() {
        let fg = random_map(2, 4, 2, 7);
        let left = PartMask::from_grid(2, 4, vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        let top_right = PartMask::from_grid(2, 4, vec![0, 0, 1, 1, 0, 0, 0, 0]).unwrap();
        let parts = vec![apply_mask(&fg, &left).unwrap(), apply_mask(&fg, &top_right).unwrap()];
        let fp = compose_part_feature(&fg, &parts, &AttentionWeights::uniform(2)).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                let covered = left.contains(y, x) || top_right.contains(y, x);
                let factor = if covered { 1.5 } else { 1.0 };
                for ch in 0..2 {
                    assert!((fp.at(y, x, ch) - factor * fg.at(y, x, ch)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn heatmap_edge_cases() {
        let constant = FeatureMap::from_hwc(2, 2, 2, &[3.0; 8]).unwrap();
        assert_eq!(pam_heatmap(&constant).data, vec![0; 4]);
        let mut hot = FeatureMap::zeros(3, 3, 2);
        *hot.at_mut(1, 2, 0) = 4.0;
        *hot.at_mut(1, 2, 1) = 2.0;
        let g = pam_heatmap(&hot);
        assert_eq!(g.data, vec![0, 0, 0, 0, 0, 255, 0, 0, 0]);
    }

    #[test]
    fn heatmap_matches_per_cell_computation() {
        let f = random_map(4, 5, 3, 8);
        let g = pam_heatmap(&f);
        let means: Vec<f64> = (0..20)
            .map(|cell| (f.at(cell / 5, cell % 5, 0) + f.at(cell / 5, cell % 5, 1) + f.at(cell / 5, cell % 5, 2)) / 3.0)
            .collect();
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (cell, m) in means.iter().enumerate() {
            let want = ((m - lo) / (hi - lo) * 255.0).round() as i32;
            assert!((g.data[cell] as i32 - want).abs() <= 1, "cell {cell}");
        }
    }

    #[test]
    fn batched_layer_matches_single_image_functions() {
        let mut r = rng::rng_for(12, &[]);
        let mut layer = PartAttention::learned(3, &mut r);
        let fg = random_map(4, 4, 3, 13);
        let masks = vec![
            PartMask::from_grid(4, 4, (0..16).map(|i| u8::from(i < 6)).collect()).unwrap(),
            PartMask::single_cell(4, 4, 3, 3),
            PartMask::full(4, 4),
        ];
        let batch = Tensor::from_maps(std::slice::from_ref(&fg)).unwrap();
        let (fp, w) = layer.forward(&batch, std::slice::from_ref(&masks)).unwrap();
        let WeightMode::Learned(psi) = &layer.mode else { unreachable!() };
        let pooled: Vec<Vec<f64>> = masks.iter().map(|m| mgap(&fg, m).unwrap()).collect();
        let w_ref = attention_weights(&pooled, psi).unwrap();
        let parts: Vec<FeatureMap> = masks.iter().map(|m| apply_mask(&fg, m).unwrap()).collect();
        let fp_ref = compose_part_feature(&fg, &parts, &w_ref).unwrap();
        for (a, b) in w[0].as_slice().iter().zip(w_ref.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in fp.data.iter().zip(&fp_ref.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
