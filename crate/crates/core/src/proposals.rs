//! Part proposals: a noisy stand-in for a part detector, top-D selection,
//! and rasterization of boxes into masks on the feature-map grid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, PartBox};
use crate::math;
use crate::rng;
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// A binary mask aligned with the backbone feature map. Always covers at
/// least one cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMask {
    h: usize,
    w: usize,
    grid: Vec<u8>,
    cells: Vec<usize>,
}

impl PartMask {
    pub fn from_grid(h: usize, w: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != h * w {
            return Err(Error::Shape(format!("mask grid of {} cells for {h}x{w}", grid.len())));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask entries must be 0 or 1".into()));
        }
        let cells: Vec<usize> = grid.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
        if cells.is_empty() {
            return Err(Error::Shape("mask must cover at least one cell".into()));
        }
        Ok(Self { h, w, grid, cells })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self { h, w, grid: vec![1; h * w], cells: (0..h * w).collect() }
    }

    pub fn single_cell(h: usize, w: usize, y: usize, x: usize) -> Self {
        let mut grid = vec![0; h * w];
        grid[y * w + x] = 1;
        Self { h, w, grid, cells: vec![y * w + x] }
    }

    fn rect(h: usize, w: usize, rows: (usize, usize), cols: (usize, usize)) -> Self {
        let mut grid = vec![0; h * w];
        let mut cells = Vec::with_capacity((rows.1 - rows.0) * (cols.1 - cols.0));
        for y in rows.0..rows.1 {
            for x in cols.0..cols.1 {
                grid[y * w + x] = 1;
                cells.push(y * w + x);
            }
        }
        Self { h, w, grid, cells }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of covered cells (the L1 norm of the mask).
    pub fn area(&self) -> usize {
        self.cells.len()
    }

    /// Flat `y * w + x` indices of the covered cells, ascending.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.w + x] == 1
    }

    /// Mirror left to right.
    pub fn flipped(&self) -> PartMask {
        let mut grid = vec![0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                grid[y * self.w + self.w - 1 - x] = self.grid[y * self.w + x];
            }
        }
        PartMask::from_grid(self.h, self.w, grid).expect("flip keeps the area")
    }

    /// The cells not covered, or `None` when the mask is full.
    pub fn complement(&self) -> Option<PartMask> {
        PartMask::from_grid(self.h, self.w, self.grid.iter().map(|v| 1 - v).collect()).ok()
    }
}

/// The D selected part boxes of one image and their masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<PartBox>,
    pub masks: Vec<PartMask>,
}

impl ProposalSet {
    pub fn build(detections: &[PartBox], d: usize, image_geom: (usize, usize), feat_geom: (usize, usize)) -> Self {
        let boxes = select_top_d(detections, d, image_geom);
        let masks = boxes.iter().map(|b| rasterize_mask(b, image_geom, feat_geom)).collect();
        Self { boxes, masks }
    }

    /// One mask per feature-map cell, used by grid attention.
    pub fn grid(image_geom: (usize, usize), feat_geom: (usize, usize)) -> Self {
        let (fh, fw) = feat_geom;
        let (sy, sx) = (image_geom.0 as f64 / fh as f64, image_geom.1 as f64 / fw as f64);
        let mut boxes = Vec::with_capacity(fh * fw);
        let mut masks = Vec::with_capacity(fh * fw);
        for y in 0..fh {
            for x in 0..fw {
                boxes.push(PartBox::new(x as f64 * sx, y as f64 * sy, (x + 1) as f64 * sx, (y + 1) as f64 * sy, 0.0));
                masks.push(PartMask::single_cell(fh, fw, y, x));
            }
        }
        Self { boxes, masks }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Maximum corner displacement as a fraction of the box side.
    pub jitter_frac: f64,
    pub miss_prob: f64,
    /// Mean number of spurious background boxes per image.
    pub false_pos_rate: f64,
    pub seed: u64,
}

impl DetectorNoise {
    pub fn none(seed: u64) -> Self {
        Self { jitter_frac: 0.0, miss_prob: 0.0, false_pos_rate: 0.0, seed }
    }
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self { jitter_frac: 0.1, miss_prob: 0.05, false_pos_rate: 1.0, seed: 0 }
    }
}

/// Perturb ground-truth boxes the way an imperfect detector would.
///
/// True boxes get confidences in `[0.5, 1.0]`, spurious boxes `[0.1, 0.6]`.
pub fn simulate_detector(boxes: &[PartBox], image_geom: (usize, usize), noise: &DetectorNoise) -> Vec<PartBox> {
    simulate_detector_traced(boxes, image_geom, noise).into_iter().map(|(b, _)| b).collect()
}

/// [`simulate_detector`], also reporting which ground-truth box each
/// detection came from (`None` for spurious boxes).
pub fn simulate_detector_traced(
    boxes: &[PartBox],
    image_geom: (usize, usize),
    noise: &DetectorNoise,
) -> Vec<(PartBox, Option<usize>)> {
    let (ih, iw) = (image_geom.0 as f64, image_geom.1 as f64);
    let mut rng = rng::rng_for(noise.seed, &[]);
    let mut out = Vec::with_capacity(boxes.len() + 2);
    for (i, gt) in boxes.iter().enumerate() {
        // Draw every variate even for missed boxes so one box's fate does not
        // shift the randomness of the next.
        let missed = rng.gen::<f64>() < noise.miss_prob;
        let mut shift = [0.0; 4];
        for s in shift.iter_mut() {
            *s = rng.gen_range(-1.0..=1.0) * noise.jitter_frac;
        }
        let confidence = rng.gen_range(0.5..=1.0);
        if missed {
            continue;
        }
        let (bw, bh) = (gt.width(), gt.height());
        let mut b = PartBox {
            x1: (gt.x1 + shift[0] * bw).clamp(0.0, iw),
            y1: (gt.y1 + shift[1] * bh).clamp(0.0, ih),
            x2: (gt.x2 + shift[2] * bw).clamp(0.0, iw),
            y2: (gt.y2 + shift[3] * bh).clamp(0.0, ih),
            confidence,
            attribute: gt.attribute,
        };
        b.normalize();
        if b.is_valid() {
            out.push((b, Some(i)));
        }
    }
    let spurious = rng::poisson(&mut rng, noise.false_pos_rate);
    for _ in 0..spurious {
        let bw = rng.gen_range(0.08..=0.25) * iw;
        let bh = rng.gen_range(0.08..=0.25) * ih;
        let x1 = rng.gen_range(0.0..=(iw - bw));
        let y1 = rng.gen_range(0.0..=(ih - bh));
        let confidence = rng.gen_range(0.1..=0.6);
        let attribute = Attribute::ALL[rng.gen_range(0..Attribute::ALL.len())];
        out.push((PartBox { x1, y1, x2: x1 + bw, y2: y1 + bh, confidence, attribute: Some(attribute) }, None));
    }
    out
}

fn by_confidence(a: &PartBox, b: &PartBox) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Keep exactly `d` boxes: the most confident ones in descending order,
/// padded by cycling through the available boxes, or full-frame boxes with
/// confidence 0 when nothing was detected.
pub fn select_top_d(detections: &[PartBox], d: usize, image_geom: (usize, usize)) -> Vec<PartBox> {
    select_top_d_indices(detections, d)
        .into_iter()
        .map(|i| i.map_or_else(|| PartBox::full_frame(image_geom.0, image_geom.1), |i| detections[i]))
        .collect()
}

/// The detection index behind each of the `d` selected slots; `None` marks
/// the full-frame fallback.
pub fn select_top_d_indices(detections: &[PartBox], d: usize) -> Vec<Option<usize>> {
    if detections.is_empty() {
        return vec![None; d];
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| by_confidence(&detections[a], &detections[b]));
    order.truncate(d);
    let available = order.len();
    (0..d).map(|i| Some(order[i % available])).collect()
}

/// Project a box onto the feature grid. The covered range is
/// `floor(start)..ceil(end)` after scaling, clamped to the grid; an empty
/// range collapses to the single cell holding the box centre.
pub fn rasterize_mask(b: &PartBox, image_geom: (usize, usize), feat_geom: (usize, usize)) -> PartMask {
    let (ih, iw) = image_geom;
    let (fh, fw) = feat_geom;
    let sy = fh as f64 / ih as f64;
    let sx = fw as f64 / iw as f64;
    let rows = cell_range(b.y1 * sy, b.y2 * sy, fh);
    let cols = cell_range(b.x1 * sx, b.x2 * sx, fw);
    PartMask::rect(fh, fw, rows, cols)
}

fn cell_range(start: f64, end: f64, len: usize) -> (usize, usize) {
    let clamp = |v: f64| v.max(0.0).min(len as f64) as usize;
    let lo = clamp(math::floor(start));
    let hi = clamp(math::ceil(end));
    if hi > lo {
        (lo, hi)
    } else {
        let centre = clamp(math::floor((start + end) / 2.0)).min(len - 1);
        (centre, centre + 1)
    }
}

/// Zero every cell outside the mask, on every channel.
pub fn apply_mask(fg: &FeatureMap, mask: &PartMask) -> Result<FeatureMap> {
    if (fg.h, fg.w) != (mask.h, mask.w) {
        return Err(Error::Shape(format!("mask {}x{} on feature map {}x{}", mask.h, mask.w, fg.h, fg.w)));
    }
    let plane = fg.h * fg.w;
    let mut out = FeatureMap::zeros(fg.h, fg.w, fg.c);
    for ch in 0..fg.c {
        for &cell in &mask.cells {
            out.data[ch * plane + cell] = fg.data[ch * plane + cell];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, c: f64) -> PartBox {
        PartBox::new(x1, y1, x2, y2, c)
    }

    #[test]
    fn zero_noise_returns_ground_truth() {
        let gt = vec![bx(4.0, 4.0, 14.0, 14.0, 1.0), bx(20.0, 30.0, 28.0, 36.0, 1.0)];
        let out = simulate_detector(&gt, (64, 64), &DetectorNoise::none(5));
        assert_eq!(out.len(), 2);
        for (o, g) in out.iter().zip(&gt) {
            assert_eq!((o.x1, o.y1, o.x2, o.y2), (g.x1, g.y1, g.x2, g.y2));
            assert!((0.5..=1.0).contains(&o.confidence));
        }
    }

    #[test]
    fn certain_miss_leaves_only_false_positives() {
        let gt = vec![bx(4.0, 4.0, 14.0, 14.0, 1.0); 5];
        for seed in 0..50 {
            let noise = DetectorNoise { jitter_frac: 0.0, miss_prob: 1.0, false_pos_rate: 2.0, seed };
            let out = simulate_detector(&gt, (64, 64), &noise);
            assert!(out.iter().all(|b| (0.1..=0.6).contains(&b.confidence)));
        }
        let quiet = DetectorNoise { jitter_frac: 0.0, miss_prob: 1.0, false_pos_rate: 0.0, seed: 0 };
        assert!(simulate_detector(&gt, (64, 64), &quiet).is_empty());
    }

    #[test]
    fn jitter_stays_within_fraction_of_box_size() {
        let gt = [bx(20.0, 20.0, 30.0, 30.0, 1.0)];
        for seed in 0..1000 {
            let noise = DetectorNoise { jitter_frac: 0.2, miss_prob: 0.0, false_pos_rate: 0.0, seed };
            let out = simulate_detector(&gt, (64, 64), &noise);
            let b = out[0];
            for (got, want) in [(b.x1, 20.0), (b.y1, 20.0), (b.x2, 30.0), (b.y2, 30.0)] {
                assert!((got - want).abs() <= 2.0 + 1e-12, "seed {seed}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn top_d_keeps_most_confident() {
        let dets: Vec<PartBox> = (0..10).map(|i| bx(i as f64, 0.0, i as f64 + 4.0, 4.0, i as f64 / 10.0)).collect();
        let top = select_top_d(&dets, 8, (64, 64));
        let conf: Vec<f64> = top.iter().map(|b| b.confidence).collect();
        assert_eq!(conf, vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2]);
    }

    #[test]
    fn top_d_pads_cyclically() {
        let a = bx(0.0, 0.0, 4.0, 4.0, 0.9);
        let b = bx(8.0, 0.0, 12.0, 4.0, 0.8);
        let c = bx(16.0, 0.0, 20.0, 4.0, 0.7);
        let top = select_top_d(&[b, c, a], 8, (64, 64));
        assert_eq!(top, vec![a, b, c, a, b, c, a, b]);
    }

    #[test]
    fn top_d_without_detections_uses_full_frame() {
        let top = select_top_d(&[], 4, (64, 48));
        assert_eq!(top.len(), 4);
        assert!(top.iter().all(|b| *b == bx(0.0, 0.0, 48.0, 64.0, 0.0)));
    }

    #[test]
    fn confidence_ties_break_on_coordinates() {
        let a = bx(1.0, 0.0, 4.0, 4.0, 0.5);
        let b = bx(0.0, 5.0, 4.0, 9.0, 0.5);
        assert_eq!(select_top_d(&[a, b], 2, (64, 64)), vec![b, a]);
        assert_eq!(select_top_d(&[b, a], 2, (64, 64)), vec![b, a]);
    }

    #[test]
    fn full_box_rasterizes_to_full_mask() {
        let m = rasterize_mask(&bx(0.0, 0.0, 64.0, 64.0, 1.0), (64, 64), (8, 8));
        assert_eq!(m, PartMask::full(8, 8));
    }

    #[test]
    fn half_box_covers_top_left_quadrant() {
        let m = rasterize_mask(&bx(0.0, 0.0, 32.0, 32.0, 1.0), (64, 64), (8, 8));
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.contains(y, x), y < 4 && x < 4);
            }
        }
    }

    #[test]
    fn overflowing_box_is_clamped() {
        let m = rasterize_mask(&bx(50.0, 10.0, 90.0, 20.0, 1.0), (64, 64), (8, 8));
        assert!(m.contains(1, 7));
        assert!(m.cells().iter().all(|&c| c % 8 >= 6 && c % 8 <= 7));
    }

    #[test]
    fn degenerate_box_covers_one_cell() {
        let m = rasterize_mask(&bx(20.0, 20.0, 20.0, 20.0, 1.0), (64, 64), (8, 8));
        assert_eq!(m.area(), 1);
        assert!(m.contains(2, 2));
    }

    #[test]
    fn mask_on_two_by_two() {
        let f = FeatureMap::from_hwc(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = PartMask::from_grid(2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = apply_mask(&f, &m).unwrap();
        assert_eq!(out, FeatureMap::from_hwc(2, 2, 1, &[1.0, 0.0, 0.0, 4.0]).unwrap());
        assert_eq!(apply_mask(&f, &PartMask::full(2, 2)).unwrap(), f);
    }

    #[test]
    fn empty_mask_is_unconstructible() {
        assert!(PartMask::from_grid(2, 2, vec![0; 4]).is_err());
    }

    #[test]
    fn mask_geometry_mismatch_is_an_error() {
        let f = FeatureMap::zeros(4, 4, 2);
        assert!(matches!(apply_mask(&f, &PartMask::full(2, 2)), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn top_d_has_length_d_and_sorted_prefix(
            confs in proptest::collection::vec(0.0f64..1.0, 0..20),
            d in 1usize..12,
        ) {
            let dets: Vec<PartBox> = confs.iter().enumerate()
                .map(|(i, &c)| bx(i as f64, 0.0, i as f64 + 2.0, 2.0, c)).collect();
            let top = select_top_d(&dets, d, (64, 64));
            prop_assert_eq!(top.len(), d);
            let ordered = top.len().min(dets.len().max(1));
            for pair in top[..ordered].windows(2) {
                prop_assert!(pair[0].confidence >= pair[1].confidence);
            }
        }

        #[test]
        fn enlarging_a_box_never_removes_cells(
            x1 in 0.0f64..60.0, y1 in 0.0f64..60.0, w in 0.5f64..30.0, h in 0.5f64..30.0,
            grow in proptest::collection::vec(0.0f64..10.0, 4),
        ) {
            let small = bx(x1, y1, (x1 + w).min(64.0), (y1 + h).min(64.0), 1.0);
            let big = bx((x1 - grow[0]).max(0.0), (y1 - grow[1]).max(0.0),
                         (small.x2 + grow[2]).min(64.0), (small.y2 + grow[3]).min(64.0), 1.0);
            let ms = rasterize_mask(&small, (64, 64), (8, 8));
            let mb = rasterize_mask(&big, (64, 64), (8, 8));
            for &c in ms.cells() {
                prop_assert!(mb.grid()[c] == 1);
            }
        }

        #[test]
        fn mask_and_complement_partition_the_map(
            bits in proptest::collection::vec(0u8..2, 16),
            values in proptest::collection::vec(-5.0f64..5.0, 48),
        ) {
            prop_assume!(bits.contains(&1));
            let f = FeatureMap { h: 4, w: 4, c: 3, data: values };
            let m = PartMask::from_grid(4, 4, bits).unwrap();
            let inside = apply_mask(&f, &m).unwrap();
            let outside = match m.complement() {
                Some(c) => apply_mask(&f, &c).unwrap(),
                None => FeatureMap::zeros(4, 4, 3),
            };
            for i in 0..f.data.len() {
                prop_assert_eq!(inside.data[i] + outside.data[i], f.data[i]);
            }
        }
    }
}
