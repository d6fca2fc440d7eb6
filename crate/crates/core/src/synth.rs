//! Synthetic retrieval data: identities share a handful of coarse "model"
//! appearances and differ only by small glyphs at fixed body-relative slots.
//! Glyphs come from a small symbol vocabulary; an identity is a choice of
//! slots and one symbol per slot, unique across identities.
//!
//! Every image also carries per-image distractor glyphs in a different
//! style, structural parts shared by all identities of a model, and a camera
//! transform (translation, brightness, blur, sensor noise, occasional
//! occlusion of one glyph). Ground-truth boxes are recorded for all glyphs
//! and structural parts, and a simulated detector turns them into part
//! proposals.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, Dataset, Image, ImageSample, PartBox, Split};
use crate::math;
use crate::proposals::{simulate_detector_traced, DetectorNoise};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

const BODY_W: usize = 44;
const BODY_H: usize = 40;

/// Body-relative top-left corners available to identity glyphs.
const SLOTS: [(usize, usize); 6] = [(4, 14), (18, 14), (32, 14), (4, 25), (18, 25), (32, 25)];
const IDENTITY_ATTRS: [Attribute; 3] = [Attribute::AnnualSign, Attribute::NewerSign, Attribute::EntryLicense];
const DISTRACTOR_ATTRS: [Attribute; 3] = [Attribute::Hanging, Attribute::TissueBox, Attribute::LayOrnament];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_ids: usize,
    /// Identities `0..train_ids` form the training split, the rest the test split.
    pub train_ids: usize,
    pub images_per_id: usize,
    /// Distinct coarse appearances shared across identities.
    pub num_models: usize,
    pub image_size: usize,
    /// Inclusive glyph side range in pixels.
    pub glyph_size: (usize, usize),
    pub identity_glyphs: usize,
    /// Size of the identity symbol vocabulary.
    pub symbols: usize,
    pub distractor_glyphs: usize,
    /// Unannotated symbols from the identity vocabulary scattered over the
    /// background; only box-level cues separate them from identity glyphs.
    pub clutter_glyphs: usize,
    pub cameras: usize,
    /// Maximum per-image translation jitter in pixels (on top of the camera offset).
    pub translation: usize,
    pub brightness_jitter: f64,
    /// Range of per-image Gaussian sensor noise.
    pub noise_sigma: (f64, f64),
    pub occlusion_prob: f64,
    pub detector: DetectorNoise,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 64,
            train_ids: 48,
            images_per_id: 12,
            num_models: 4,
            image_size: 64,
            glyph_size: (6, 8),
            identity_glyphs: 3,
            symbols: 8,
            distractor_glyphs: 2,
            clutter_glyphs: 12,
            cameras: 4,
            translation: 0,
            brightness_jitter: 0.08,
            noise_sigma: (0.01, 0.04),
            occlusion_prob: 0.15,
            detector: DetectorNoise::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.num_ids < 2 {
            return fail("num_ids", "need at least two identities");
        }
        if self.num_models == 0 || self.num_models >= self.num_ids {
            return fail("num_models", "must be in 1..num_ids so that identities share appearances");
        }
        if self.images_per_id < 2 {
            return fail("images_per_id", "need at least two images per identity");
        }
        if self.train_ids == 0 || self.train_ids >= self.num_ids {
            return fail("train_ids", "must leave identities for both splits");
        }
        if self.image_size < 48 {
            return fail("image_size", "must be at least 48 pixels to hold the body");
        }
        if self.glyph_size.0 < 3 || self.glyph_size.0 > self.glyph_size.1 || self.glyph_size.1 > 10 {
            return fail("glyph_size", "must satisfy 3 <= min <= max <= 10");
        }
        if self.identity_glyphs == 0 || self.identity_glyphs > SLOTS.len() {
            return fail("identity_glyphs", &format!("must be in 1..={} (available slots)", SLOTS.len()));
        }
        if self.symbols < 2 || self.symbols > 64 {
            return fail("symbols", "must be in 2..=64");
        }
        if combinations(SLOTS.len(), self.identity_glyphs)
            .saturating_mul(self.symbols.saturating_pow(self.identity_glyphs as u32))
            < self.num_ids
        {
            return fail("symbols", "too few slot and symbol combinations for num_ids distinct identities");
        }
        if self.distractor_glyphs > 4 {
            return fail("distractor_glyphs", "at most 4 distractors fit beside the identity glyphs");
        }
        if self.cameras == 0 {
            return fail("cameras", "need at least one camera");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("occlusion_prob", "must be a probability");
        }
        if self.noise_sigma.0 < 0.0 || self.noise_sigma.0 > self.noise_sigma.1 {
            return fail("noise_sigma", "must be an increasing non-negative range");
        }
        Ok(())
    }
}

/// Role of a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxKind {
    IdentityGlyph,
    Distractor,
    Structural,
}

/// Generation record of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub name: String,
    pub identity: usize,
    pub model: usize,
    pub camera: usize,
    /// Parallel to the sample's ground-truth boxes.
    pub box_kinds: Vec<BoxKind>,
    /// Ground-truth box hidden by the occluder, if any.
    pub occluded: Option<usize>,
    /// Simulated detections (post-NMS, unsorted).
    pub detections: Vec<PartBox>,
    /// Ground-truth index behind each detection; `None` for spurious boxes.
    pub detection_sources: Vec<Option<usize>>,
}

impl ImageMeta {
    pub fn is_identity_bearing(&self, gt_index: usize) -> bool {
        self.box_kinds.get(gt_index) == Some(&BoxKind::IdentityGlyph)
    }

    /// Whether each detection comes from an identity glyph.
    pub fn detection_flags(&self) -> Vec<bool> {
        self.detection_sources.iter().map(|s| s.is_some_and(|i| self.is_identity_bearing(i))).collect()
    }
}

/// The `synth_meta` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub images: Vec<ImageMeta>,
}

impl SynthMeta {
    pub fn get(&self, name: &str) -> Option<&ImageMeta> {
        self.images.iter().find(|m| m.name == name)
    }

    pub fn by_name(&self) -> BTreeMap<&str, &ImageMeta> {
        self.images.iter().map(|m| (m.name.as_str(), m)).collect()
    }
}

/// Generated splits plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    pub meta: SynthMeta,
}

impl SynthData {
    /// Detections of every sample, by sample name.
    pub fn proposals(&self) -> BTreeMap<String, Vec<PartBox>> {
        self.meta.images.iter().map(|m| (m.name.clone(), m.detections.clone())).collect()
    }
}

/// Per-box identity flags of a generated sample.
pub fn oracle_labels(meta: &SynthMeta, sample: &ImageSample) -> Result<Vec<bool>> {
    let m = meta.get(&sample.name).ok_or_else(|| Error::UnknownSample(sample.name.clone()))?;
    if m.identity != sample.identity || m.box_kinds.len() != sample.boxes.len() {
        return Err(Error::UnknownSample(format!("{} does not match its generation record", sample.name)));
    }
    Ok((0..sample.boxes.len()).map(|i| m.is_identity_bearing(i)).collect())
}

type Rgb = [f64; 3];

struct Model {
    body: Rgb,
    stripe: Rgb,
    stripe_period: usize,
}

struct Glyph {
    slot: (usize, usize),
    size: usize,
    bits: Vec<bool>,
    attribute: Attribute,
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self { size, px: vec![0.0; 3 * size * size] }
    }

    fn set(&mut self, x: usize, y: usize, c: Rgb) {
        if x < self.size && y < self.size {
            for (ch, v) in c.iter().enumerate() {
                self.px[(ch * self.size + y) * self.size + x] = *v;
            }
        }
    }

    fn fill(&mut self, x: usize, y: usize, w: usize, h: usize, c: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }
}

fn random_bits(rng: &mut SeededRng, n: usize) -> Vec<bool> {
    loop {
        let bits: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let ones = bits.iter().filter(|&&b| b).count();
        // Keep patterns away from nearly uniform squares.
        if ones * 4 >= n && ones * 4 <= 3 * n {
            return bits;
        }
    }
}

fn saturated(rng: &mut SeededRng) -> Rgb {
    let mut c = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    c[rng.gen_range(0..3)] = rng.gen_range(0.8..1.0);
    c
}

fn make_models(cfg: &SynthConfig) -> Vec<Model> {
    let mut r = rng::rng_for(cfg.seed, &[1]);
    (0..cfg.num_models)
        .map(|_| {
            let body = [r.gen_range(0.35..0.75), r.gen_range(0.35..0.75), r.gen_range(0.35..0.75)];
            let shade = r.gen_range(-0.15..0.15);
            Model { body, stripe: body.map(|v: f64| (v + shade).clamp(0.0, 1.0)), stripe_period: r.gen_range(3..7) }
        })
        .collect()
}

fn combinations(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Side of the coarse grid a symbol is drawn on before scaling to glyph size.
const SYMBOL_GRID: usize = 3;

/// Fixed symbols: distinct coarse patterns, scaled to a seeded glyph size.
fn make_symbols(cfg: &SynthConfig) -> Vec<(usize, Vec<bool>)> {
    let mut r = rng::rng_for(cfg.seed, &[5]);
    let cells = SYMBOL_GRID * SYMBOL_GRID;
    let mut coarse: Vec<Vec<bool>> = Vec::with_capacity(cfg.symbols);
    while coarse.len() < cfg.symbols {
        let bits = random_bits(&mut r, cells);
        if coarse.iter().all(|b| b.iter().zip(&bits).filter(|(x, y)| x != y).count() >= 2) {
            coarse.push(bits);
        }
    }
    coarse
        .into_iter()
        .map(|bits| {
            let size = r.gen_range(cfg.glyph_size.0..=cfg.glyph_size.1);
            let scaled = (0..size * size)
                .map(|k| bits[(k / size) * SYMBOL_GRID / size * SYMBOL_GRID + (k % size) * SYMBOL_GRID / size])
                .collect();
            (size, scaled)
        })
        .collect()
}

/// Slot set and symbols of every identity, drawn without repetition.
fn assign_identities(cfg: &SynthConfig, symbols: &[(usize, Vec<bool>)]) -> Vec<Vec<Glyph>> {
    let mut r = rng::rng_for(cfg.seed, &[2]);
    let mut taken = alloc::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.num_ids);
    while out.len() < cfg.num_ids {
        let mut slots: Vec<usize> = (0..SLOTS.len()).collect();
        slots.shuffle(&mut r);
        slots.truncate(cfg.identity_glyphs);
        slots.sort_unstable();
        let picks: Vec<usize> = slots.iter().map(|_| r.gen_range(0..symbols.len())).collect();
        if !taken.insert((slots.clone(), picks.clone())) {
            continue;
        }
        let glyphs = slots
            .iter()
            .zip(&picks)
            .enumerate()
            .map(|(k, (&s, &p))| {
                let (size, bits) = symbols[p].clone();
                Glyph { slot: SLOTS[s], size, bits, attribute: IDENTITY_ATTRS[k % 3] }
            })
            .collect();
        out.push(glyphs);
    }
    out
}

/// Camera offset (dx, dy), brightness gain and whether it blurs.
fn camera_profile(cam: usize) -> (isize, isize, f64, bool) {
    const OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const GAINS: [f64; 4] = [0.9, 1.0, 1.1, 0.95];
    let (dx, dy) = OFFSETS[cam % 4];
    (dx, dy, GAINS[cam % 4], cam % 4 >= 2)
}

fn overlaps(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    let (ax, ay, asz) = a;
    let (bx, by, bsz) = b;
    ax < bx + bsz + 1 && bx < ax + asz + 1 && ay < by + bsz + 1 && by < ay + asz + 1
}

fn box_at(x: usize, y: usize, w: usize, h: usize, attribute: Attribute) -> PartBox {
    PartBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64, 1.0).with_attribute(attribute)
}

fn box_blur(c: &mut Canvas) {
    let n = c.size;
    let src = c.px.clone();
    for ch in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(n) {
                    for xx in x.saturating_sub(1)..(x + 2).min(n) {
                        acc += src[(ch * n + yy) * n + xx];
                        cnt += 1.0;
                    }
                }
                c.px[(ch * n + y) * n + x] = acc / cnt;
            }
        }
    }
}

fn render(
    cfg: &SynthConfig,
    model: &Model,
    symbols: &[(usize, Vec<bool>)],
    glyphs: &[Glyph],
    id: usize,
    j: usize,
    model_idx: usize,
) -> Result<(ImageSample, ImageMeta)> {
    let mut r = rng::rng_for(cfg.seed, &[3, id as u64, j as u64]);
    let n = cfg.image_size;
    let camera = j % cfg.cameras;
    let (cdx, cdy, gain, blur) = camera_profile(camera);
    let t = cfg.translation as isize;
    let ox = ((n - BODY_W) / 2) as isize + cdx + r.gen_range(-t..=t);
    let oy = ((n - BODY_H) / 2) as isize + cdy + r.gen_range(-t..=t);
    let (ox, oy) = (ox.clamp(0, (n - BODY_W) as isize) as usize, oy.clamp(0, (n - BODY_H) as isize) as usize);

    let mut c = Canvas::new(n);
    let bg = r.gen_range(0.2..0.5);
    let bg_tint: Rgb = [bg + r.gen_range(-0.05..0.05), bg, bg + r.gen_range(-0.05..0.05)];
    c.fill(0, 0, n, n, bg_tint);
    let mut clutter: Vec<(usize, usize, usize)> = Vec::new();
    for k in 0..cfg.clutter_glyphs {
        let (size, bits) = &symbols[r.gen_range(0..symbols.len())];
        let size = *size;
        let mut placed = None;
        for _ in 0..200 {
            let cand = (r.gen_range(0..=n - size), r.gen_range(0..=n - size), size);
            let clear_of_body =
                cand.0 + size < ox || cand.0 > ox + BODY_W || cand.1 + size < oy || cand.1 > oy + BODY_H;
            if clear_of_body && clutter.iter().all(|&o| !overlaps(o, cand)) {
                placed = Some(cand);
                break;
            }
        }
        let Some((px, py, _)) = placed else {
            return Err(Error::Config(format!("glyph placement overflow: no background room for clutter glyph {k}")));
        };
        clutter.push((px, py, size));
        for (i, &bit) in bits.iter().enumerate() {
            let v = if bit { 0.97 } else { 0.03 };
            c.set(px + i % size, py + i / size, [v, v, v]);
        }
    }
    for y in 0..BODY_H {
        let col = if (y / model.stripe_period) % 2 == 0 { model.body } else { model.stripe };
        c.fill(ox, oy + y, BODY_W, 1, col);
    }

    let mut boxes = Vec::new();
    let mut kinds = Vec::new();
    // Structural parts: windshield and two lamps, identical within a model.
    c.fill(ox + 4, oy + 2, BODY_W - 8, 10, [0.12, 0.16, 0.24]);
    boxes.push(box_at(ox + 4, oy + 2, BODY_W - 8, 10, Attribute::WindGlass));
    kinds.push(BoxKind::Structural);
    for lx in [3, BODY_W - 11] {
        c.fill(ox + lx, oy + BODY_H - 5, 8, 4, [0.95, 0.85, 0.3]);
        boxes.push(box_at(ox + lx, oy + BODY_H - 5, 8, 4, Attribute::CarLight));
        kinds.push(BoxKind::Structural);
    }

    let mut occupied: Vec<(usize, usize, usize)> = Vec::new();
    let first_identity = boxes.len();
    for g in glyphs {
        let (gx, gy) = (ox + g.slot.0, oy + g.slot.1);
        for (k, &bit) in g.bits.iter().enumerate() {
            let v = if bit { 0.97 } else { 0.03 };
            c.set(gx + k % g.size, gy + k / g.size, [v, v, v]);
        }
        occupied.push((g.slot.0, g.slot.1, g.size));
        boxes.push(box_at(gx, gy, g.size, g.size, g.attribute));
        kinds.push(BoxKind::IdentityGlyph);
    }

    for k in 0..cfg.distractor_glyphs {
        let size = r.gen_range(cfg.glyph_size.0..=cfg.glyph_size.1);
        let mut placed = None;
        for _ in 0..200 {
            let cand = (r.gen_range(1..BODY_W - size - 1), r.gen_range(1..BODY_H - size - 6), size);
            if occupied.iter().all(|&o| !overlaps(o, cand)) {
                placed = Some(cand);
                break;
            }
        }
        let Some((px, py, _)) = placed else {
            return Err(Error::Config(format!(
                "glyph placement overflow: no room for distractor {k} beside {} glyphs",
                occupied.len()
            )));
        };
        occupied.push((px, py, size));
        let (a, b) = (saturated(&mut r), saturated(&mut r));
        let bits = random_bits(&mut r, size * size);
        for (i, &bit) in bits.iter().enumerate() {
            c.set(ox + px + i % size, oy + py + i / size, if bit { a } else { b });
        }
        boxes.push(box_at(ox + px, oy + py, size, size, DISTRACTOR_ATTRS[k % 3]));
        kinds.push(BoxKind::Distractor);
    }

    let occluded = if !glyphs.is_empty() && r.gen::<f64>() < cfg.occlusion_prob {
        let k = first_identity + r.gen_range(0..glyphs.len());
        let b = boxes[k];
        let grey = r.gen_range(0.3..0.6);
        c.fill(b.x1 as usize, b.y1 as usize, b.width() as usize, b.height() as usize, [grey; 3]);
        Some(k)
    } else {
        None
    };

    if blur {
        box_blur(&mut c);
    }
    let g = gain + r.gen_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
    let sigma = r.gen_range(cfg.noise_sigma.0..=cfg.noise_sigma.1);
    for v in c.px.iter_mut() {
        // Quantized to 8 bits so that stored images reload exactly.
        *v = math::round((*v * g + sigma * rng::normal(&mut r)).clamp(0.0, 1.0) * 255.0) / 255.0;
    }

    let name = format!("id{id:03}_c{camera}_{j:02}.ppm");
    let visible: Vec<PartBox> =
        boxes.iter().enumerate().filter(|(i, _)| Some(*i) != occluded).map(|(_, b)| *b).collect();
    let visible_index: Vec<usize> = (0..boxes.len()).filter(|&i| Some(i) != occluded).collect();
    let noise =
        DetectorNoise { seed: rng::derive(cfg.detector.seed ^ cfg.seed, &[4, id as u64, j as u64]), ..cfg.detector };
    let traced = simulate_detector_traced(&visible, (n, n), &noise);
    let meta = ImageMeta {
        name: name.clone(),
        identity: id,
        model: model_idx,
        camera,
        box_kinds: kinds,
        occluded,
        detections: traced.iter().map(|(b, _)| *b).collect(),
        detection_sources: traced.iter().map(|(_, s)| s.map(|i| visible_index[i])).collect(),
    };
    let sample = ImageSample { name, pixels: Image::new(n, n, 3, c.px)?, identity: id, camera, boxes };
    Ok((sample, meta))
}

/// Generate the train and test splits; deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let models = make_models(cfg);
    let symbols = make_symbols(cfg);
    let identities = assign_identities(cfg, &symbols);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut metas = Vec::new();
    for id in 0..cfg.num_ids {
        let model_idx = id % cfg.num_models;
        for j in 0..cfg.images_per_id {
            let (sample, meta) = render(cfg, &models[model_idx], &symbols, &identities[id], id, j, model_idx)?;
            metas.push(meta);
            if id < cfg.train_ids {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(SynthData {
        train: Dataset::new(train, Split::Train),
        test: Dataset::new(test, Split::Test),
        meta: SynthMeta { config: cfg.clone(), images: metas },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::rasterize_mask;

    fn small() -> SynthConfig {
        SynthConfig { num_ids: 8, train_ids: 4, images_per_id: 4, num_models: 2, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.train.len(), 16);
        assert_eq!(d.test.len(), 16);
        crate::data::check_disjoint(&d.train, &d.test).unwrap();
    }

    #[test]
    fn identity_glyphs_repeat_across_images() {
        let d = generate(&small()).unwrap();
        let meta = d.meta.by_name();
        let of_id: Vec<&ImageSample> = d.train.samples.iter().filter(|s| s.identity == 1).collect();
        let rel = |s: &ImageSample| -> Vec<(i64, i64)> {
            let m = meta[s.name.as_str()];
            let body = s.boxes[0];
            (0..s.boxes.len())
                .filter(|&i| m.is_identity_bearing(i))
                .map(|i| ((s.boxes[i].x1 - body.x1) as i64, (s.boxes[i].y1 - body.y1) as i64))
                .collect()
        };
        let first = rel(of_id[0]);
        assert_eq!(first.len(), 3);
        for s in &of_id[1..] {
            assert_eq!(rel(s), first);
        }
    }

    #[test]
    fn at_most_one_glyph_occluded_and_boxes_cover_cells() {
        let cfg = SynthConfig { occlusion_prob: 1.0, ..small() };
        let d = generate(&cfg).unwrap();
        for m in &d.meta.images {
            let k = m.occluded.expect("always occluded here");
            assert!(m.is_identity_bearing(k));
            assert!(m.detection_sources.iter().all(|s| *s != Some(k)));
        }
        for s in d.train.samples.iter().chain(&d.test.samples) {
            for b in &s.boxes {
                assert!(rasterize_mask(b, (64, 64), (8, 8)).area() >= 1);
            }
        }
    }

    #[test]
    fn oracle_flags_follow_box_kinds() {
        let d = generate(&small()).unwrap();
        let s = &d.test.samples[0];
        let flags = oracle_labels(&d.meta, s).unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 3);
        assert!(!flags[0]);
        let m = d.meta.get(&s.name).unwrap();
        for (i, b) in s.boxes.iter().enumerate() {
            let identity_attr = matches!(b.attribute, Some(a) if IDENTITY_ATTRS.contains(&a));
            assert_eq!(flags[i], identity_attr);
            assert_eq!(flags[i], m.box_kinds[i] == BoxKind::IdentityGlyph);
        }
        let mut foreign = s.clone();
        foreign.name = "elsewhere.ppm".into();
        assert!(matches!(oracle_labels(&d.meta, &foreign), Err(Error::UnknownSample(_))));
    }

    #[test]
    fn one_model_shares_the_body() {
        let cfg = SynthConfig { num_models: 1, occlusion_prob: 0.0, ..small() };
        let d = generate(&cfg).unwrap();
        assert!(d.meta.images.iter().all(|m| m.model == 0));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { num_models: 8, ..small() },
            SynthConfig { identity_glyphs: 7, ..small() },
            SynthConfig { images_per_id: 1, ..small() },
            SynthConfig { symbols: 2, identity_glyphs: 1, num_ids: 64, train_ids: 32, ..small() },
            SynthConfig { num_ids: 1, train_ids: 0, num_models: 0, ..small() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }
}
