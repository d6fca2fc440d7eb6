//! Domain types shared by every stage: images, part boxes, datasets and
//! retrieval protocols.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub const MIN_IMAGE_SIDE: usize = 32;

/// Pixel tensor in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!("image {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")));
        }
        if data.len() != h * w * channels {
            return Err(Error::Shape(format!(
                "image {h}x{w}x{channels} needs {} values, got {}",
                h * w * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, channels, data })
    }

    pub fn filled(h: usize, w: usize, channels: usize, value: f64) -> Self {
        Self { h, w, channels, data: vec![value; h * w * channels] }
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(ch * self.h + y) * self.w + x]
    }
}

/// The sixteen part attributes a vehicle part detector reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    AnnualSign,
    BackMirror,
    CarLight,
    Carrier,
    CarTopWindow,
    EntryLicense,
    Hanging,
    LayOrnament,
    LightCover,
    Logo,
    NewerSign,
    TissueBox,
    Plate,
    SafeBelt,
    Wheel,
    WindGlass,
}

impl Attribute {
    pub const ALL: [Attribute; 16] = [
        Attribute::AnnualSign,
        Attribute::BackMirror,
        Attribute::CarLight,
        Attribute::Carrier,
        Attribute::CarTopWindow,
        Attribute::EntryLicense,
        Attribute::Hanging,
        Attribute::LayOrnament,
        Attribute::LightCover,
        Attribute::Logo,
        Attribute::NewerSign,
        Attribute::TissueBox,
        Attribute::Plate,
        Attribute::SafeBelt,
        Attribute::Wheel,
        Attribute::WindGlass,
    ];

    pub fn abbreviation(self) -> &'static str {
        match self {
            Attribute::AnnualSign => "anusigns",
            Attribute::BackMirror => "backmirror",
            Attribute::CarLight => "carlight",
            Attribute::Carrier => "carrier",
            Attribute::CarTopWindow => "cartopwindow",
            Attribute::EntryLicense => "entrylicense",
            Attribute::Hanging => "hungs",
            Attribute::LayOrnament => "layon",
            Attribute::LightCover => "lightcover",
            Attribute::Logo => "logo",
            Attribute::NewerSign => "newersign",
            Attribute::TissueBox => "tissuebox",
            Attribute::Plate => "plate",
            Attribute::SafeBelt => "safebelt",
            Attribute::Wheel => "wheel",
            Attribute::WindGlass => "windglass",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbreviation())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .iter()
            .copied()
            .find(|a| a.abbreviation() == s)
            .ok_or_else(|| Error::Parse(format!("unknown attribute `{s}`")))
    }
}

/// An axis-aligned part region in image-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
    pub attribute: Option<Attribute>,
}

impl PartBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64) -> Self {
        Self { x1, y1, x2, y2, confidence, attribute: None }
    }

    pub fn with_attribute(mut self, attribute: Attribute) -> Self {
        self.attribute = Some(attribute);
        self
    }

    pub fn full_frame(h: usize, w: usize) -> Self {
        Self::new(0.0, 0.0, w as f64, h as f64, 0.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Swap inverted corners and clamp the confidence. Returns `true` when
    /// anything had to change.
    pub fn normalize(&mut self) -> bool {
        let mut changed = false;
        if self.x1 > self.x2 {
            core::mem::swap(&mut self.x1, &mut self.x2);
            changed = true;
        }
        if self.y1 > self.y2 {
            core::mem::swap(&mut self.y1, &mut self.y2);
            changed = true;
        }
        let c = self.confidence.clamp(0.0, 1.0);
        if c != self.confidence {
            self.confidence = c;
            changed = true;
        }
        changed
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2, self.confidence].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
            && (0.0..=1.0).contains(&self.confidence)
    }

    pub fn iou(&self, other: &PartBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Image file name relative to the dataset root; also the sample key.
    pub name: String,
    pub pixels: Image,
    pub identity: usize,
    pub camera: usize,
    pub boxes: Vec<PartBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, split: Split) -> Self {
        Self { samples, split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn cameras(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.camera).collect()
    }

    /// Dense class indices `0..k` in ascending identity order, one per sample.
    pub fn dense_labels(&self) -> (Vec<usize>, usize) {
        let index: BTreeMap<usize, usize> =
            self.identities().into_iter().enumerate().map(|(dense, id)| (id, dense)).collect();
        let labels = self.samples.iter().map(|s| index[&s.identity]).collect();
        (labels, index.len())
    }
}

/// Fail when a train and a test dataset share an identity.
pub fn check_disjoint(train: &Dataset, test: &Dataset) -> Result<()> {
    let shared: Vec<usize> = train.identities().intersection(&test.identities()).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("train and test share identities {shared:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    /// Cross-camera search: same identity seen by the same camera does not count.
    Veri,
    /// One random gallery image per identity; all remaining images query.
    VehicleId,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Veri => "veri",
            ProtocolKind::VehicleId => "vehicleid",
        }
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "veri" => Ok(ProtocolKind::Veri),
            "vehicleid" => Ok(ProtocolKind::VehicleId),
            other => Err(Error::Parse(format!("unknown protocol `{other}` (expected veri or vehicleid)"))),
        }
    }
}

/// Reference to one dataset sample inside a protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRef {
    pub index: usize,
    pub identity: usize,
    pub camera: usize,
}

/// Query and gallery sets over a single test dataset, plus a mask of which
/// query/gallery pairs count during ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalProtocol {
    pub kind: ProtocolKind,
    pub seed: u64,
    pub query: Vec<ItemRef>,
    pub gallery: Vec<ItemRef>,
    /// Row-major `query.len() × gallery.len()`.
    pub validity: Vec<bool>,
}

impl RetrievalProtocol {
    #[inline]
    pub fn is_valid(&self, q: usize, g: usize) -> bool {
        self.validity[q * self.gallery.len() + g]
    }

    /// Build a protocol from explicit query/gallery lists. Pairs are valid
    /// unless they are the very same sample.
    pub fn from_parts(kind: ProtocolKind, seed: u64, query: Vec<ItemRef>, gallery: Vec<ItemRef>) -> Self {
        let validity = query.iter().flat_map(|q| gallery.iter().map(move |g| g.index != q.index)).collect();
        Self { kind, seed, query, gallery, validity }
    }
}

fn item(dataset: &Dataset, index: usize) -> ItemRef {
    let s = &dataset.samples[index];
    ItemRef { index, identity: s.identity, camera: s.camera }
}

/// Split a test dataset into query and gallery following one of the two
/// evaluation protocols.
pub fn split_protocol(dataset: &Dataset, kind: ProtocolKind, seed: u64) -> Result<RetrievalProtocol> {
    if dataset.is_empty() {
        return Err(Error::Protocol("empty dataset".into()));
    }
    let mut rng = rng::rng_for(seed, &[kind as u64]);
    match kind {
        ProtocolKind::Veri => {
            if dataset.cameras().len() < 2 {
                return Err(Error::Protocol("cross-camera protocol needs at least two cameras".into()));
            }
            // One query per (identity, camera); everything is gallery.
            let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for (i, s) in dataset.samples.iter().enumerate() {
                groups.entry((s.identity, s.camera)).or_default().push(i);
            }
            let query: Vec<ItemRef> =
                groups.values().map(|members| item(dataset, members[rng.gen_range(0..members.len())])).collect();
            let gallery: Vec<ItemRef> = (0..dataset.len()).map(|i| item(dataset, i)).collect();
            let validity = query
                .iter()
                .flat_map(|q| {
                    gallery
                        .iter()
                        .map(move |g| !(g.identity == q.identity && g.camera == q.camera) && g.index != q.index)
                })
                .collect();
            Ok(RetrievalProtocol { kind, seed, query, gallery, validity })
        }
        ProtocolKind::VehicleId => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in dataset.samples.iter().enumerate() {
                groups.entry(s.identity).or_default().push(i);
            }
            let mut gallery = Vec::with_capacity(groups.len());
            let mut query = Vec::new();
            for members in groups.values() {
                let pick = *members.choose(&mut rng).expect("non-empty group");
                gallery.push(item(dataset, pick));
                query.extend(members.iter().filter(|&&m| m != pick).map(|&m| item(dataset, m)));
            }
            Ok(RetrievalProtocol::from_parts(kind, seed, query, gallery))
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Query => "query",
            Split::Gallery => "gallery",
        };
        f.write_str(s)
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

/// Render a box list in the manifest's `x1,y1,x2,y2,conf[,attr];...` form.
pub fn format_boxes(boxes: &[PartBox]) -> String {
    let mut out = String::new();
    for (i, b) in boxes.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        out.push_str(&format!("{},{},{},{},{}", b.x1, b.y1, b.x2, b.y2, b.confidence));
        if let Some(a) = b.attribute {
            out.push(',');
            out.push_str(a.abbreviation());
        }
    }
    out
}

/// Parse a box list. Inverted corners are swapped; the returned count says
/// how many boxes needed normalization.
pub fn parse_boxes(field: &str) -> Result<(Vec<PartBox>, usize)> {
    let mut boxes = Vec::new();
    let mut normalized = 0;
    for raw in field.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
        if parts.len() != 5 && parts.len() != 6 {
            return Err(Error::Parse(format!("box `{raw}` needs 5 or 6 comma-separated fields")));
        }
        let mut nums = [0.0; 5];
        for (slot, text) in nums.iter_mut().zip(&parts[..5]) {
            *slot = text.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{text}` in box `{raw}`")))?;
        }
        let mut b = PartBox::new(nums[0], nums[1], nums[2], nums[3], nums[4]);
        if parts.len() == 6 {
            b.attribute = Some(parts[5].parse()?);
        }
        if b.normalize() {
            normalized += 1;
        }
        if !b.is_valid() {
            return Err(Error::Parse(format!("degenerate box `{raw}`")));
        }
        boxes.push(b);
    }
    Ok((boxes, normalized))
}
