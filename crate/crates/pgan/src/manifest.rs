//! Dataset manifests and the proposal cache.
//!
//! A manifest holds one record per image:
//! `file<TAB>identity<TAB>camera<TAB>x1,y1,x2,y2,conf[,attr];...`, with the
//! box field optionally empty. Blank lines and lines starting with `#` are
//! skipped. The proposal cache uses `file<TAB>boxes` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pgan_core::data::{format_boxes, parse_boxes};
use pgan_core::synth::{SynthData, SynthMeta};
use pgan_core::{Dataset, ImageSample, PartBox, Split};

use crate::imageio::{read_image, write_pnm};
use crate::{Error, Result};

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const PROPOSALS: &str = "proposals.tsv";
pub const SYNTH_META: &str = "synth_meta.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub file: String,
    pub identity: usize,
    pub camera: usize,
    pub boxes: Vec<PartBox>,
}

/// Parsed manifest plus the warnings raised while normalizing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub records: Vec<Record>,
    /// Source line of each record.
    pub lines: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Parsed> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Ingest { manifest: path.to_path_buf(), line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(bad(format!("expected 3 or 4 tab-separated fields, found {}", fields.len())));
        }
        let file = fields[0].trim();
        if file.is_empty() {
            return Err(bad("empty file name".into()));
        }
        let identity = fields[1].trim().parse().map_err(|_| bad(format!("bad identity `{}`", fields[1])))?;
        let camera = fields[2].trim().parse().map_err(|_| bad(format!("bad camera `{}`", fields[2])))?;
        let (boxes, swapped) = parse_boxes(fields.get(3).copied().unwrap_or("")).map_err(|e| bad(e.to_string()))?;
        if swapped > 0 {
            let w = format!("{}:{line_no}: {file}: swapped the corners of {swapped} box(es)", path.display());
            log::warn!("{w}");
            warnings.push(w);
        }
        records.push(Record { file: file.into(), identity, camera, boxes });
        lines.push(line_no);
    }
    Ok(Parsed { records, lines, warnings })
}

pub fn format_manifest(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.file, r.identity, r.camera, format_boxes(&r.boxes)));
    }
    out
}

/// A loaded split and the normalization warnings of its manifest.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Read a manifest and the images it names (relative to the manifest's directory).
pub fn load_dataset(manifest: &Path, split: Split) -> Result<Loaded> {
    let text = fs::read_to_string(manifest).map_err(Error::io(manifest))?;
    let parsed = parse_manifest(&text, manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(parsed.records.len());
    for (r, line) in parsed.records.into_iter().zip(parsed.lines) {
        let path = root.join(&r.file);
        if !path.is_file() {
            return Err(Error::Ingest {
                manifest: manifest.to_path_buf(),
                line,
                message: format!("image file `{}` not found", r.file),
            });
        }
        let pixels = read_image(&path)?;
        samples.push(ImageSample { name: r.file, pixels, identity: r.identity, camera: r.camera, boxes: r.boxes });
    }
    Ok(Loaded { dataset: Dataset::new(samples, split), warnings: parsed.warnings })
}

fn records_of(dataset: &Dataset) -> Vec<Record> {
    dataset
        .samples
        .iter()
        .map(|s| Record { file: s.name.clone(), identity: s.identity, camera: s.camera, boxes: s.boxes.clone() })
        .collect()
}

/// Write every image of `dataset` into `dir` and the manifest as `dir/manifest_name`.
pub fn save_dataset(dir: &Path, manifest_name: &str, dataset: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for s in &dataset.samples {
        write_pnm(&dir.join(&s.name), &s.pixels)?;
    }
    let path = dir.join(manifest_name);
    fs::write(&path, format_manifest(&records_of(dataset))).map_err(Error::io(&path))?;
    Ok(path)
}

pub fn format_proposals(proposals: &BTreeMap<String, Vec<PartBox>>) -> String {
    proposals.iter().map(|(file, boxes)| format!("{file}\t{}\n", format_boxes(boxes))).collect()
}

pub fn parse_proposals(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<PartBox>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Ingest { manifest: path.to_path_buf(), line: i + 1, message };
        let (file, boxes) = line.split_once('\t').unwrap_or((line, ""));
        let (boxes, _) = parse_boxes(boxes).map_err(|e| bad(e.to_string()))?;
        if out.insert(file.trim().to_string(), boxes).is_some() {
            return Err(bad(format!("duplicate entry for `{file}`")));
        }
    }
    Ok(out)
}

/// An on-disk dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub train: Dataset,
    pub test: Dataset,
    /// Cached detections by image file; empty when the directory has none.
    pub proposals: BTreeMap<String, Vec<PartBox>>,
    pub meta: Option<SynthMeta>,
    pub warnings: Vec<String>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let train = load_dataset(&root.join(TRAIN_MANIFEST), Split::Train)?;
        let test = load_dataset(&root.join(TEST_MANIFEST), Split::Test)?;
        pgan_core::data::check_disjoint(&train.dataset, &test.dataset)?;
        let prop_path = root.join(PROPOSALS);
        let proposals = if prop_path.is_file() {
            parse_proposals(&fs::read_to_string(&prop_path).map_err(Error::io(&prop_path))?, &prop_path)?
        } else {
            BTreeMap::new()
        };
        let meta_path = root.join(SYNTH_META);
        let meta = if meta_path.is_file() {
            let text = fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?)
        } else {
            None
        };
        let mut warnings = train.warnings;
        warnings.extend(test.warnings);
        Ok(Self { root: root.to_path_buf(), train: train.dataset, test: test.dataset, proposals, meta, warnings })
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            _ => &self.test,
        }
    }
}

/// Store generated data: both manifests, the images, the detector cache and the meta sidecar.
pub fn write_synth(root: &Path, data: &SynthData) -> Result<()> {
    save_dataset(root, TRAIN_MANIFEST, &data.train)?;
    save_dataset(root, TEST_MANIFEST, &data.test)?;
    let prop = root.join(PROPOSALS);
    fs::write(&prop, format_proposals(&data.proposals())).map_err(Error::io(&prop))?;
    let meta = root.join(SYNTH_META);
    let json = serde_json::to_string_pretty(&data.meta).map_err(|e| Error::format(&meta, e.to_string()))?;
    fs::write(&meta, json).map_err(Error::io(&meta))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_and_swaps_corners() {
        let text = "a.ppm\t3\t0\t1,2,5,6,0.9,anusigns\n# comment\n\nb.ppm\t7\t1\t9,2,5,6,0.5\nc.ppm\t3\t1\n";
        let p = parse_manifest(text, Path::new("m.tsv")).unwrap();
        assert_eq!(p.records.len(), 3);
        assert_eq!(p.records[1].boxes[0].x1, 5.0);
        assert_eq!(p.records[1].boxes[0].x2, 9.0);
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("b.ppm"));
        assert!(p.records[2].boxes.is_empty());
        assert_eq!(parse_manifest(&format_manifest(&p.records), Path::new("m.tsv")).unwrap().records, p.records);
    }

    #[test]
    fn rejects_malformed_lines_with_their_number() {
        let err = parse_manifest("a.ppm\t1\t0\nb.ppm\tx\t0\n", Path::new("m.tsv")).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");
    }

    #[test]
    fn proposals_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("x.ppm".to_string(), vec![PartBox::new(0.5, 1.0, 4.25, 8.0, 0.75)]);
        m.insert("y.ppm".to_string(), Vec::new());
        let text = format_proposals(&m);
        assert_eq!(parse_proposals(&text, Path::new("p.tsv")).unwrap(), m);
    }
}
