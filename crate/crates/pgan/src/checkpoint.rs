//! Checkpoints: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f32` values in header
//! order.
//!
//! Tensors are the model parameters and buffers (BN running statistics
//! included) under their parameter paths, followed by the Adam moments as
//! `adam.m.<i>` / `adam.v.<i>`. Values are narrowed to 32 bits, so a resumed
//! run continues from a rounded state.

use std::fs;
use std::io::Write;
use std::path::Path;

use pgan_core::config::ModelConfig;
use pgan_core::nn::Param;
use pgan_core::train::{EpochLog, Trainer};
use pgan_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PGANCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub adam_step: u64,
    pub log: Vec<EpochLog>,
    pub tensors: Vec<TensorEntry>,
}

fn model_tensors(trainer: &mut Trainer) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    trainer
        .model
        .visit(&mut |name: &str, p: &mut Param| out.push((name.to_string(), p.shape.clone(), p.value.clone())));
    out
}

pub fn save(path: &Path, trainer: &mut Trainer) -> Result<()> {
    let mut tensors = model_tensors(trainer);
    for (i, (m, v)) in trainer.adam.m.iter().zip(&trainer.adam.v).enumerate() {
        tensors.push((format!("adam.m.{i}"), vec![m.len()], m.clone()));
        tensors.push((format!("adam.v.{i}"), vec![v.len()], v.clone()));
    }
    let header = Header {
        version: VERSION,
        train: trainer.cfg.clone(),
        model: trainer.model.config.clone(),
        epoch: trainer.epoch,
        seed: trainer.cfg.seed,
        adam_step: trainer.adam.t,
        log: trainer.log.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * tensors.iter().map(|t| t.2.len()).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, values) in &tensors {
        for v in values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&bytes).map_err(Error::io(path))
}

pub fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    if header.version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", header.version)));
    }
    let data = bytes[16 + len..].to_vec();
    Ok((header, data))
}

/// Rebuild the trainer (model, optimizer state, progress) stored at `path`.
pub fn load(path: &Path) -> Result<Trainer> {
    let (header, data) = read_header(path)?;
    let total: usize = header.tensors.iter().map(TensorEntry::len).sum();
    if data.len() != 4 * total {
        return Err(Error::format(path, format!("expected {} tensor bytes, found {}", 4 * total, data.len())));
    }
    let mut values = data.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))));
    let mut by_name = std::collections::BTreeMap::new();
    for t in &header.tensors {
        let v: Vec<f64> = values.by_ref().take(t.len()).collect();
        by_name.insert(t.name.clone(), (t.shape.clone(), v));
    }
    let m = &header.model;
    let mut trainer = Trainer::new(header.train.clone(), m.in_channels, m.image_h, m.image_w, m.num_classes)?;
    if trainer.model.config != header.model {
        return Err(Error::format(path, "model configuration does not follow from the stored training configuration"));
    }
    let mut missing = Vec::new();
    trainer.model.visit(&mut |name: &str, p: &mut Param| match by_name.get(name) {
        Some((shape, v)) if *shape == p.shape => p.value.clone_from(v),
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::format(path, format!("missing or misshapen tensors: {}", missing.join(", "))));
    }
    let mut i = 0;
    while let (Some((_, m)), Some((_, v))) = (by_name.get(&format!("adam.m.{i}")), by_name.get(&format!("adam.v.{i}")))
    {
        trainer.adam.m.push(m.clone());
        trainer.adam.v.push(v.clone());
        i += 1;
    }
    trainer.adam.t = header.adam_step;
    trainer.epoch = header.epoch;
    trainer.log = header.log;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgan_core::{Image, Variant};

    fn tiny() -> (Trainer, Vec<Image>, Vec<usize>) {
        let cfg = TrainConfig {
            variant: Variant::Grid,
            backbone_widths: vec![4],
            channels: 8,
            refined_channels: 4,
            se_reduction: 2,
            identities_per_batch: 2,
            images_per_identity: 2,
            epochs: 2,
            ..TrainConfig::desk()
        };
        let images: Vec<Image> =
            (0..8).map(|i| Image::filled(32, 32, 3, 0.1 * (i / 2) as f64 + 0.05 * (i % 2) as f64)).collect();
        let labels = (0..8).map(|i| i / 2).collect();
        (Trainer::new(cfg, 3, 32, 32, 4).unwrap(), images, labels)
    }

    #[test]
    fn round_trip_keeps_state_within_f32() {
        let (mut t, images, labels) = tiny();
        let data = pgan_core::train::TrainData { images: &images, labels: &labels, masks: &[], num_classes: 4 };
        t.train_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &mut t).unwrap();
        let mut back = load(&path).unwrap();
        assert_eq!(back.epoch, 1);
        assert_eq!(back.log, t.log);
        assert_eq!(back.adam.t, t.adam.t);
        assert_eq!(back.adam.m.len(), t.adam.m.len());
        let a = model_tensors(&mut t);
        let b = model_tensors(&mut back);
        assert_eq!(a.len(), b.len());
        for ((na, _, va), (nb, _, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            for (x, y) in va.iter().zip(vb) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
        assert!(back.model.is_trained());
        back.train_epoch(&data).unwrap();
        assert_eq!(back.log.len(), 2);
        assert_eq!(back.log[1].epoch, 1);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));
    }
}
