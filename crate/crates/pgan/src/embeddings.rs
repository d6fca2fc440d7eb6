//! Embedding export: row-major little-endian `f32` values plus a JSON
//! sidecar (`<file>.json`) with the count, dimension, role, a SHA-256 of
//! the value bytes and a SHA-256 of the checkpoint that produced them.

use std::fs;
use std::path::{Path, PathBuf};

use pgan_core::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub count: usize,
    pub dim: usize,
    /// What the rows are, e.g. `query`, `gallery` or `test`.
    pub role: String,
    pub sha256: String,
    /// Hash of the source checkpoint file, when there is one.
    #[serde(default)]
    pub checkpoint_sha256: Option<String>,
    /// Image file of each row.
    pub names: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn to_bytes(emb: &Matrix) -> Vec<u8> {
    emb.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn write_embeddings(
    path: &Path,
    emb: &Matrix,
    role: &str,
    names: &[String],
    checkpoint: Option<&Path>,
) -> Result<EmbeddingMeta> {
    if names.len() != emb.rows {
        return Err(Error::Mismatch(format!("{} names for {} embeddings", names.len(), emb.rows)));
    }
    let checkpoint_sha256 = match checkpoint {
        Some(c) => Some(hex::encode(Sha256::digest(fs::read(c).map_err(Error::io(c))?))),
        None => None,
    };
    let bytes = to_bytes(emb);
    let meta = EmbeddingMeta {
        count: emb.rows,
        dim: emb.cols,
        role: role.into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        checkpoint_sha256,
        names: names.to_vec(),
    };
    fs::write(path, &bytes).map_err(Error::io(path))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&side, e.to_string()))?;
    fs::write(&side, json).map_err(Error::io(&side))?;
    Ok(meta)
}

/// Read embeddings back, checking them against the sidecar's size and hash.
pub fn read_embeddings(path: &Path) -> Result<(Matrix, EmbeddingMeta)> {
    let side = sidecar_path(path);
    let meta: EmbeddingMeta = serde_json::from_str(&fs::read_to_string(&side).map_err(Error::io(&side))?)
        .map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() != 4 * meta.count * meta.dim {
        return Err(Error::format(path, format!("{} bytes for {}×{} values", bytes.len(), meta.count, meta.dim)));
    }
    if hex::encode(Sha256::digest(&bytes)) != meta.sha256 {
        return Err(Error::format(path, "content hash does not match the sidecar"));
    }
    let data =
        bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes")))).collect();
    Ok((Matrix::from_vec(meta.count, meta.dim, data)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.f32");
        let m = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.0, 3.0]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let ckpt = dir.path().join("c.pgan");
        fs::write(&ckpt, b"abc").unwrap();
        let meta = write_embeddings(&path, &m, "test", &names, Some(&ckpt)).unwrap();
        assert_eq!((meta.count, meta.dim), (2, 3));
        assert_eq!(
            meta.checkpoint_sha256.as_deref(),
            Some("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        );
        let (back, meta2) = read_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(read_embeddings(&path).is_err());
    }
}
