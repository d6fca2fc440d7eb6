//! File formats, the experiment pipeline and the `pgan` command line on top
//! of [`pgan_core`].
//!
//! On disk a dataset is a directory holding `train.tsv` and `test.tsv`
//! manifests, the image files they name, an optional `proposals.tsv`
//! detector cache and, for generated data, a `synth_meta.json` sidecar.

pub mod checkpoint;
pub mod config;
pub mod embeddings;
mod error;
pub mod imageio;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod runlog;

pub use error::{Error, Result};
