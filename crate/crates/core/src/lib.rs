//! Part-guided attention for instance retrieval.
//!
//! The crate holds the numerical core: feature tensors, differentiable
//! layers with hand-written backward passes, the part proposal and part
//! attention machinery, the fused embedding head, metric-learning losses,
//! the training loop, retrieval metrics and a synthetic dataset generator.
//!
//! It builds without `std` (with `alloc`); the default `std` feature only
//! enables faster runtime-dispatched matrix kernels. File formats, the
//! experiment pipeline and the CLI live in the companion `pgan` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod aggregation;
pub mod augment;
pub mod backbone;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pam;
pub mod proposals;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, TrainConfig, Variant};
pub use data::{Attribute, Dataset, Image, ImageSample, PartBox, ProtocolKind, RetrievalProtocol, Split};
pub use error::{Error, Result};
pub use eval::{Metric, MetricsReport};
pub use losses::LossReport;
pub use model::PganModel;
pub use pam::AttentionWeights;
pub use proposals::{PartMask, ProposalSet};
pub use tensor::{FeatureMap, Matrix, Tensor};
