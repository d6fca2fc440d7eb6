//! Model and training configuration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Model variant: the plain global model, attention over every feature cell,
/// part features with fixed uniform weights, or learned part attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone, refine, BN neck; no part branch.
    Baseline,
    /// Part attention applied to every feature-map cell; no part proposals.
    Grid,
    /// Part branch with fixed uniform weights `1/D`.
    PganUniform,
    /// Full model with learned part attention.
    Pgan,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Grid, Variant::PganUniform, Variant::Pgan];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Grid => "grid",
            Variant::PganUniform => "pgan_uniform",
            Variant::Pgan => "pgan",
        }
    }

    pub fn has_part_branch(self) -> bool {
        self != Variant::Baseline
    }

    pub fn uses_proposals(self) -> bool {
        matches!(self, Variant::PganUniform | Variant::Pgan)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.iter().copied().find(|v| v.as_str() == s).ok_or_else(|| {
            Error::Parse(format!("unknown variant `{s}` (expected baseline, grid, pgan_uniform or pgan)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Number of part regions kept per image.
    pub parts: usize,
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    pub margin: f64,
    /// Channel widths of the first backbone blocks; the last block outputs `channels`.
    pub backbone_widths: Vec<usize>,
    /// Backbone output channels (C).
    pub channels: usize,
    /// Channels after refine (C'); the fused embedding has `2 * refined_channels`.
    pub refined_channels: usize,
    pub se_reduction: usize,
    pub remove_last_stride: bool,
    pub identities_per_batch: usize,
    pub images_per_identity: usize,
    pub lr0: f64,
    /// Learning-rate multiplier for the attention scorer's parameters.
    pub attention_lr_scale: f64,
    /// Weight decay of the attention scorer's parameters.
    pub attention_weight_decay: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub erasing_prob: f64,
    pub flip_prob: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub global_triplet: bool,
    pub part_triplet: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small CPU-friendly setting.
    pub fn desk() -> Self {
        Self {
            variant: Variant::Pgan,
            parts: 8,
            lambda: 2.0,
            margin: 0.3,
            backbone_widths: vec![16, 32, 64],
            channels: 64,
            refined_channels: 32,
            se_reduction: 4,
            remove_last_stride: true,
            identities_per_batch: 4,
            images_per_identity: 4,
            lr0: 3e-3,
            attention_lr_scale: 33.0,
            attention_weight_decay: 0.0,
            decay_every: 10,
            decay_factor: 0.5,
            epochs: 30,
            erasing_prob: 0.0,
            flip_prob: 0.0,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            global_triplet: true,
            part_triplet: true,
            seed: 0,
        }
    }

    /// Full-size setting (224×224 inputs, ResNet-sized channels).
    pub fn full_scale() -> Self {
        Self {
            backbone_widths: vec![64, 256, 512, 1024],
            channels: 2048,
            refined_channels: 256,
            se_reduction: 16,
            identities_per_batch: 16,
            images_per_identity: 4,
            lr0: 1.75e-4,
            attention_lr_scale: 1.0,
            attention_weight_decay: 5e-4,
            decay_every: 20,
            epochs: 130,
            erasing_prob: 0.5,
            flip_prob: 0.5,
            ..Self::desk()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.images_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.parts == 0 {
            return fail("parts must be at least 1");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail("lambda must be a finite non-negative number");
        }
        if !(self.margin >= 0.0) {
            return fail("margin must be non-negative");
        }
        if self.refined_channels == 0 || self.refined_channels > self.channels {
            return fail("refined_channels must be in 1..=channels");
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) || self.channels == 0 {
            return fail("backbone widths and channels must be positive");
        }
        if self.se_reduction == 0 || self.channels < self.se_reduction {
            return fail("se_reduction must be in 1..=channels");
        }
        if self.identities_per_batch < 2 {
            return fail("identities_per_batch must be at least 2");
        }
        if self.images_per_identity < 2 {
            return fail("images_per_identity must be at least 2");
        }
        if !(self.lr0 > 0.0) || self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return fail("learning-rate schedule must be positive");
        }
        if !(self.attention_lr_scale > 0.0) || !self.attention_lr_scale.is_finite() {
            return fail("attention_lr_scale must be a finite positive number");
        }
        if !(self.weight_decay >= 0.0) || !(self.attention_weight_decay >= 0.0) {
            return fail("weight decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.erasing_prob) || !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("erasing_prob and flip_prob must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam moment coefficients must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_momentum must be in [0, 1]");
        }
        Ok(())
    }

    /// Total backbone stride: 2 per block, minus the last when it is removed.
    pub fn backbone_stride(&self) -> usize {
        let blocks = self.backbone_widths.len() + 1;
        let strided = if self.remove_last_stride { blocks - 1 } else { blocks };
        1 << strided
    }
}

/// Architecture of one model instance (derived from a [`TrainConfig`] plus
/// the data geometry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub backbone_widths: Vec<usize>,
    pub channels: usize,
    pub refined_channels: usize,
    pub se_reduction: usize,
    pub remove_last_stride: bool,
    pub parts: usize,
    pub num_classes: usize,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn from_train(
        cfg: &TrainConfig,
        in_channels: usize,
        image_h: usize,
        image_w: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            variant: cfg.variant,
            in_channels,
            image_h,
            image_w,
            backbone_widths: cfg.backbone_widths.clone(),
            channels: cfg.channels,
            refined_channels: cfg.refined_channels,
            se_reduction: cfg.se_reduction,
            remove_last_stride: cfg.remove_last_stride,
            parts: cfg.parts,
            num_classes,
            bn_momentum: cfg.bn_momentum,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.refined_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::desk().validate().unwrap();
        TrainConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn full_scale_setting_batches_sixteen_ids_of_four() {
        let p = TrainConfig::full_scale();
        assert_eq!(p.batch_size(), 64);
        assert_eq!(p.parts, 8);
        assert_eq!(p.lambda, 2.0);
        assert_eq!(p.lr0, 1.75e-4);
        assert_eq!(2 * p.refined_channels, 512);
    }

    #[test]
    fn rejects_refined_wider_than_backbone() {
        let cfg = TrainConfig { refined_channels: 128, ..TrainConfig::desk() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn last_stride_removal_halves_total_stride() {
        let mut cfg = TrainConfig::desk();
        assert_eq!(cfg.backbone_stride(), 8);
        cfg.remove_last_stride = false;
        assert_eq!(cfg.backbone_stride(), 16);
        let mut full = TrainConfig::full_scale();
        assert_eq!(224 / full.backbone_stride(), 14);
        full.remove_last_stride = false;
        assert_eq!(224 / full.backbone_stride(), 7);
    }
}
