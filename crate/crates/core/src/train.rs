//! The training loop: P×K batches, augmentation, the joint loss, Adam.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{flip_horizontal, random_erasing};
use crate::config::{ModelConfig, TrainConfig, Variant};
use crate::data::Image;
use crate::losses::{batch_hard_triplet, cross_entropy, LossReport};
use crate::model::{OutputGrads, PganModel};
use crate::nn::Mode;
use crate::optim::{lr_schedule, Adam};
use crate::proposals::PartMask;
use crate::rng;
use crate::sampler::PkSampler;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Training images with their dense labels and (for proposal-based
/// variants) the D part masks of each image.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub images: &'a [Image],
    pub labels: &'a [usize],
    pub masks: &'a [Vec<PartMask>],
    pub num_classes: usize,
}

impl TrainData<'_> {
    fn check(&self, variant: Variant, parts: usize) -> Result<()> {
        if self.images.is_empty() || self.images.len() != self.labels.len() {
            return Err(Error::Precondition(format!(
                "{} training images for {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Precondition(format!("label {l} outside {} classes", self.num_classes)));
        }
        if variant.uses_proposals()
            && (self.masks.len() != self.images.len() || self.masks.iter().any(|m| m.len() != parts))
        {
            return Err(Error::Precondition(format!("every training image needs {parts} part masks")));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    pub lr: f64,
}

/// Model, optimizer and progress; everything a checkpoint must hold.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: PganModel,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        in_channels: usize,
        image_h: usize,
        image_w: usize,
        num_classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mc = ModelConfig::from_train(&cfg, in_channels, image_h, image_w, num_classes);
        let model = PganModel::new(mc, cfg.global_triplet || cfg.part_triplet, cfg.seed)?;
        let adam = Adam::from_config(&cfg);
        Ok(Self { cfg, model, adam, epoch: 0, log: Vec::new() })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Run one epoch and append its mean losses to the log.
    pub fn train_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochLog> {
        data.check(self.cfg.variant, self.cfg.parts)?;
        let sampler =
            PkSampler::new(data.labels, self.cfg.identities_per_batch, self.cfg.images_per_identity, self.cfg.seed)?;
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        let batches = sampler.epoch(epoch);
        let mut sum = LossReport::default();
        for (b, indices) in batches.iter().enumerate() {
            let r = self.step(data, indices, epoch, b, lr)?;
            sum.l_c += r.l_c;
            sum.l_f += r.l_f;
            sum.l_g += r.l_g;
            sum.l_p += r.l_p;
        }
        let n = batches.len().max(1) as f64;
        let loss = LossReport::new(sum.l_c / n, sum.l_f / n, sum.l_g / n, sum.l_p / n, self.cfg.lambda);
        let entry = EpochLog { epoch, loss, lr };
        self.log.push(entry);
        self.epoch += 1;
        Ok(entry)
    }

    /// Train until the configured epoch count, calling `on_epoch` after each.
    pub fn run(&mut self, data: &TrainData<'_>, mut on_epoch: impl FnMut(&Trainer, &EpochLog)) -> Result<()> {
        while !self.is_finished() {
            let entry = self.train_epoch(data)?;
            on_epoch(self, &entry);
        }
        Ok(())
    }

    fn batch_inputs(
        &self,
        data: &TrainData<'_>,
        indices: &[usize],
        epoch: usize,
        batch: usize,
    ) -> (Tensor, Vec<Vec<PartMask>>) {
        let first = &data.images[indices[0]];
        let mut images = Tensor::zeros(indices.len(), first.channels, first.h, first.w);
        let mut masks = Vec::with_capacity(indices.len());
        for (pos, &i) in indices.iter().enumerate() {
            let mut r = rng::rng_for(self.cfg.seed, &[0xa06, epoch as u64, batch as u64, pos as u64]);
            let mut img = data.images[i].clone();
            let flip = r.gen::<f64>() < self.cfg.flip_prob;
            if flip {
                flip_horizontal(&mut img);
            }
            random_erasing(&mut img, self.cfg.erasing_prob, &mut r);
            images.sample_mut(pos).copy_from_slice(&img.data);
            if self.cfg.variant.uses_proposals() {
                let m = &data.masks[i];
                masks.push(if flip { m.iter().map(PartMask::flipped).collect() } else { m.clone() });
            }
        }
        (images, masks)
    }

    fn step(
        &mut self,
        data: &TrainData<'_>,
        indices: &[usize],
        epoch: usize,
        batch: usize,
        lr: f64,
    ) -> Result<LossReport> {
        let (images, masks) = self.batch_inputs(data, indices, epoch, batch);
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        let out = self.model.forward(&images, &masks, Mode::Train, false)?;
        let margin = self.cfg.margin;
        let (l_c, mut d_logits) = cross_entropy(out.logits.as_ref().expect("training forward"), &labels)?;
        d_logits.scale(self.cfg.lambda);
        let tri_f = batch_hard_triplet(&out.e_f, &labels, margin)?;
        let mut grads = OutputGrads { e_f: Some(tri_f.grad), e_g: None, e_p: None, logits: Some(d_logits) };
        let (mut l_g, mut l_p) = (0.0, 0.0);
        if self.cfg.global_triplet {
            if let Some(e) = &out.e_g {
                let t = batch_hard_triplet(e, &labels, margin)?;
                l_g = t.loss;
                grads.e_g = Some(t.grad);
            }
        }
        if self.cfg.part_triplet {
            if let Some(e) = &out.e_p {
                let t = batch_hard_triplet(e, &labels, margin)?;
                l_p = t.loss;
                grads.e_p = Some(t.grad);
            }
        }
        let report = LossReport::new(l_c, tri_f.loss, l_g, l_p, self.cfg.lambda);
        if !report.is_finite() {
            return Err(Error::Diverged { epoch, batch, detail: format!("{report:?}") });
        }
        self.model.backward(&grads);
        let model = &mut self.model;
        let cfg = &self.cfg;
        let group = |name: &str| {
            if name.starts_with("attention.") {
                (cfg.attention_lr_scale, cfg.attention_weight_decay)
            } else {
                (1.0, cfg.weight_decay)
            }
        };
        self.adam.step_grouped(lr, group, |f| model.visit(f));
        Ok(report)
    }
}
