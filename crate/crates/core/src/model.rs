//! The full network: backbone, part attention, the three refine paths, the
//! BN neck and the identity classifier.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::aggregation::{fuse_batch, gap_batch, gap_batch_backward, split_batch, BnNeck, Refine};
use crate::backbone::Backbone;
use crate::config::{ModelConfig, Variant};
use crate::losses::Classifier;
use crate::nn::{Mode, Param, ParamVisitor};
use crate::pam::{AttentionWeights, PartAttention};
use crate::proposals::{PartMask, ProposalSet};
use crate::rng;
use crate::tensor::{Matrix, Tensor};
use crate::{Error, Result};

/// Everything one forward pass produces for a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Fused refined embedding (`2C'`), before the neck.
    pub e_f: Matrix,
    /// Refined global embedding (`C'`), when computed.
    pub e_g: Option<Matrix>,
    /// Refined part-guided embedding (`C'`), when computed.
    pub e_p: Option<Matrix>,
    /// BN-neck output, the retrieval embedding.
    pub e_fb: Matrix,
    pub logits: Option<Matrix>,
    /// Per-sample part weights (empty for the baseline).
    pub weights: Vec<AttentionWeights>,
    /// Part-guided feature map, kept only when requested.
    pub fp: Option<Tensor>,
}

/// Upstream gradients for [`PganModel::backward`].
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub e_f: Option<Matrix>,
    pub e_g: Option<Matrix>,
    pub e_p: Option<Matrix>,
    pub logits: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct PganModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub attention: Option<PartAttention>,
    pub refine_f: Refine,
    pub refine_g: Option<Refine>,
    pub refine_p: Option<Refine>,
    pub neck: BnNeck,
    pub classifier: Classifier,
    grid_masks: Option<Vec<PartMask>>,
    feat_geom: (usize, usize),
}

impl PganModel {
    /// Build a freshly initialized model. `side_branches` adds the separate
    /// global and part refine paths used by their triplet terms.
    pub fn new(config: ModelConfig, side_branches: bool, seed: u64) -> Result<Self> {
        let mut rng = rng::rng_for(seed, &[0x90de1]);
        let c = config.channels;
        let cr = config.refined_channels;
        let m = config.bn_momentum;
        let r = config.se_reduction;
        let backbone =
            Backbone::new(config.in_channels, &config.backbone_widths, c, config.remove_last_stride, m, &mut rng);
        let feat_geom = backbone.output_geometry(config.image_h, config.image_w);
        if feat_geom.0 < 2 || feat_geom.1 < 2 {
            return Err(Error::Config(format!(
                "{}x{} images give a {}x{} feature map",
                config.image_h, config.image_w, feat_geom.0, feat_geom.1
            )));
        }
        let part_branch = config.variant.has_part_branch();
        let attention = match config.variant {
            Variant::Baseline => None,
            Variant::PganUniform => Some(PartAttention::uniform()),
            Variant::Grid | Variant::Pgan => Some(PartAttention::learned(c, &mut rng)),
        };
        let fused_in = if part_branch { 2 * c } else { c };
        let refine_f = Refine::new(fused_in, 2 * cr, r, m, &mut rng);
        let (refine_g, refine_p) = if part_branch && side_branches {
            (Some(Refine::new(c, cr, r, m, &mut rng)), Some(Refine::new(c, cr, r, m, &mut rng)))
        } else {
            (None, None)
        };
        let neck = BnNeck::new(2 * cr, m);
        let classifier = Classifier::new(2 * cr, config.num_classes.max(1), &mut rng);
        let grid_masks = (config.variant == Variant::Grid)
            .then(|| ProposalSet::grid((config.image_h, config.image_w), feat_geom).masks);
        Ok(Self { config, backbone, attention, refine_f, refine_g, refine_p, neck, classifier, grid_masks, feat_geom })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Feature-map geometry the part masks must match.
    pub fn feature_geometry(&self) -> (usize, usize) {
        self.feat_geom
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Whether inference can run (the BN running statistics exist).
    pub fn is_trained(&self) -> bool {
        self.neck.bn.is_initialized()
    }

    /// Forward a batch. `masks[s]` are the part masks of sample `s` (ignored
    /// by the baseline and the grid variant). Logits are computed only in
    /// training mode.
    pub fn forward(
        &mut self,
        images: &Tensor,
        masks: &[Vec<PartMask>],
        mode: Mode,
        keep_fp: bool,
    ) -> Result<ForwardOutput> {
        if (images.h, images.w) != (self.config.image_h, self.config.image_w) {
            return Err(Error::Shape(format!(
                "model built for {}x{} images, got {}x{}",
                self.config.image_h, self.config.image_w, images.h, images.w
            )));
        }
        let fg = self.backbone.forward(images, mode)?;
        let mut weights = Vec::new();
        let mut e_g = None;
        let mut e_p = None;
        let mut fp_out = None;
        let fused = match self.attention.as_mut() {
            None => fg,
            Some(att) => {
                let grid_sets;
                let masks = match &self.grid_masks {
                    Some(g) => {
                        grid_sets = alloc::vec![g.clone(); images.n];
                        &grid_sets[..]
                    }
                    None => masks,
                };
                let (fp, w) = att.forward(&fg, masks)?;
                weights = w;
                if let Some(rg) = self.refine_g.as_mut() {
                    e_g = Some(gap_batch(&rg.forward(&fg, mode)?));
                }
                if let Some(rp) = self.refine_p.as_mut() {
                    e_p = Some(gap_batch(&rp.forward(&fp, mode)?));
                }
                let fused = fuse_batch(&fg, &fp);
                if keep_fp {
                    fp_out = Some(fp);
                }
                fused
            }
        };
        let e_f = gap_batch(&self.refine_f.forward(&fused, mode)?);
        let e_fb = self.neck.forward(&e_f, mode)?;
        let logits = (mode == Mode::Train).then(|| self.classifier.forward(&e_fb));
        Ok(ForwardOutput { e_f, e_g, e_p, e_fb, logits, weights, fp: fp_out })
    }

    /// Back-propagate through the last training-mode forward pass,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, grads: &OutputGrads) {
        let (h, w) = self.feat_geom;
        let mut d_ef = grads.e_f.clone();
        if let Some(dl) = &grads.logits {
            let d_efb = self.classifier.backward(dl);
            let from_neck = self.neck.backward(&d_efb);
            match d_ef.as_mut() {
                Some(d) => d.add_assign(&from_neck),
                None => d_ef = Some(from_neck),
            }
        }
        let d_ef = d_ef.expect("backward needs a gradient on the fused embedding");
        let d_fused = self.refine_f.backward(&gap_batch_backward(&d_ef, h, w));
        let Some(att) = self.attention.as_mut() else {
            self.backbone.backward(&d_fused);
            return;
        };
        let c = self.config.channels;
        let (mut d_fg, mut d_fp) = split_batch(&d_fused, c);
        if let (Some(rg), Some(d)) = (self.refine_g.as_mut(), &grads.e_g) {
            d_fg.add_assign(&rg.backward(&gap_batch_backward(d, h, w)));
        }
        if let (Some(rp), Some(d)) = (self.refine_p.as_mut(), &grads.e_p) {
            d_fp.add_assign(&rp.backward(&gap_batch_backward(d, h, w)));
        }
        d_fg.add_assign(&att.backward(&d_fp));
        self.backbone.backward(&d_fg);
    }

    /// Visit every parameter and buffer under a stable dotted name.
    pub fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        self.backbone.visit("backbone", f);
        if let Some(att) = self.attention.as_mut() {
            att.visit("attention", f);
        }
        self.refine_f.visit("refine_f", f);
        if let Some(r) = self.refine_g.as_mut() {
            r.visit("refine_g", f);
        }
        if let Some(r) = self.refine_p.as_mut() {
            r.visit("refine_p", f);
        }
        self.neck.visit("neck", f);
        self.classifier.visit("classifier", f);
    }

    /// Names and shapes of all parameters, in visiting order.
    pub fn param_names(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name: &str, p: &mut Param| out.push((String::from(name), p.shape.clone())));
        out
    }

    pub fn trainable_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_: &str, p: &mut Param| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }

    /// Retrieval embeddings (BN-neck output) in inference mode.
    pub fn embed(&mut self, images: &Tensor, masks: &[Vec<PartMask>]) -> Result<Matrix> {
        if !self.is_trained() {
            return Err(Error::Uninitialized("BN neck has no running statistics; train the model first".into()));
        }
        Ok(self.forward(images, masks, Mode::Eval, false)?.e_fb)
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_: &str, p: &mut Param| p.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::gradcheck;
    use rand::Rng;

    fn small(variant: Variant) -> ModelConfig {
        let cfg = TrainConfig {
            variant,
            backbone_widths: vec![4],
            channels: 8,
            refined_channels: 4,
            se_reduction: 2,
            parts: 3,
            ..TrainConfig::desk()
        };
        ModelConfig::from_train(&cfg, 3, 32, 32, 5)
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut r = rng::rng_for(seed, &[]);
        Tensor::from_vec(n, 3, 32, 32, (0..n * 3 * 32 * 32).map(|_| r.gen()).collect()).unwrap()
    }

    fn masks(model: &PganModel, n: usize) -> Vec<Vec<PartMask>> {
        let (h, w) = model.feature_geometry();
        (0..n)
            .map(|s| {
                vec![
                    PartMask::single_cell(h, w, s % h, 1),
                    PartMask::full(h, w),
                    PartMask::from_grid(h, w, (0..h * w).map(|i| u8::from(i < w * 2)).collect()).unwrap(),
                ]
            })
            .collect()
    }

    #[test]
    fn embedding_shapes_per_variant() {
        for v in Variant::ALL {
            let mut m = PganModel::new(small(v), true, 1).unwrap();
            assert_eq!(m.feature_geometry(), (16, 16));
            let x = batch(4, 2);
            let mk = masks(&m, 4);
            let out = m.forward(&x, &mk, Mode::Train, false).unwrap();
            assert_eq!((out.e_f.rows, out.e_f.cols), (4, 8));
            assert_eq!(out.logits.as_ref().unwrap().cols, 5);
            assert_eq!(out.e_g.is_some(), v.has_part_branch());
            let expected_parts = match v {
                Variant::Baseline => 0,
                Variant::Grid => 256,
                _ => 3,
            };
            assert!(out.weights.iter().all(|w| w.len() == expected_parts));
            assert_eq!(out.weights.len(), if v == Variant::Baseline { 0 } else { 4 });
        }
    }

    #[test]
    fn uniform_variant_has_uniform_weights() {
        let mut m = PganModel::new(small(Variant::PganUniform), true, 1).unwrap();
        let mk = masks(&m, 2);
        let out = m.forward(&batch(2, 3), &mk, Mode::Train, false).unwrap();
        for w in &out.weights {
            assert!(w.as_slice().iter().all(|&x| x == 1.0 / 3.0));
        }
    }

    #[test]
    fn inference_before_training_is_rejected() {
        let mut m = PganModel::new(small(Variant::Pgan), true, 1).unwrap();
        let mk = masks(&m, 1);
        assert!(matches!(m.embed(&batch(1, 4), &mk), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn end_to_end_input_gradient_through_attention() {
        // Gradient of a fixed projection of all embeddings with respect to one
        // attention parameter, against central differences.
        let mut m = PganModel::new(small(Variant::Pgan), true, 5).unwrap();
        let x = batch(2, 6);
        let mk = masks(&m, 2);
        let mut r = rng::rng_for(7, &[]);
        let u_f: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let u_g: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let u_p: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let objective = |m: &mut PganModel| -> f64 {
            let o = m.forward(&x, &mk, Mode::Train, false).unwrap();
            let dot = |a: &Matrix, u: &[f64]| a.data.iter().zip(u).map(|(p, q)| p * q).sum::<f64>();
            dot(&o.e_f, &u_f) + dot(o.e_g.as_ref().unwrap(), &u_g) + dot(o.e_p.as_ref().unwrap(), &u_p)
        };
        let probe = m.clone();
        objective(&mut m);
        m.backward(&OutputGrads {
            e_f: Some(Matrix::from_vec(2, 8, u_f.clone()).unwrap()),
            e_g: Some(Matrix::from_vec(2, 4, u_g.clone()).unwrap()),
            e_p: Some(Matrix::from_vec(2, 4, u_p.clone()).unwrap()),
            logits: None,
        });
        let analytic = match &m.attention.as_ref().unwrap().mode {
            crate::pam::WeightMode::Learned(psi) => psi.fc.direction.grad.clone(),
            _ => unreachable!(),
        };
        let base = match &probe.attention.as_ref().unwrap().mode {
            crate::pam::WeightMode::Learned(psi) => psi.fc.direction.value.clone(),
            _ => unreachable!(),
        };
        let numeric = gradcheck::numeric(&base, |v| {
            let mut p = probe.clone();
            if let crate::pam::WeightMode::Learned(psi) = &mut p.attention.as_mut().unwrap().mode {
                psi.fc.direction.value = v.to_vec();
            }
            objective(&mut p)
        });
        let err = gradcheck::relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }
}
