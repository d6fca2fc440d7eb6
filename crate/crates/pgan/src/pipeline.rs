//! The experiment pipeline: part masks, training, embedding, evaluation,
//! attention reports and ablation sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use pgan_core::data::{split_protocol, ProtocolKind};
use pgan_core::eval::{evaluate, protocol_rows};
use pgan_core::model::ForwardOutput;
use pgan_core::nn::Mode;
use pgan_core::pam::{pam_heatmap, GrayMap};
use pgan_core::proposals::{select_top_d_indices, ProposalSet};
use pgan_core::synth::{BoxKind, SynthData, SynthMeta};
use pgan_core::train::{EpochLog, TrainData, Trainer};
use pgan_core::{
    Dataset, ImageSample, Matrix, MetricsReport, PartBox, PartMask, PganModel, Tensor, TrainConfig, Variant,
};

use crate::checkpoint;
use crate::config::{EvalConfig, ExperimentConfig};
use crate::manifest::DatasetDir;
use crate::report::{self, AblationRow, AttentionRow, AttentionSummary, PartKind};
use crate::{Error, Result};

pub const CHECKPOINT: &str = "checkpoint.pgan";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ATTENTION_CSV: &str = "attention.csv";
pub const ATTENTION_JSON: &str = "attention_summary.json";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Train and test splits with their cached detections and, for generated
/// data, the generation record.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Dataset,
    pub test: Dataset,
    pub proposals: BTreeMap<String, Vec<PartBox>>,
    pub meta: Option<SynthMeta>,
}

impl From<SynthData> for Corpus {
    fn from(data: SynthData) -> Self {
        let proposals = data.proposals();
        Self { train: data.train, test: data.test, proposals, meta: Some(data.meta) }
    }
}

impl From<DatasetDir> for Corpus {
    fn from(dir: DatasetDir) -> Self {
        Self { train: dir.train, test: dir.test, proposals: dir.proposals, meta: dir.meta }
    }
}

impl Corpus {
    /// Cached detections of a sample, or its annotated boxes when the cache
    /// has no entry.
    pub fn detections<'a>(&'a self, sample: &'a ImageSample) -> &'a [PartBox] {
        self.proposals.get(&sample.name).map_or(&sample.boxes, Vec::as_slice)
    }

    /// Common `(channels, height, width)` of every image.
    pub fn geometry(&self) -> Result<(usize, usize, usize)> {
        let mut all = self.train.samples.iter().chain(&self.test.samples);
        let first = all.next().ok_or_else(|| Error::Mismatch("dataset has no images".into()))?;
        let g = (first.pixels.channels, first.pixels.h, first.pixels.w);
        if let Some(s) = all.find(|s| (s.pixels.channels, s.pixels.h, s.pixels.w) != g) {
            return Err(Error::Mismatch(format!(
                "image `{}` is {}x{}x{}, expected {}x{}x{}",
                s.name, s.pixels.channels, s.pixels.h, s.pixels.w, g.0, g.1, g.2
            )));
        }
        Ok(g)
    }

    /// Selected part boxes and masks of every sample of `ds`.
    pub fn part_sets(&self, ds: &Dataset, parts: usize, feat_geom: (usize, usize)) -> Vec<ProposalSet> {
        ds.samples
            .iter()
            .map(|s| ProposalSet::build(self.detections(s), parts, (s.pixels.h, s.pixels.w), feat_geom))
            .collect()
    }

    /// Where each of the `parts` selected boxes of a sample came from; `None`
    /// without a generation record or when the cached detections differ from it.
    pub fn part_kinds(&self, sample: &ImageSample, parts: usize) -> Option<Vec<PartKind>> {
        let m = self.meta.as_ref()?.get(&sample.name)?;
        if self.detections(sample) != m.detections.as_slice() {
            return None;
        }
        let kinds = select_top_d_indices(&m.detections, parts)
            .into_iter()
            .map(|slot| match slot {
                None => PartKind::Fallback,
                Some(i) => match m.detection_sources[i] {
                    None => PartKind::FalsePositive,
                    Some(g) => match m.box_kinds[g] {
                        BoxKind::IdentityGlyph => PartKind::Identity,
                        BoxKind::Distractor => PartKind::Distractor,
                        BoxKind::Structural => PartKind::Structural,
                    },
                },
            })
            .collect();
        Some(kinds)
    }
}

fn masks_of(sets: Vec<ProposalSet>) -> Vec<Vec<PartMask>> {
    sets.into_iter().map(|s| s.masks).collect()
}

/// Train (or continue training) on the corpus's train split, calling
/// `on_epoch` after every epoch.
pub fn train(
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<Trainer>,
    mut on_epoch: impl FnMut(&mut Trainer, &EpochLog) -> Result<()>,
) -> Result<Trainer> {
    let (channels, h, w) = corpus.geometry()?;
    let (labels, classes) = corpus.train.dense_labels();
    let mut trainer = match resume {
        Some(t) => {
            let m = &t.model.config;
            if (m.in_channels, m.image_h, m.image_w, m.num_classes) != (channels, h, w, classes) {
                return Err(Error::Mismatch(format!(
                    "checkpoint expects {}x{}x{} images and {} identities; the dataset has {channels}x{h}x{w} and {classes}",
                    m.in_channels, m.image_h, m.image_w, m.num_classes
                )));
            }
            t
        }
        None => Trainer::new(cfg.clone(), channels, h, w, classes)?,
    };
    let images: Vec<_> = corpus.train.samples.iter().map(|s| s.pixels.clone()).collect();
    let masks = if trainer.cfg.variant.uses_proposals() {
        masks_of(corpus.part_sets(&corpus.train, trainer.cfg.parts, trainer.model.feature_geometry()))
    } else {
        Vec::new()
    };
    let data = TrainData { images: &images, labels: &labels, masks: &masks, num_classes: classes };
    while !trainer.is_finished() {
        let entry = trainer.train_epoch(&data)?;
        log::info!(
            "epoch {} total {:.4} (L_c {:.4} L_f {:.4} L_g {:.4} L_p {:.4}) lr {:.2e}",
            entry.epoch,
            entry.loss.total,
            entry.loss.l_c,
            entry.loss.l_f,
            entry.loss.l_g,
            entry.loss.l_p,
            entry.lr
        );
        on_epoch(&mut trainer, &entry)?;
    }
    Ok(trainer)
}

fn check_geometry(model: &PganModel, ds: &Dataset) -> Result<()> {
    let m = &model.config;
    if let Some(s) =
        ds.samples.iter().find(|s| (s.pixels.channels, s.pixels.h, s.pixels.w) != (m.in_channels, m.image_h, m.image_w))
    {
        return Err(Error::Mismatch(format!(
            "model expects {}x{}x{} images but `{}` is {}x{}x{}",
            m.in_channels, m.image_h, m.image_w, s.name, s.pixels.channels, s.pixels.h, s.pixels.w
        )));
    }
    if !model.is_trained() {
        return Err(pgan_core::Error::Uninitialized("the model has not been trained".into()).into());
    }
    Ok(())
}

/// Inference-mode forward passes over `ds` in chunks of `batch`.
fn forward_chunks(
    model: &mut PganModel,
    corpus: &Corpus,
    ds: &Dataset,
    batch: usize,
    keep_fp: bool,
    mut each: impl FnMut(usize, ForwardOutput) -> Result<()>,
) -> Result<()> {
    check_geometry(model, ds)?;
    let masks = if model.variant().uses_proposals() {
        masks_of(corpus.part_sets(ds, model.config.parts, model.feature_geometry()))
    } else {
        Vec::new()
    };
    let m = &model.config;
    let (c, h, w) = (m.in_channels, m.image_h, m.image_w);
    for start in (0..ds.len()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(ds.len());
        let mut x = Tensor::zeros(end - start, c, h, w);
        for (k, s) in ds.samples[start..end].iter().enumerate() {
            x.sample_mut(k).copy_from_slice(&s.pixels.data);
        }
        let chunk_masks = if masks.is_empty() { &[][..] } else { &masks[start..end] };
        each(start, model.forward(&x, chunk_masks, Mode::Eval, keep_fp)?)?;
    }
    Ok(())
}

/// Retrieval embeddings of every sample of `ds`, row-aligned with it.
pub fn embed(model: &mut PganModel, corpus: &Corpus, ds: &Dataset, batch: usize) -> Result<Matrix> {
    let mut emb = Matrix::zeros(ds.len(), model.embedding_dim());
    forward_chunks(model, corpus, ds, batch, false, |start, out| {
        for r in 0..out.e_fb.rows {
            emb.row_mut(start + r).copy_from_slice(out.e_fb.row(r));
        }
        Ok(())
    })?;
    Ok(emb)
}

/// Score embeddings of a test split. The repeated-gallery protocol averages
/// `eval.repeats` gallery draws seeded `eval.seed..`.
pub fn evaluate_embeddings(ds: &Dataset, emb: &Matrix, eval: &EvalConfig) -> Result<MetricsReport> {
    let once = |seed: u64| -> Result<MetricsReport> {
        let protocol = split_protocol(ds, eval.protocol, seed)?;
        let (q, g) = protocol_rows(&protocol, emb)?;
        Ok(evaluate(&protocol, &q, &g, eval.metric)?)
    };
    match eval.protocol {
        ProtocolKind::Veri => once(eval.seed),
        ProtocolKind::VehicleId => {
            let seeds: Vec<u64> = (0..eval.repeats as u64).map(|k| eval.seed + k).collect();
            let reports = seeds.iter().map(|&s| once(s)).collect::<Result<Vec<_>>>()?;
            Ok(MetricsReport::mean_of(&reports, &seeds)?)
        }
    }
}

/// Per-image part weights of a part-attention model, with heatmaps of the
/// part-guided feature map when `heatmaps` is set.
pub fn attention_rows(
    model: &mut PganModel,
    corpus: &Corpus,
    ds: &Dataset,
    batch: usize,
    heatmaps: bool,
) -> Result<(Vec<AttentionRow>, Vec<GrayMap>)> {
    let variant = model.variant();
    if !variant.has_part_branch() {
        return Err(pgan_core::Error::Precondition(format!("the {variant} variant has no part attention")).into());
    }
    let feat = model.feature_geometry();
    let parts = model.config.parts;
    let mut rows = Vec::with_capacity(ds.len());
    let mut maps = Vec::new();
    forward_chunks(model, corpus, ds, batch, heatmaps, |start, out| {
        for (r, w) in out.weights.iter().enumerate() {
            let s = &ds.samples[start + r];
            let (boxes, kinds) = if variant.uses_proposals() {
                let set = ProposalSet::build(corpus.detections(s), parts, (s.pixels.h, s.pixels.w), feat);
                (set.boxes, corpus.part_kinds(s, parts))
            } else {
                (ProposalSet::grid((s.pixels.h, s.pixels.w), feat).boxes, None)
            };
            rows.push(AttentionRow { file: s.name.clone(), weights: w.as_slice().to_vec(), boxes, kinds });
            if let Some(fp) = &out.fp {
                maps.push(pam_heatmap(&fp.map(r)));
            }
        }
        Ok(())
    })?;
    // Kinds are reported for all rows or for none.
    if rows.iter().any(|r| r.kinds.is_none()) {
        rows.iter_mut().for_each(|r| r.kinds = None);
    }
    Ok((rows, maps))
}

/// Write the attention CSV, its summary and (optionally) heatmaps under `dir`.
pub fn write_attention(dir: &Path, ds: &Dataset, rows: &[AttentionRow], maps: &[GrayMap]) -> Result<Vec<PathBuf>> {
    let csv_path = dir.join(ATTENTION_CSV);
    report::write_text(&csv_path, &report::attention_csv(rows))?;
    let summary_path = dir.join(ATTENTION_JSON);
    let summary = AttentionSummaryFile {
        summary: report::summarize_attention(rows),
        attribute_density: report::attribute_density(rows),
    };
    report::write_json(&summary_path, &summary)?;
    let mut out = vec![csv_path, summary_path];
    if !maps.is_empty() {
        let hdir = dir.join(HEATMAP_DIR);
        std::fs::create_dir_all(&hdir).map_err(Error::io(&hdir))?;
        for (s, m) in ds.samples.iter().zip(maps) {
            let stem =
                Path::new(&s.name).file_stem().map_or_else(|| s.name.clone(), |f| f.to_string_lossy().into_owned());
            crate::imageio::write_heatmap(&hdir.join(format!("{stem}.pgm")), m)?;
        }
        out.push(hdir);
    }
    Ok(out)
}

#[derive(Debug, Clone, serde::Serialize)]
struct AttentionSummaryFile {
    summary: AttentionSummary,
    /// Mean weight and part count per attribute tag.
    attribute_density: BTreeMap<String, (f64, usize)>,
}

/// Everything one train-and-evaluate run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trainer: Trainer,
    pub report: MetricsReport,
    /// Attention statistics, for part-attention variants on generated data.
    pub attention: Option<AttentionSummary>,
    pub outputs: Vec<PathBuf>,
}

/// Train `exp.train` on the corpus, evaluate it on the test split and, when
/// `out` is given, write the checkpoint, loss log, metrics and attention table.
pub fn run_experiment(corpus: &Corpus, exp: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let mut trainer = train(corpus, &exp.train, None, |_, _| Ok(()))?;
    let emb = embed(&mut trainer.model, corpus, &corpus.test, exp.eval.batch)?;
    let report = evaluate_embeddings(&corpus.test, &emb, &exp.eval)?;
    let mut attention = None;
    let mut rows = Vec::new();
    if trainer.cfg.variant.uses_proposals() && corpus.meta.is_some() {
        rows = attention_rows(&mut trainer.model, corpus, &corpus.test, exp.eval.batch, false)?.0;
        if rows.first().is_some_and(|r| r.kinds.is_some()) {
            attention = Some(report::summarize_attention(&rows));
        }
    }
    let mut outputs = Vec::new();
    if let Some(dir) = out {
        let ckpt = dir.join(CHECKPOINT);
        checkpoint::save(&ckpt, &mut trainer)?;
        let log = dir.join(LOSS_LOG);
        report::write_text(&log, &report::loss_log_csv(&trainer.log))?;
        let metrics = dir.join(METRICS_JSON);
        report::write_json(&metrics, &report)?;
        outputs.extend([ckpt, log, metrics]);
        if !rows.is_empty() {
            outputs.extend(write_attention(dir, &corpus.test, &rows, &[])?);
        }
    }
    Ok(RunOutcome { trainer, report, attention, outputs })
}

/// Settings swept by an ablation: every combination runs once per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub parts: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One training run of an ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub parts: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}_d{}_l{}_s{}", self.variant, self.parts, self.lambda, self.seed)
    }
}

impl AblationPlan {
    /// The cross-product in variant, D, λ, seed order. Variants without
    /// proposals ignore D and run only at the first value.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            let parts = if variant.uses_proposals() { &self.parts[..] } else { &self.parts[..self.parts.len().min(1)] };
            for &d in parts {
                for &lambda in &self.lambdas {
                    for &seed in &self.seeds {
                        out.push(Cell { variant, parts: d, lambda, seed });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub report: MetricsReport,
    pub attention: Option<AttentionSummary>,
    pub log: Vec<EpochLog>,
}

/// Worker count for sweeps: `PGAN_THREADS` if set, else the available parallelism.
pub fn thread_limit() -> usize {
    std::env::var("PGAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Run every cell of `plan` on `base`, up to `threads` at a time. Each cell
/// writes into `out/<cell>/` when `out` is given. Results come back in cell order.
pub fn run_ablation(
    corpus: &Corpus,
    base: &ExperimentConfig,
    plan: &AblationPlan,
    out: Option<&Path>,
    threads: usize,
) -> Result<(Vec<CellResult>, Vec<AblationRow>)> {
    let cells = plan.cells();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new(cells.iter().map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(cell) = cells.get(i) else { break };
        let exp = ExperimentConfig {
            train: TrainConfig {
                variant: cell.variant,
                parts: cell.parts,
                lambda: cell.lambda,
                seed: cell.seed,
                ..base.train.clone()
            },
            ..base.clone()
        };
        log::info!("ablation cell {}/{}: {}", i + 1, cells.len(), cell.dir_name());
        let dir = out.map(|o| o.join(cell.dir_name()));
        let r = run_experiment(corpus, &exp, dir.as_deref()).map(|o| CellResult {
            cell: *cell,
            report: o.report,
            attention: o.attention,
            log: o.trainer.log,
        });
        results.lock().expect("no worker panicked")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            s.spawn(work);
        }
    });
    let results = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    let rows = ablation_rows(&results);
    if let Some(dir) = out {
        report::write_text(&dir.join(ABLATION_CSV), &report::ablation_csv(&rows))?;
    }
    Ok((results, rows))
}

/// Aggregate cell results over seeds, one row per (variant, D, λ) in first-seen order.
pub fn ablation_rows(results: &[CellResult]) -> Vec<AblationRow> {
    let mut groups: Vec<((Variant, usize, f64), Vec<&MetricsReport>)> = Vec::new();
    for r in results {
        let key = (r.cell.variant, r.cell.parts, r.cell.lambda);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(&r.report),
            None => groups.push((key, vec![&r.report])),
        }
    }
    groups
        .into_iter()
        .map(|((variant, parts, lambda), reports)| {
            let stat = |f: &dyn Fn(&MetricsReport) -> f64| {
                pgan_core::math::mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (map_mean, map_std) = stat(&|r| r.map);
            let (top1_mean, top1_std) = stat(&|r| r.top(1));
            let (top5_mean, _) = stat(&|r| r.top(5));
            AblationRow {
                variant: variant.to_string(),
                parts,
                lambda,
                seeds: reports.len(),
                map_mean,
                map_std,
                top1_mean,
                top1_std,
                top5_mean,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgan_core::synth::{generate, SynthConfig};

    pub(crate) fn small_corpus() -> Corpus {
        let cfg = SynthConfig { num_ids: 8, train_ids: 4, images_per_id: 4, cameras: 2, ..SynthConfig::default() };
        generate(&cfg).unwrap().into()
    }

    fn small_train(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            backbone_widths: vec![4, 8, 8],
            channels: 8,
            refined_channels: 4,
            se_reduction: 2,
            identities_per_batch: 2,
            images_per_identity: 2,
            epochs: 1,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn cells_skip_d_for_proposal_free_variants() {
        let plan = AblationPlan {
            variants: vec![Variant::Baseline, Variant::Pgan],
            parts: vec![4, 8, 12],
            lambdas: vec![2.0],
            seeds: vec![0, 1, 2],
        };
        let cells = plan.cells();
        assert_eq!(cells.len(), 3 + 9);
        assert!(cells[..3].iter().all(|c| c.variant == Variant::Baseline && c.parts == 4));
    }

    #[test]
    fn attention_rows_cover_the_test_split() {
        let corpus = small_corpus();
        let mut t = train(&corpus, &small_train(Variant::Pgan), None, |_, _| Ok(())).unwrap();
        let (rows, maps) = attention_rows(&mut t.model, &corpus, &corpus.test, 5, true).unwrap();
        assert_eq!(rows.len(), corpus.test.len());
        assert_eq!(maps.len(), corpus.test.len());
        for r in &rows {
            assert_eq!(r.weights.len(), 8);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(r.kinds.as_ref().map(Vec::len), Some(8));
        }
        let mut baseline = train(&corpus, &small_train(Variant::Baseline), None, |_, _| Ok(())).unwrap();
        assert!(attention_rows(&mut baseline.model, &corpus, &corpus.test, 5, false).is_err());
    }

    #[test]
    fn chunking_does_not_change_embeddings() {
        let corpus = small_corpus();
        let mut t = train(&corpus, &small_train(Variant::PganUniform), None, |_, _| Ok(())).unwrap();
        let a = embed(&mut t.model, &corpus, &corpus.test, 3).unwrap();
        let b = embed(&mut t.model, &corpus, &corpus.test, 64).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
