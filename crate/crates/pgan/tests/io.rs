use std::fs;
use std::path::Path;

use pgan::config::EvalConfig;
use pgan::manifest::{load_dataset, write_synth, DatasetDir, TEST_MANIFEST, TRAIN_MANIFEST};
use pgan::pipeline::{evaluate_embeddings, Corpus};
use pgan::{checkpoint, Error};
use pgan_core::data::ProtocolKind;
use pgan_core::synth::{generate, SynthConfig};
use pgan_core::{Matrix, Metric, Split};

fn small() -> SynthConfig {
    SynthConfig { num_ids: 6, train_ids: 3, images_per_id: 4, cameras: 2, ..SynthConfig::default() }
}

#[test]
fn generated_directory_reloads_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&small()).unwrap();
    write_synth(tmp.path(), &data).unwrap();
    let dir = DatasetDir::open(tmp.path()).unwrap();
    assert_eq!(dir.train, data.train);
    assert_eq!(dir.test, data.test);
    assert_eq!(dir.meta.as_ref(), Some(&data.meta));
    assert_eq!(dir.proposals, data.proposals());
    assert!(dir.warnings.is_empty());
}

#[test]
fn missing_image_names_line_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&small()).unwrap();
    write_synth(tmp.path(), &data).unwrap();
    let victim = &data.test.samples[2].name;
    fs::remove_file(tmp.path().join(victim)).unwrap();
    let err = load_dataset(&tmp.path().join(TEST_MANIFEST), Split::Test).unwrap_err();
    match &err {
        Error::Ingest { line, message, .. } => {
            assert_eq!(*line, 3);
            assert!(message.contains(victim.as_str()));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn swapped_corners_are_fixed_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&small()).unwrap();
    write_synth(tmp.path(), &data).unwrap();
    let path = tmp.path().join(TRAIN_MANIFEST);
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    let fields: Vec<&str> = first.split('\t').collect();
    let b = &data.train.samples[0].boxes[0];
    let swapped = format!("{},{},{},{},{}", b.x2, b.y1, b.x1, b.y2, b.confidence);
    let line = format!("{}\t{}\t{}\t{swapped}", fields[0], fields[1], fields[2]);
    fs::write(&path, text.replacen(first, &line, 1)).unwrap();
    let loaded = load_dataset(&path, Split::Train).unwrap();
    assert_eq!(loaded.warnings.len(), 1);
    let got = loaded.dataset.samples[0].boxes[0];
    assert_eq!((got.x1, got.x2), (b.x1, b.x2));
}

#[test]
fn annotated_boxes_stand_in_for_missing_detections() {
    let data = generate(&small()).unwrap();
    let mut corpus: Corpus = data.into();
    let s = corpus.test.samples[0].clone();
    assert_ne!(corpus.detections(&s), s.boxes.as_slice());
    corpus.proposals.clear();
    assert_eq!(corpus.detections(&s), s.boxes.as_slice());
    assert!(corpus.part_kinds(&s, 8).is_none());
}

#[test]
fn perfect_embeddings_score_one() {
    let data = generate(&small()).unwrap();
    let ds = &data.test;
    let ids: Vec<usize> = ds.identities().into_iter().collect();
    let mut emb = Matrix::zeros(ds.len(), ids.len());
    for (i, s) in ds.samples.iter().enumerate() {
        emb.row_mut(i)[ids.iter().position(|&id| id == s.identity).unwrap()] = 1.0;
    }
    for protocol in [ProtocolKind::Veri, ProtocolKind::VehicleId] {
        let eval = EvalConfig { metric: Metric::Cosine, protocol, ..EvalConfig::default() };
        let r = evaluate_embeddings(ds, &emb, &eval).unwrap();
        assert!((r.map - 1.0).abs() < 1e-12, "{protocol:?} {}", r.map);
        assert!((r.top(1) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.pgan");
    let cfg = pgan_core::TrainConfig {
        variant: pgan_core::Variant::Baseline,
        backbone_widths: vec![4],
        channels: 8,
        refined_channels: 4,
        se_reduction: 2,
        ..pgan_core::TrainConfig::desk()
    };
    let mut t = pgan_core::train::Trainer::new(cfg, 3, 32, 32, 4).unwrap();
    checkpoint::save(&path, &mut t).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(checkpoint::load(Path::new(&path)), Err(Error::Format { .. })));
}
