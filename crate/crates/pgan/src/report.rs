//! Tables and reports: metric summaries, loss logs, per-image attention and
//! ablation tables (CSV), full reports (JSON) and heatmaps (PGM).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pgan_core::data::{format_boxes, parse_boxes};
use pgan_core::train::EpochLog;
use pgan_core::{MetricsReport, PartBox};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("CSV output is UTF-8")
}

fn csv_records(text: &str) -> std::result::Result<(Vec<String>, Vec<Vec<String>>), csv::Error> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// `protocol,metric,mAP,top1,top5`, one row per report.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut rows = vec![["protocol", "metric", "mAP", "top1", "top5"].map(String::from).to_vec()];
    for r in reports {
        rows.push(vec![
            r.protocol.clone(),
            r.metric.to_string(),
            r.map.to_string(),
            r.top(1).to_string(),
            r.top(5).to_string(),
        ]);
    }
    csv_string(rows)
}

/// `epoch,L_c,L_f,L_g,L_p,total,lr`.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut rows = vec![["epoch", "L_c", "L_f", "L_g", "L_p", "total", "lr"].map(String::from).to_vec()];
    for e in log {
        let l = &e.loss;
        rows.push([e.epoch as f64, l.l_c, l.l_f, l.l_g, l.l_p, l.total, e.lr].iter().map(|v| v.to_string()).collect());
    }
    csv_string(rows)
}

/// Where a selected part region came from, known for generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Identity,
    Distractor,
    Structural,
    FalsePositive,
    /// Full-frame box standing in for missing detections.
    Fallback,
}

impl PartKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PartKind::Identity => "identity",
            PartKind::Distractor => "distractor",
            PartKind::Structural => "structural",
            PartKind::FalsePositive => "false_positive",
            PartKind::Fallback => "fallback",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [PartKind::Identity, PartKind::Distractor, PartKind::Structural, PartKind::FalsePositive, PartKind::Fallback]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Attention over the D selected parts of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub file: String,
    pub weights: Vec<f64>,
    pub boxes: Vec<PartBox>,
    /// Present for generated data.
    pub kinds: Option<Vec<PartKind>>,
}

/// `file,w_1..w_D,box_1..box_D[,kind_1..kind_D,flag_1..flag_D]`; a box cell
/// uses the manifest's `x1,y1,x2,y2,conf[,attr]` form and a flag is 1 for
/// identity-bearing parts.
pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let d = rows.first().map_or(0, |r| r.weights.len());
    let labelled = rows.first().is_some_and(|r| r.kinds.is_some());
    let mut header = vec!["file".to_string()];
    header.extend((1..=d).map(|k| format!("w_{k}")));
    header.extend((1..=d).map(|k| format!("box_{k}")));
    if labelled {
        header.extend((1..=d).map(|k| format!("kind_{k}")));
        header.extend((1..=d).map(|k| format!("flag_{k}")));
    }
    let mut out = vec![header];
    for r in rows {
        let mut row = vec![r.file.clone()];
        row.extend(r.weights.iter().map(|w| w.to_string()));
        row.extend(r.boxes.iter().map(|b| format_boxes(std::slice::from_ref(b))));
        if let Some(kinds) = &r.kinds {
            row.extend(kinds.iter().map(|k| k.as_str().to_string()));
            row.extend(kinds.iter().map(|k| if *k == PartKind::Identity { "1" } else { "0" }.to_string()));
        }
        out.push(row);
    }
    csv_string(out)
}

pub fn parse_attention_csv(text: &str, path: &Path) -> Result<Vec<AttentionRow>> {
    let bad = |m: String| Error::format(path, m);
    let (header, records) = csv_records(text).map_err(|e| bad(e.to_string()))?;
    let d = header.iter().filter(|h| h.starts_with("w_")).count();
    let labelled = header.iter().any(|h| h.starts_with("kind_"));
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        if rec.len() != 1 + d * if labelled { 4 } else { 2 } {
            return Err(bad(format!("row with {} cells for D = {d}", rec.len())));
        }
        let weights =
            rec[1..=d].iter().map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<Result<_>>()?;
        let mut boxes = Vec::with_capacity(d);
        for cell in &rec[1 + d..1 + 2 * d] {
            let (b, _) = parse_boxes(cell)?;
            boxes.push(*b.first().ok_or_else(|| bad("empty box cell".into()))?);
        }
        let kinds = if labelled {
            Some(
                rec[1 + 2 * d..1 + 3 * d]
                    .iter()
                    .map(|k| PartKind::parse(k).ok_or_else(|| bad(format!("unknown part kind `{k}`"))))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        rows.push(AttentionRow { file: rec[0].clone(), weights, boxes, kinds });
    }
    Ok(rows)
}

/// Mean attention per part kind and the identity-versus-clutter ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub mean_by_kind: BTreeMap<PartKind, f64>,
    pub count_by_kind: BTreeMap<PartKind, usize>,
    /// Mean weight of identity-bearing parts.
    pub identity: f64,
    /// Mean weight of distractor and false-positive parts.
    pub clutter: f64,
    /// Mean weight of every part that is not identity-bearing.
    pub non_identity: f64,
    /// `identity / clutter`.
    pub ratio: f64,
}

pub fn summarize_attention(rows: &[AttentionRow]) -> AttentionSummary {
    let mut sums: BTreeMap<PartKind, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(kinds) = &r.kinds {
            for (w, k) in r.weights.iter().zip(kinds) {
                let e = sums.entry(*k).or_default();
                e.0 += w;
                e.1 += 1;
            }
        }
    }
    let mean_of = |pred: &dyn Fn(PartKind) -> bool| {
        let (s, n) = sums.iter().filter(|(k, _)| pred(**k)).fold((0.0, 0), |a, (_, v)| (a.0 + v.0, a.1 + v.1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let identity = mean_of(&|k| k == PartKind::Identity);
    let clutter = mean_of(&|k| matches!(k, PartKind::Distractor | PartKind::FalsePositive));
    AttentionSummary {
        mean_by_kind: sums.iter().map(|(k, v)| (*k, v.0 / v.1 as f64)).collect(),
        count_by_kind: sums.iter().map(|(k, v)| (*k, v.1)).collect(),
        identity,
        clutter,
        non_identity: mean_of(&|k| k != PartKind::Identity),
        ratio: if clutter > 0.0 { identity / clutter } else { f64::INFINITY },
    }
}

/// Mean weight and count per attribute tag (untagged boxes under `none`).
pub fn attribute_density(rows: &[AttentionRow]) -> BTreeMap<String, (f64, usize)> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        for (w, b) in r.weights.iter().zip(&r.boxes) {
            let key = b.attribute.map_or_else(|| "none".to_string(), |a| a.to_string());
            let e = acc.entry(key).or_default();
            e.0 += w;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
}

/// One line of an ablation table: a setting aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub parts: usize,
    pub lambda: f64,
    pub seeds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        vec![["variant", "D", "lambda", "seeds", "mAP_mean", "mAP_std", "top1_mean", "top1_std", "top5_mean"]
            .map(String::from)
            .to_vec()];
    for r in rows {
        out.push(vec![
            r.variant.clone(),
            r.parts.to_string(),
            r.lambda.to_string(),
            r.seeds.to_string(),
            r.map_mean.to_string(),
            r.map_std.to_string(),
            r.top1_mean.to_string(),
            r.top1_std.to_string(),
            r.top5_mean.to_string(),
        ]);
    }
    csv_string(out)
}

pub fn parse_ablation_csv(text: &str, path: &Path) -> Result<Vec<AblationRow>> {
    let bad = |m: String| Error::format(path, m);
    let (_, records) = csv_records(text).map_err(|e| bad(e.to_string()))?;
    records
        .into_iter()
        .map(|r| {
            if r.len() != 9 {
                return Err(bad(format!("ablation row with {} cells", r.len())));
            }
            let f = |i: usize| r[i].parse::<f64>().map_err(|e| bad(e.to_string()));
            let u = |i: usize| r[i].parse::<usize>().map_err(|e| bad(e.to_string()));
            Ok(AblationRow {
                variant: r[0].clone(),
                parts: u(1)?,
                lambda: f(2)?,
                seeds: u(3)?,
                map_mean: f(4)?,
                map_std: f(5)?,
                top1_mean: f(6)?,
                top1_std: f(7)?,
                top5_mean: f(8)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgan_core::{Attribute, Metric};

    #[test]
    fn loss_log_header_and_rows() {
        let log = vec![EpochLog { epoch: 0, loss: pgan_core::LossReport::new(1.0, 0.5, 0.25, 0.125, 2.0), lr: 1e-3 }];
        let text = loss_log_csv(&log);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,L_c,L_f,L_g,L_p,total,lr"));
        assert_eq!(lines.next(), Some("0,1,0.5,0.25,0.125,2.875,0.001"));
    }

    #[test]
    fn metrics_summary_row() {
        let r = MetricsReport {
            protocol: "veri".into(),
            metric: Metric::Cosine,
            map: 0.5,
            cmc: vec![0.25, 0.5, 0.5, 0.75, 1.0, 1.0],
            queries: 4,
            skipped: 0,
            repeats: None,
        };
        assert_eq!(metrics_csv(&[r]).lines().nth(1), Some("veri,cosine,0.5,0.25,1"));
    }

    #[test]
    fn attention_rows_round_trip_and_summarize() {
        let b = |x: f64| PartBox::new(x, 0.0, x + 4.0, 4.0, 0.9).with_attribute(Attribute::AnnualSign);
        let rows = vec![
            AttentionRow {
                file: "a.ppm".into(),
                weights: vec![0.6, 0.3, 0.1],
                boxes: vec![b(0.0), b(1.5), PartBox::new(0.0, 0.0, 8.0, 8.0, 0.2)],
                kinds: Some(vec![PartKind::Identity, PartKind::Distractor, PartKind::FalsePositive]),
            },
            AttentionRow {
                file: "b.ppm".into(),
                weights: vec![0.5, 0.25, 0.25],
                boxes: vec![b(0.0), b(2.0), b(3.0)],
                kinds: Some(vec![PartKind::Identity, PartKind::Structural, PartKind::Distractor]),
            },
        ];
        let text = attention_csv(&rows);
        assert!(text.starts_with("file,w_1,w_2,w_3,box_1,box_2,box_3,kind_1,kind_2,kind_3,flag_1,flag_2,flag_3\n"));
        assert_eq!(parse_attention_csv(&text, Path::new("a.csv")).unwrap(), rows);
        let s = summarize_attention(&rows);
        assert!((s.identity - 0.55).abs() < 1e-12);
        assert!((s.clutter - (0.3 + 0.1 + 0.25) / 3.0).abs() < 1e-12);
        assert!((s.ratio - 0.55 / s.clutter).abs() < 1e-12);
        let dens = attribute_density(&rows);
        assert_eq!(dens["none"], (0.1, 1));
        assert_eq!(dens["anusigns"].1, 5);
    }

    #[test]
    fn ablation_rows_round_trip() {
        let rows = vec![AblationRow {
            variant: "pgan".into(),
            parts: 8,
            lambda: 2.0,
            seeds: 3,
            map_mean: 0.4,
            map_std: 0.01,
            top1_mean: 0.5,
            top1_std: 0.02,
            top5_mean: 0.8,
        }];
        assert_eq!(parse_ablation_csv(&ablation_csv(&rows), Path::new("t.csv")).unwrap(), rows);
    }
}
