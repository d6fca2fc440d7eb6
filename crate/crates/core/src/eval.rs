//! Retrieval metrics: distances, average precision, CMC and mAP.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::RetrievalProtocol;
use crate::math;
use crate::tensor::{gemm, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    /// `1 − cos(q, g)`.
    #[default]
    Cosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Parse(format!("unknown metric `{other}` (expected euclidean or cosine)"))),
        }
    }
}

fn row_norms(m: &Matrix, which: &'static str, require_nonzero: bool) -> Result<Vec<f64>> {
    (0..m.rows)
        .map(|r| {
            let n = math::sqrt(m.row(r).iter().map(|v| v * v).sum());
            if require_nonzero && n == 0.0 {
                Err(Error::ZeroNorm { which, index: r })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Pairwise `|Q| × |G|` distances.
pub fn distance_matrix(q: &Matrix, g: &Matrix, metric: Metric) -> Result<Matrix> {
    if q.cols != g.cols {
        return Err(Error::Shape(format!("query dimension {} vs gallery dimension {}", q.cols, g.cols)));
    }
    let mut dot = Matrix::zeros(q.rows, g.rows);
    gemm(q.rows, q.cols, g.rows, 1.0, &q.data, false, &g.data, true, 0.0, &mut dot.data);
    let cosine = metric == Metric::Cosine;
    let qn = row_norms(q, "query", cosine)?;
    let gn = row_norms(g, "gallery", cosine)?;
    for i in 0..q.rows {
        for j in 0..g.rows {
            let d = &mut dot.data[i * g.rows + j];
            *d = match metric {
                Metric::Cosine => 1.0 - *d / (qn[i] * gn[j]),
                Metric::Euclidean => math::sqrt((qn[i] * qn[i] + gn[j] * gn[j] - 2.0 * *d).max(0.0)),
            };
        }
    }
    // Exact zeros for identical rows, which the expanded form can miss by rounding.
    for i in 0..q.rows {
        for j in 0..g.rows {
            if q.row(i) == g.row(j) {
                dot.data[i * g.rows + j] = 0.0;
            }
        }
    }
    Ok(dot)
}

/// `(1/R) Σ_{k relevant} precision@k` over a ranked list; `None` when
/// `total_relevant` is zero.
pub fn average_precision(relevance: &[bool], total_relevant: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Spread of a metric over repeated protocol draws.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    pub seeds: Vec<u64>,
    pub map_per_seed: Vec<f64>,
    pub map_std: f64,
    pub top1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub metric: Metric,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k-1]` is the Top-k rate, `k = 1..=|G|`.
    pub cmc: Vec<f64>,
    pub queries: usize,
    /// Queries without any valid correct match; excluded from the means.
    pub skipped: usize,
    pub repeats: Option<RepeatStats>,
}

impl MetricsReport {
    pub fn top(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            0.0
        } else {
            self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
        }
    }

    /// Mean of several reports of the same protocol kind (e.g. one per
    /// protocol seed), with the spread recorded in `repeats`.
    pub fn mean_of(reports: &[MetricsReport], seeds: &[u64]) -> Result<MetricsReport> {
        let first = reports.first().ok_or_else(|| Error::Precondition("no reports to average".into()))?;
        let len = reports.iter().map(|r| r.cmc.len()).max().unwrap_or(0);
        let n = reports.len() as f64;
        let mut cmc = vec![0.0; len];
        for r in reports {
            for (k, c) in cmc.iter_mut().enumerate() {
                *c += r.cmc.get(k).copied().unwrap_or(1.0) / n;
            }
        }
        let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
        let tops: Vec<f64> = reports.iter().map(|r| r.top(1)).collect();
        let (map, map_std) = math::mean_std(&maps);
        let (_, top1_std) = math::mean_std(&tops);
        Ok(MetricsReport {
            protocol: first.protocol.clone(),
            metric: first.metric,
            map,
            cmc,
            queries: reports.iter().map(|r| r.queries).sum(),
            skipped: reports.iter().map(|r| r.skipped).sum(),
            repeats: Some(RepeatStats { seeds: seeds.to_vec(), map_per_seed: maps, map_std, top1_std }),
        })
    }
}

/// Rank the valid gallery of each query by distance (ties by gallery index)
/// and accumulate AP and CMC.
pub fn evaluate_distances(protocol: &RetrievalProtocol, dist: &Matrix, metric: Metric) -> Result<MetricsReport> {
    let (nq, ng) = (protocol.query.len(), protocol.gallery.len());
    if dist.rows != nq || dist.cols != ng {
        return Err(Error::Shape(format!("distance matrix {}x{} for protocol {nq}x{ng}", dist.rows, dist.cols)));
    }
    let mut cmc_hits = vec![0usize; ng];
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for (qi, q) in protocol.query.iter().enumerate() {
        let row = dist.row(qi);
        order.clear();
        order.extend((0..ng).filter(|&g| protocol.is_valid(qi, g)));
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevance: Vec<bool> = order.iter().map(|&g| protocol.gallery[g].identity == q.identity).collect();
        let total = relevance.iter().filter(|&&r| r).count();
        let Some(ap) = average_precision(&relevance, total) else { continue };
        ap_sum += ap;
        counted += 1;
        let first = relevance.iter().position(|&r| r).expect("at least one relevant");
        cmc_hits[first] += 1;
    }
    let denom = counted.max(1) as f64;
    let mut cmc = Vec::with_capacity(ng);
    let mut running = 0usize;
    for h in cmc_hits {
        running += h;
        cmc.push(running as f64 / denom);
    }
    Ok(MetricsReport {
        protocol: String::from(protocol.kind.as_str()),
        metric,
        map: if counted == 0 { 0.0 } else { ap_sum / counted as f64 },
        cmc,
        queries: nq,
        skipped: nq - counted,
        repeats: None,
    })
}

/// Evaluate query and gallery embeddings, row-aligned with the protocol.
pub fn evaluate(protocol: &RetrievalProtocol, q: &Matrix, g: &Matrix, metric: Metric) -> Result<MetricsReport> {
    if q.rows != protocol.query.len() || g.rows != protocol.gallery.len() {
        return Err(Error::Shape(format!(
            "{}x{} embeddings for a protocol of {} queries and {} gallery items",
            q.rows,
            g.rows,
            protocol.query.len(),
            protocol.gallery.len()
        )));
    }
    let dist = distance_matrix(q, g, metric)?;
    evaluate_distances(protocol, &dist, metric)
}

/// Gather the query and gallery rows of a per-sample embedding matrix.
pub fn protocol_rows(protocol: &RetrievalProtocol, embeddings: &Matrix) -> Result<(Matrix, Matrix)> {
    let pick = |items: &[crate::data::ItemRef]| -> Result<Matrix> {
        let mut m = Matrix::zeros(items.len(), embeddings.cols);
        for (r, it) in items.iter().enumerate() {
            if it.index >= embeddings.rows {
                return Err(Error::Shape(format!("sample {} outside {} embeddings", it.index, embeddings.rows)));
            }
            m.row_mut(r).copy_from_slice(embeddings.row(it.index));
        }
        Ok(m)
    };
    Ok((pick(&protocol.query)?, pick(&protocol.gallery)?))
}
