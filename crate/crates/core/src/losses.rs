//! Metric-learning and classification losses with their gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::nn::{Linear, ParamVisitor};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Distances below this are treated as zero when differentiating `‖a − b‖`.
const DIST_EPS: f64 = 1e-12;

/// Per-epoch (or per-batch) loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub l_p: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_c: f64, l_f: f64, l_g: f64, l_p: f64, lambda: f64) -> Self {
        Self { l_c, l_f, l_g, l_p, total: total_loss(l_c, l_f, l_g, l_p, lambda) }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_f, self.l_g, self.l_p, self.total].iter().all(|v| v.is_finite())
    }
}

/// `λ·L_c + L_f + L_g + L_p`.
pub fn total_loss(l_c: f64, l_f: f64, l_g: f64, l_p: f64, lambda: f64) -> f64 {
    lambda * l_c + l_f + l_g + l_p
}

/// Euclidean distance between two rows.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Loss value and gradient with respect to the embeddings.
#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: Matrix,
    /// Anchors with a positive hinge.
    pub active: usize,
}

fn check_triplet_batch(rows: usize, labels: &[usize]) -> Result<()> {
    if rows != labels.len() {
        return Err(Error::Shape(format!("{rows} embeddings for {} labels", labels.len())));
    }
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match counts.iter_mut().find(|(k, _)| *k == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    if counts.len() < 2 {
        return Err(Error::Precondition("triplet loss needs at least two identities in the batch".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, c)| *c < 2) {
        return Err(Error::Precondition(format!("identity {l} has a single sample in the triplet batch")));
    }
    Ok(())
}

/// Batch-hard triplet loss: for every anchor, the farthest positive and the
/// closest negative, hinge at `margin`, averaged over anchors.
pub fn batch_hard_triplet(embeddings: &Matrix, labels: &[usize], margin: f64) -> Result<TripletOutput> {
    check_triplet_batch(embeddings.rows, labels)?;
    let n = embeddings.rows;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(embeddings.row(i), embeddings.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut grad = Matrix::zeros(n, embeddings.cols);
    let mut loss = 0.0;
    let mut active = 0;
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| d > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        let (p, q) = (pos.expect("checked"), neg.expect("checked"));
        let hinge = margin + dist[a * n + p] - dist[a * n + q];
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        active += 1;
        accumulate_distance_grad(embeddings, &mut grad, a, p, dist[a * n + p], 1.0 / n as f64);
        accumulate_distance_grad(embeddings, &mut grad, a, q, dist[a * n + q], -1.0 / n as f64);
    }
    Ok(TripletOutput { loss: loss / n as f64, grad, active })
}

/// Adds `scale · ∂‖x_i − x_j‖` to the gradient rows of `i` and `j`.
fn accumulate_distance_grad(x: &Matrix, grad: &mut Matrix, i: usize, j: usize, d: f64, scale: f64) {
    if d < DIST_EPS {
        return;
    }
    for k in 0..x.cols {
        let g = scale * (x.get(i, k) - x.get(j, k)) / d;
        grad.data[i * x.cols + k] += g;
        grad.data[j * x.cols + k] -= g;
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.rows, labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::Shape(format!("label {l} outside {} classes", logits.cols)));
    }
    let n = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum());
        loss += log_z - row[y];
        for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (math::exp(row[k] - log_z) - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Bias-free linear identity classifier on the BN-neck embedding.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc: Linear,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self { fc: Linear::new(dim, classes, false, rng) }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_dim
    }

    pub fn forward(&mut self, e: &Matrix) -> Matrix {
        self.fc.forward(e)
    }

    pub fn backward(&mut self, dlogits: &Matrix) -> Matrix {
        self.fc.backward(dlogits)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.fc.visit(prefix, f);
    }
}
