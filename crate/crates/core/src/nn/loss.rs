use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Batch sum; the optimised objective.
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletLossConfig {
    pub margin: f64,
    pub reduction: Reduction,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        TripletLossConfig {
            margin: 0.25,
            reduction: Reduction::Sum,
        }
    }
}

impl TripletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Validation(format!(
                "margin must be finite and non-negative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    /// Reduced over the batch per the config.
    pub value: f64,
    pub terms: Vec<f64>,
}

impl TripletLoss {
    pub fn sum(&self) -> f64 {
        self.terms.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.terms.is_empty() {
            0.0
        } else {
            self.sum() / self.terms.len() as f64
        }
    }

    /// Fraction of triplets whose hinge term is zero.
    pub fn satisfied(&self) -> usize {
        self.terms.iter().filter(|&&t| t == 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub anchor: Array2<f64>,
    pub neighbor: Array2<f64>,
    pub distant: Array2<f64>,
}

fn check_shapes(a: &ArrayView2<f64>, n: &ArrayView2<f64>, d: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != n.dim() || a.dim() != d.dim() {
        return Err(Error::Contract(format!(
            "triplet embeddings disagree in shape: {:?}, {:?}, {:?}",
            a.dim(),
            n.dim(),
            d.dim()
        )));
    }
    Ok(())
}

fn sq_dist(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `max(d_an − d_ad + α, 0)` with an explicit comparison so satisfied
/// triplets give exactly zero.
fn hinge(d_an: f64, d_ad: f64, margin: f64) -> f64 {
    if d_ad >= d_an + margin {
        0.0
    } else {
        (d_an - d_ad + margin).max(0.0)
    }
}

pub fn triplet_loss(
    anchor: ArrayView2<f64>,
    neighbor: ArrayView2<f64>,
    distant: ArrayView2<f64>,
    config: &TripletLossConfig,
) -> Result<TripletLoss> {
    check_shapes(&anchor, &neighbor, &distant)?;
    let terms: Vec<f64> = anchor
        .axis_iter(Axis(0))
        .zip(neighbor.axis_iter(Axis(0)))
        .zip(distant.axis_iter(Axis(0)))
        .map(|((a, n), d)| hinge(sq_dist(a, n), sq_dist(a, d), config.margin))
        .collect();
    let sum: f64 = terms.iter().sum();
    let value = match config.reduction {
        Reduction::Sum => sum,
        Reduction::Mean if terms.is_empty() => 0.0,
        Reduction::Mean => sum / terms.len() as f64,
    };
    Ok(TripletLoss { value, terms })
}

/// Loss plus its gradient with respect to each of the three embedding sets.
/// Zero terms contribute zero gradient.
pub fn triplet_loss_grad(
    anchor: ArrayView2<f64>,
    neighbor: ArrayView2<f64>,
    distant: ArrayView2<f64>,
    config: &TripletLossConfig,
) -> Result<(TripletLoss, TripletGrads)> {
    let loss = triplet_loss(anchor, neighbor, distant, config)?;
    let scale = match config.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / loss.terms.len().max(1) as f64,
    };
    let mut ga = Array2::zeros(anchor.dim());
    let mut gn = Array2::zeros(anchor.dim());
    let mut gd = Array2::zeros(anchor.dim());
    for (i, &t) in loss.terms.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        let (a, n, d) = (anchor.row(i), neighbor.row(i), distant.row(i));
        for k in 0..a.len() {
            ga[[i, k]] = scale * 2.0 * (d[k] - n[k]);
            gn[[i, k]] = scale * -2.0 * (a[k] - n[k]);
            gd[[i, k]] = scale * 2.0 * (a[k] - d[k]);
        }
    }
    Ok((
        loss,
        TripletGrads {
            anchor: ga,
            neighbor: gn,
            distant: gd,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    /// Batch mean.
    pub value: f64,
    pub per_item: Vec<f64>,
}

fn check_labels(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {} classes",
            logits.ncols()
        )));
    }
    Ok(())
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Softmax negative log-likelihood, averaged over the batch.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<CrossEntropy> {
    check_labels(&logits, labels)?;
    let per_item: Vec<f64> = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &l)| -log_softmax_row(row)[l])
        .collect();
    let value = if per_item.is_empty() {
        0.0
    } else {
        per_item.iter().sum::<f64>() / per_item.len() as f64
    };
    Ok(CrossEntropy { value, per_item })
}

/// Mean cross-entropy and its gradient wrt the logits.
pub fn cross_entropy_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(CrossEntropy, Array2<f64>)> {
    let loss = cross_entropy(logits, labels)?;
    let b = labels.len().max(1) as f64;
    let mut grad = Array2::zeros(logits.dim());
    for (i, (row, &l)) in logits.axis_iter(Axis(0)).zip(labels).enumerate() {
        for (k, lp) in log_softmax_row(row).into_iter().enumerate() {
            grad[[i, k]] = (lp.exp() - if k == l { 1.0 } else { 0.0 }) / b;
        }
    }
    Ok((loss, grad))
}
