//! Distance-to-probability conversion, branch fusion, and the episode loss.
//!
//! Each matcher hands over one distance per candidate class. A temperature
//! softmax over negated distances turns those into per-branch probabilities;
//! summing the three branch vectors gives the fused score, and the
//! prediction is its argmax (ties to the lowest class index). The training
//! signal is the sum of the per-branch negative log-likelihoods — each
//! branch is supervised on its own, fusion happens only at prediction time.

use crate::error::{Error, Result};
use crate::tape::LOG_FLOOR;
use crate::tensor::{softmax_rows, Matrix, Scalar};

/// Per-branch and fused scores for one query.
#[derive(Clone, Debug)]
pub struct FusedPrediction<F> {
    /// Instance-branch probabilities, one per candidate class.
    pub y1: Vec<F>,
    /// Category-branch probabilities.
    pub y2: Vec<F>,
    /// Task-branch probabilities.
    pub y3: Vec<F>,
    /// Element-wise sum of the three branches.
    pub y: Vec<F>,
    /// Argmax of `y`; ties resolve to the lowest class index.
    pub predicted_class: usize,
}

/// Per-branch losses for one query.
#[derive(Clone, Copy, Debug)]
pub struct LossReport<F> {
    pub l1: F,
    pub l2: F,
    pub l3: F,
    pub total: F,
}

fn check_temperature<F: Scalar>(temperature: F) -> Result<()> {
    if !(temperature > F::zero()) || !temperature.is_finite() {
        return Err(Error::NonPositiveTemperature(
            temperature.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(())
}

/// Softmax over `-d / temperature` (max-subtracted, numerically safe).
pub fn distances_to_probs<F: Scalar>(distances: &[F], temperature: F) -> Result<Vec<F>> {
    check_temperature(temperature)?;
    if distances.is_empty() {
        return Err(Error::ShapeMismatch("no distances to convert".into()));
    }
    let logits = Matrix::from_vec(
        1,
        distances.len(),
        distances.iter().map(|&d| -d / temperature).collect(),
    );
    Ok(softmax_rows(&logits).data().to_vec())
}

fn argmax_lowest<F: Scalar>(scores: &[F]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Converts the three branch distance vectors and combines them.
pub fn fuse<F: Scalar>(
    d1: &[F],
    d2: &[F],
    d3: &[F],
    temperature: F,
) -> Result<FusedPrediction<F>> {
    if d1.len() != d2.len() || d2.len() != d3.len() {
        return Err(Error::ShapeMismatch(format!(
            "branch distance lengths differ: {}, {}, {}",
            d1.len(),
            d2.len(),
            d3.len()
        )));
    }
    let y1 = distances_to_probs(d1, temperature)?;
    let y2 = distances_to_probs(d2, temperature)?;
    let y3 = distances_to_probs(d3, temperature)?;
    let y: Vec<F> = y1
        .iter()
        .zip(&y2)
        .zip(&y3)
        .map(|((&a, &b), &c)| a + b + c)
        .collect();
    let predicted_class = argmax_lowest(&y);
    Ok(FusedPrediction { y1, y2, y3, y, predicted_class })
}

/// Sum of per-branch negative log-likelihoods of the true class.
pub fn multiview_loss<F: Scalar>(
    d1: &[F],
    d2: &[F],
    d3: &[F],
    label: usize,
    temperature: F,
) -> Result<LossReport<F>> {
    if label >= d1.len() {
        return Err(Error::LabelOutOfRange { label, n_way: d1.len() });
    }
    let pred = fuse(d1, d2, d3, temperature)?;
    let nll = |y: &[F]| -> F { -(y[label].max(F::lit(LOG_FLOOR))).ln() };
    let (l1, l2, l3) = (nll(&pred.y1), nll(&pred.y2), nll(&pred.y3));
    Ok(LossReport { l1, l2, l3, total: l1 + l2 + l3 })
}
