//! Ranking and decision metrics.

use crate::error::{Error, Result};
use crate::judge::Verdict;
use crate::math::Grid2D;

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for ties, i.e. `P(pos > neg) + P(pos == neg) / 2`.
///
/// The statistic is accumulated in integers (twice the rank sum), so the
/// result is the exact ratio rounded once.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::mismatch("scores vs labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "roc_auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positive rank sum, 1-based ranks
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let v = scores[order[start]];
        let mut end = start;
        let mut pos_in_group = 0u128;
        while end < order.len() && scores[order[end]] == v {
            pos_in_group += labels[order[end]] as u128;
            end += 1;
        }
        twice_rank_sum += pos_in_group * (start as u128 + 1 + end as u128);
        start = end;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

fn check_pairs(maps: &[Grid2D], masks: &[Grid2D]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::mismatch("maps vs masks", maps.len(), masks.len()));
    }
    for (m, y) in maps.iter().zip(masks) {
        m.ensure_same_dims(y, "map vs mask")?;
    }
    Ok(())
}

/// ROC AUC over every pixel of every image, pooled.
pub fn pixel_auc(maps: &[Grid2D], masks: &[Grid2D]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
    let labels: Vec<bool> = masks
        .iter()
        .flat_map(|m| m.values().iter().map(|&v| v > 0.5))
        .collect();
    roc_auc(&scores, &labels)
}

/// Mean of per-image pixel AUCs over the images that contain both classes.
pub fn pixel_auc_per_image(maps: &[Grid2D], masks: &[Grid2D]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (m, y) in maps.iter().zip(masks) {
        let labels: Vec<bool> = y.values().iter().map(|&v| v > 0.5).collect();
        if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
            continue;
        }
        total += roc_auc(m.values(), &labels)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no image has both pixel classes".into()));
    }
    Ok(total / n as f64)
}

pub fn accuracy_of(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::mismatch("predictions vs labels", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of verdicts whose decision matches the label.
pub fn accuracy(verdicts: &[Verdict], labels: &[bool]) -> Result<f64> {
    let preds: Vec<bool> = verdicts.iter().map(|v| v.is_anomalous).collect();
    accuracy_of(&preds, labels)
}
