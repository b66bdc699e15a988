//! Image-level decisions from anomaly maps: score, calibrated threshold,
//! 3x3 verbal localization, and templated answers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Grid2D;

pub const CELL_NAMES: [&str; 9] = [
    "top left",
    "top",
    "top right",
    "left",
    "center",
    "right",
    "bottom left",
    "bottom",
    "bottom right",
];

pub const NO_ANOMALY_TEXT: &str = "No, there are no anomalies in the image.";

/// A cell is reported when at least this fraction of its pixels is positive.
pub const CELL_CUTOFF: f64 = 0.01;

const HIST_BINS: usize = 10;

pub fn image_score(map: &Grid2D) -> f64 {
    map.max()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    pub value: f64,
    pub balanced_accuracy: f64,
    /// Lower edge of the first bin and upper edge of the last.
    pub histogram_range: (f64, f64),
    pub normal_histogram: Vec<usize>,
    pub anomalous_histogram: Vec<usize>,
}

impl CalibratedThreshold {
    /// A fixed threshold with no calibration statistics.
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            balanced_accuracy: f64::NAN,
            histogram_range: (0.0, 0.0),
            normal_histogram: Vec::new(),
            anomalous_histogram: Vec::new(),
        }
    }
}

/// Balanced accuracy of the rule `score > threshold => anomalous`.
pub fn balanced_accuracy(normal: &[f64], anomalous: &[f64], threshold: f64) -> f64 {
    let tn = normal.iter().filter(|&&s| s <= threshold).count();
    let tp = anomalous.iter().filter(|&&s| s > threshold).count();
    ba_from_counts(tp, anomalous.len(), tn, normal.len())
}

fn ba_from_counts(tp: usize, pos: usize, tn: usize, neg: usize) -> f64 {
    0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64)
}

fn histogram(scores: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    let mut h = vec![0; HIST_BINS];
    let width = (hi - lo) / HIST_BINS as f64;
    for &s in scores {
        let b = if width > 0.0 {
            (((s - lo) / width) as usize).min(HIST_BINS - 1)
        } else {
            0
        };
        h[b] += 1;
    }
    h
}

/// Picks the midpoint between adjacent distinct scores that maximizes
/// balanced accuracy, preferring the larger threshold on ties. With a
/// single distinct score that score is returned (balanced accuracy 0.5).
pub fn calibrate_threshold(normal: &[f64], anomalous: &[f64]) -> Result<CalibratedThreshold> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::Empty("calibration needs normal and anomalous scores".into()));
    }
    if normal.iter().chain(anomalous).any(|s| !s.is_finite()) {
        return Err(Error::Degenerate("calibration scores must be finite".into()));
    }
    let mut pooled: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomalous.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (pos, neg) = (anomalous.len(), normal.len());

    // sweep cut points left to right: everything at or below the cut is
    // called normal
    let mut tn = 0;
    let mut fn_ = 0;
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            if pooled[i].1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        if i == pooled.len() {
            break;
        }
        let cut = 0.5 * (v + pooled[i].0);
        let ba = ba_from_counts(pos - fn_, pos, tn, neg);
        if best.is_none_or(|(_, b)| ba >= b) {
            best = Some((cut, ba));
        }
    }
    let lo = pooled[0].0;
    let hi = pooled[pooled.len() - 1].0;
    let (value, balanced_accuracy) = best.unwrap_or((lo, 0.5));
    Ok(CalibratedThreshold {
        value,
        balanced_accuracy,
        histogram_range: (lo, hi),
        normal_histogram: histogram(normal, lo, hi),
        anomalous_histogram: histogram(anomalous, lo, hi),
    })
}

fn band(size: usize, i: usize) -> (usize, usize) {
    let step = size / 3;
    let end = if i == 2 { size } else { (i + 1) * step };
    (i * step, end)
}

/// Cells of the 3x3 partition holding at least 1% positive pixels
/// (`value >= 0.5`), in row-major order. Remainder rows and columns belong
/// to the last band.
pub fn grid_cells(mask: &Grid2D) -> Vec<&'static str> {
    let mut out = Vec::new();
    for gr in 0..3 {
        let (r0, r1) = band(mask.height(), gr);
        for gc in 0..3 {
            let (c0, c1) = band(mask.width(), gc);
            let total = (r1 - r0) * (c1 - c0);
            if total == 0 {
                continue;
            }
            let mut hits = 0usize;
            for r in r0..r1 {
                for c in c0..c1 {
                    if mask.get(r, c) >= 0.5 {
                        hits += 1;
                    }
                }
            }
            if hits > 0 && hits as f64 >= CELL_CUTOFF * total as f64 {
                out.push(CELL_NAMES[gr * 3 + gc]);
            }
        }
    }
    out
}

fn cell_of(dims: (usize, usize), r: usize, c: usize) -> &'static str {
    let find = |size: usize, x: usize| (0..3).find(|&i| x < band(size, i).1).unwrap_or(2);
    CELL_NAMES[find(dims.0, r) * 3 + find(dims.1, c)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub is_anomalous: bool,
    pub image_score: f64,
    pub grid_cells: Vec<String>,
    pub response_text: String,
}

pub fn yes_text(cells: &[String]) -> String {
    format!(
        "Yes, there is an anomaly in the image, at the {} of the image.",
        cells.join(" and ")
    )
}

/// Anomalous iff the image score exceeds the threshold; the positive
/// region is the map binarized at the same threshold. When no cell reaches
/// the 1% cutoff, the cell holding the hottest pixel is named so that a
/// positive verdict always carries a location.
pub fn render_verdict(map: &Grid2D, threshold: &CalibratedThreshold) -> Verdict {
    let score = image_score(map);
    if score <= threshold.value || score.is_nan() {
        return Verdict {
            is_anomalous: false,
            image_score: score,
            grid_cells: Vec::new(),
            response_text: NO_ANOMALY_TEXT.to_string(),
        };
    }
    let binary = map.map(|v| if v > threshold.value { 1.0 } else { 0.0 });
    let mut cells: Vec<String> = grid_cells(&binary).into_iter().map(str::to_string).collect();
    if cells.is_empty() {
        let k = map
            .values()
            .iter()
            .position(|&v| v == score)
            .expect("max is attained");
        cells.push(cell_of(map.dims(), k / map.width(), k % map.width()).to_string());
    }
    Verdict {
        is_anomalous: true,
        image_score: score,
        response_text: yes_text(&cells),
        grid_cells: cells,
    }
}

/// One line of the verdict export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictLine {
    pub image_id: String,
    pub score: f64,
    pub is_anomalous: bool,
    pub cells: Vec<String>,
    pub text: String,
}

impl VerdictLine {
    pub fn new(image_id: impl Into<String>, v: &Verdict) -> Self {
        Self {
            image_id: image_id.into(),
            score: v.image_score,
            is_anomalous: v.is_anomalous,
            cells: v.grid_cells.clone(),
            text: v.response_text.clone(),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}
