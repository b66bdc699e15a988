//! Accuracy as a function of a global threshold, per category and unified.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 201;

/// Normal and anomalous image scores of one category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub normal: Vec<f64>,
    pub anomalous: Vec<f64>,
}

/// Accuracy of `score > t => anomalous`.
pub fn accuracy_at(scores: &CategoryScores, t: f64) -> f64 {
    let tn = scores.normal.iter().filter(|&&s| s <= t).count();
    let tp = scores.anomalous.iter().filter(|&&s| s > t).count();
    (tn + tp) as f64 / (scores.normal.len() + scores.anomalous.len()) as f64
}

/// `points` evenly spaced thresholds from the smallest to the largest
/// observed score.
pub fn default_grid(per_category: &BTreeMap<String, CategoryScores>, points: usize) -> Result<Vec<f64>> {
    let all = per_category
        .values()
        .flat_map(|c| c.normal.iter().chain(&c.anomalous))
        .copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s), h.max(s)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Empty("no finite scores to span a threshold grid".into()));
    }
    if points == 0 {
        return Err(Error::Config("threshold grid needs at least one point".into()));
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub grid: Vec<f64>,
    pub categories: Vec<String>,
    /// `accuracy[c][k]`: category `c` at `grid[k]`.
    pub accuracy: Vec<Vec<f64>>,
    /// Mean over categories at each threshold.
    pub unified: Vec<f64>,
    pub per_category_optimum: Vec<Optimum>,
    pub unified_optimum: Optimum,
    /// Mean per-category optimum minus the best unified accuracy.
    pub gap: f64,
}

/// First grid point achieving the row maximum.
fn best(grid: &[f64], row: &[f64]) -> Optimum {
    let mut k = 0;
    for (i, &a) in row.iter().enumerate() {
        if a > row[k] {
            k = i;
        }
    }
    Optimum {
        threshold: grid[k],
        accuracy: row[k],
    }
}

/// Accuracy of every category at every grid threshold. The unified curve is
/// the unweighted mean over categories, so it can never beat the mean of
/// per-category optima.
pub fn threshold_sweep(per_category: &BTreeMap<String, CategoryScores>, grid: &[f64]) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid".into()));
    }
    if per_category.len() < 2 {
        return Err(Error::Config(format!(
            "threshold sweep compares at least 2 categories, got {}",
            per_category.len()
        )));
    }
    for (name, s) in per_category {
        if s.normal.is_empty() && s.anomalous.is_empty() {
            return Err(Error::Empty(format!("scores for category {name}")));
        }
    }
    let categories: Vec<String> = per_category.keys().cloned().collect();
    let accuracy: Vec<Vec<f64>> = per_category
        .values()
        .map(|s| grid.iter().map(|&t| accuracy_at(s, t)).collect())
        .collect();
    let n = categories.len() as f64;
    let unified: Vec<f64> = (0..grid.len())
        .map(|k| accuracy.iter().map(|row| row[k]).sum::<f64>() / n)
        .collect();
    let per_category_optimum: Vec<Optimum> = accuracy.iter().map(|row| best(grid, row)).collect();
    let unified_optimum = best(grid, &unified);
    let mean_opt = per_category_optimum.iter().map(|o| o.accuracy).sum::<f64>() / n;
    Ok(SweepTable {
        grid: grid.to_vec(),
        categories,
        accuracy,
        unified,
        per_category_optimum,
        unified_optimum,
        gap: mean_opt - unified_optimum.accuracy,
    })
}

impl SweepTable {
    /// `threshold,<category>...,unified`, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold");
        for c in &self.categories {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",unified\n");
        for (k, t) in self.grid.iter().enumerate() {
            let _ = write!(s, "{t:.9}");
            for row in &self.accuracy {
                let _ = write!(s, ",{:.9}", row[k]);
            }
            let _ = writeln!(s, ",{:.9}", self.unified[k]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cats(pairs: &[(&str, Vec<f64>, Vec<f64>)]) -> BTreeMap<String, CategoryScores> {
        pairs
            .iter()
            .map(|(n, a, b)| {
                (
                    n.to_string(),
                    CategoryScores {
                        normal: a.clone(),
                        anomalous: b.clone(),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn disjoint_bands_leave_a_gap() {
        let s = cats(&[
            ("low", vec![0.05, 0.1, 0.15], vec![0.25, 0.3, 0.35]),
            ("high", vec![0.6, 0.65, 0.7], vec![0.8, 0.85, 0.9]),
        ]);
        let grid = default_grid(&s, DEFAULT_GRID_POINTS).unwrap();
        assert_eq!(grid.len(), 201);
        let t = threshold_sweep(&s, &grid).unwrap();
        assert_eq!(t.per_category_optimum[0].accuracy, 1.0);
        assert_eq!(t.per_category_optimum[1].accuracy, 1.0);
        let d = (t.per_category_optimum[0].threshold - t.per_category_optimum[1].threshold).abs();
        assert!(d >= 0.2);
        assert!(t.unified_optimum.accuracy < 1.0);
        assert!(t.gap > 0.0);
    }

    #[test]
    fn identical_categories_have_no_gap() {
        let a = (vec![0.1, 0.3], vec![0.5, 0.2]);
        let s = cats(&[("a", a.0.clone(), a.1.clone()), ("b", a.0, a.1)]);
        let t = threshold_sweep(&s, &default_grid(&s, 51).unwrap()).unwrap();
        assert_eq!(t.gap, 0.0);
    }

    #[test]
    fn single_threshold_grid() {
        let s = cats(&[("a", vec![0.1], vec![0.9]), ("b", vec![0.2], vec![0.4])]);
        let t = threshold_sweep(&s, &[0.3]).unwrap();
        assert!(t.accuracy.iter().all(|r| r.len() == 1));
        assert!(t.per_category_optimum.iter().all(|o| o.threshold == 0.3));
        assert_eq!(t.unified_optimum.threshold, 0.3);
        assert_eq!(t.to_csv(), "threshold,a,b,unified\n0.300000000,1.000000000,1.000000000,1.000000000\n");
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = cats(&[("a", vec![0.1], vec![0.9]), ("b", vec![0.2], vec![0.4])]);
        assert!(threshold_sweep(&s, &[]).is_err());
        let one = cats(&[("a", vec![0.1], vec![0.9])]);
        assert!(threshold_sweep(&one, &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn gap_is_never_negative(
            a in prop::collection::vec(0.0f64..1.0, 1..10),
            b in prop::collection::vec(0.0f64..1.0, 1..10),
            c in prop::collection::vec(0.0f64..1.0, 1..10),
            d in prop::collection::vec(0.0f64..1.0, 1..10),
            points in 1usize..40,
        ) {
            let s = cats(&[("x", a, b), ("y", c, d)]);
            let t = threshold_sweep(&s, &default_grid(&s, points).unwrap()).unwrap();
            prop_assert!(t.gap >= 0.0);
        }
    }
}
