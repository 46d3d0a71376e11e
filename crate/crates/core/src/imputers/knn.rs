//! Nearest-neighbor imputation under Gower's distance.

use serde::{Deserialize, Serialize};

use super::{ImputationSet, Provenance, WorkMatrix};
use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    /// Inverse-distance weighted mean instead of the plain mean.
    pub weighted: bool,
    pub include_aux: bool,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 5, weighted: false, include_aux: false }
    }
}

/// Mean range-normalized absolute difference over co-observed variables.
/// Variables with a zero range are skipped.
pub fn gower_distance(a: &[Option<f64>], b: &[Option<f64>], ranges: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != ranges.len() {
        return Err(Error::Data("rows and ranges must have equal length".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((x, y), &r) in a.iter().zip(b).zip(ranges) {
        if let (Some(x), Some(y)) = (x, y) {
            if r > 0.0 {
                sum += ((x - y).abs() / r).min(1.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Imputation("rows share no comparable variables".into()));
    }
    Ok(sum / count as f64)
}

fn ranges(work: &WorkMatrix) -> Vec<f64> {
    work.cols
        .iter()
        .zip(&work.observed)
        .map(|(col, obs)| {
            let (lo, hi) = col
                .iter()
                .zip(obs)
                .filter(|(_, &o)| o)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
            if hi > lo {
                hi - lo
            } else {
                0.0
            }
        })
        .collect()
}

/// Fills each missing score with the mean of that score over the `k`
/// Gower-nearest rows observed on it. Distances use the original observed
/// values only; equal distances keep the lower row index.
pub fn impute_knn(data: &LongitudinalDataset, config: &KnnConfig) -> Result<ImputationSet> {
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let work = WorkMatrix::from_dataset(data, config.include_aux);
    work.check_imputable()?;
    let n = work.n();
    let p = work.cols.len();
    let ranges = ranges(&work);
    let row = |i: usize| -> Vec<Option<f64>> {
        (0..p).map(|v| work.observed[v][i].then(|| work.cols[v][i])).collect()
    };
    let rows: Vec<Vec<Option<f64>>> = (0..n).map(row).collect();
    let mut filled = work.clone();
    let mut short = 0usize;
    let mut no_donor = 0usize;
    let mut dist = vec![f64::NAN; n];
    for i in 0..n {
        let targets: Vec<usize> = (0..work.n_scores).filter(|&t| !work.observed[t][i]).collect();
        if targets.is_empty() {
            continue;
        }
        for j in 0..n {
            dist[j] = if j == i { f64::NAN } else { gower_distance(&rows[i], &rows[j], &ranges).unwrap_or(f64::NAN) };
        }
        for t in targets {
            let mut donors: Vec<(f64, usize)> =
                (0..n).filter(|&j| work.observed[t][j] && !dist[j].is_nan()).map(|j| (dist[j], j)).collect();
            let value = if donors.is_empty() {
                no_donor += 1;
                let obs: Vec<f64> = work.observed_rows(t).into_iter().map(|j| work.cols[t][j]).collect();
                obs.iter().sum::<f64>() / obs.len() as f64
            } else {
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if donors.len() < config.k {
                    short += 1;
                } else if donors.len() > config.k {
                    donors.select_nth_unstable_by(config.k - 1, cmp);
                    donors.truncate(config.k);
                }
                donors.sort_unstable_by(cmp);
                aggregate(&donors, &work.cols[t], config.weighted)
            };
            filled.cols[t][i] = value;
        }
    }
    let mut warnings = Vec::new();
    if short > 0 {
        warnings.push(format!("{short} cells had fewer than k = {} eligible donors; used all available", config.k));
    }
    if no_donor > 0 {
        warnings.push(format!("{no_donor} cells had no comparable donor; used the observed mean"));
    }
    Ok(ImputationSet {
        completed: vec![filled.complete(data)],
        provenance: Provenance {
            method: "knn".into(),
            m: 1,
            hyper: serde_json::to_value(config)?,
            seed: None,
            warnings,
            sweeps: 0,
        },
    })
}

fn aggregate(donors: &[(f64, usize)], col: &[f64], weighted: bool) -> f64 {
    if weighted {
        let exact: Vec<f64> = donors.iter().filter(|d| d.0 == 0.0).map(|d| col[d.1]).collect();
        if !exact.is_empty() {
            return exact.iter().sum::<f64>() / exact.len() as f64;
        }
        let (num, den) = donors.iter().fold((0.0, 0.0), |(num, den), &(d, j)| (num + col[j] / d, den + 1.0 / d));
        num / den
    } else {
        donors.iter().map(|&(_, j)| col[j]).sum::<f64>() / donors.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn gower_examples() {
        let r = [1.0, 10.0];
        assert_eq!(gower_distance(&[Some(0.0), Some(0.0)], &[Some(0.0), Some(0.0)], &r).unwrap(), 0.0);
        assert_eq!(gower_distance(&[Some(0.0), None], &[Some(1.0), Some(5.0)], &r).unwrap(), 1.0);
        assert_eq!(gower_distance(&[Some(0.0), Some(0.0)], &[Some(1.0), Some(5.0)], &r).unwrap(), 0.75);
        assert!(gower_distance(&[None, Some(1.0)], &[Some(1.0), None], &r).is_err());
    }

    #[test]
    fn k1_copies_nearest_donor() {
        let nan = f64::NAN;
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 10.0, 2.0, 20.0, 5.0, 50.0, 1.9, nan]);
        let mask = y.map(|v| !v.is_nan());
        let data = LongitudinalDataset::new(y, mask).unwrap();
        let set = impute_knn(&data, &KnnConfig { k: 1, ..Default::default() }).unwrap();
        assert_eq!(set.completed[0].y()[(3, 1)], 20.0);
        let set = impute_knn(&data, &KnnConfig { k: 2, ..Default::default() }).unwrap();
        assert_eq!(set.completed[0].y()[(3, 1)], 15.0);
        assert_eq!(set.m(), 1);
        assert!(set.completed[0].is_complete());
    }

    #[test]
    fn too_few_donors_warns() {
        let nan = f64::NAN;
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 1.5, nan]);
        let mask = y.map(|v| !v.is_nan());
        let data = LongitudinalDataset::new(y, mask).unwrap();
        let set = impute_knn(&data, &KnnConfig { k: 5, ..Default::default() }).unwrap();
        assert_eq!(set.completed[0].y()[(2, 1)], 15.0);
        assert_eq!(set.provenance.warnings.len(), 1);
    }

    #[test]
    fn weighted_mean_favours_closer_donor() {
        let nan = f64::NAN;
        let y = DMatrix::from_row_slice(4, 2, &[0.0, 10.0, 1.0, 20.0, 4.0, 40.0, 0.25, nan]);
        let mask = y.map(|v| !v.is_nan());
        let data = LongitudinalDataset::new(y, mask).unwrap();
        let set = impute_knn(&data, &KnnConfig { k: 2, weighted: true, include_aux: false }).unwrap();
        // distances 0.0625 and 0.1875 → weights 16 and 16/3
        let expected = (10.0 * 16.0 + 20.0 * 16.0 / 3.0) / (16.0 + 16.0 / 3.0);
        assert!((set.completed[0].y()[(3, 1)] - expected).abs() < 1e-12);
    }
}
