//! Machine-learning imputation: KNN, missForest and chained equations with
//! CART or random-forest engines.
//!
//! Imputers work on the score columns `y1..yT`. Fully observed covariates
//! (such as the MNAR auxiliary variable) join the predictor set only when a
//! config sets `include_aux`.

mod forest;
mod knn;
mod mice;
mod missforest;
pub mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use forest::{fit_forest, Forest, ForestParams};
pub use knn::{gower_distance, impute_knn, KnnConfig};
pub use mice::{mice_impute, MiceConfig, MiceEngine};
pub use missforest::{impute_missforest, MissForestConfig};
pub use tree::{fit_cart, NodeId, RegressionTree, TreeParams};

use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

/// How a set of completed datasets was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub m: usize,
    pub hyper: serde_json::Value,
    /// `None` for deterministic methods.
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
    /// Sweeps actually run (iterative methods).
    #[serde(default)]
    pub sweeps: usize,
}

/// M completed copies of one incomplete dataset.
#[derive(Debug, Clone)]
pub struct ImputationSet {
    pub completed: Vec<LongitudinalDataset>,
    pub provenance: Provenance,
}

impl ImputationSet {
    pub fn m(&self) -> usize {
        self.completed.len()
    }

    pub fn method(&self) -> &str {
        &self.provenance.method
    }

    pub fn seed(&self) -> Option<u64> {
        self.provenance.seed
    }

    /// File names used by [`ImputationSet::write_dir`], in order.
    pub fn file_names(&self) -> Vec<String> {
        let width = self.m().to_string().len().max(2);
        (1..=self.m()).map(|k| format!("imputed_{k:0width$}.csv")).collect()
    }

    /// Writes each completed copy as CSV plus `provenance.json`.
    pub fn write_dir(&self, dir: &Path, na_token: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (data, name) in self.completed.iter().zip(self.file_names()) {
            data.write_csv_path(&dir.join(name), na_token)?;
        }
        let file = std::fs::File::create(dir.join("provenance.json"))?;
        serde_json::to_writer_pretty(file, &self.provenance)?;
        Ok(())
    }
}

/// Column-major working copy: score columns first, then included covariates.
#[derive(Debug, Clone)]
pub(crate) struct WorkMatrix {
    pub cols: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
    pub n_scores: usize,
}

impl WorkMatrix {
    pub fn from_dataset(data: &LongitudinalDataset, include_aux: bool) -> Self {
        let n = data.n();
        let mut cols = Vec::new();
        let mut observed = Vec::new();
        for t in 0..data.occasions() {
            cols.push((0..n).map(|i| data.y()[(i, t)]).collect());
            observed.push((0..n).map(|i| data.is_observed(i, t)).collect());
        }
        if include_aux {
            for values in data.covariates().values() {
                cols.push(values.iter().copied().collect());
                observed.push(vec![true; n]);
            }
        }
        WorkMatrix { cols, observed, n_scores: data.occasions() }
    }

    pub fn n(&self) -> usize {
        self.cols[0].len()
    }

    pub fn missing_rows(&self, v: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.observed[v][i]).collect()
    }

    pub fn observed_rows(&self, v: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.observed[v][i]).collect()
    }

    /// Incomplete score columns by ascending missing count, ties by index.
    pub fn visit_order(&self) -> Vec<usize> {
        let mut order: Vec<(usize, usize)> = (0..self.n_scores)
            .map(|v| (self.observed[v].iter().filter(|&&o| !o).count(), v))
            .filter(|&(miss, _)| miss > 0)
            .collect();
        order.sort_unstable();
        order.into_iter().map(|(_, v)| v).collect()
    }

    /// Every incomplete score column needs at least one observed value.
    pub fn check_imputable(&self) -> Result<()> {
        for v in 0..self.n_scores {
            if !self.observed[v].iter().any(|&o| o) {
                return Err(Error::Imputation(format!("y{} has no observed values to impute from", v + 1)));
            }
        }
        Ok(())
    }

    pub fn predictors(&self, target: usize) -> Vec<&[f64]> {
        (0..self.cols.len()).filter(|&v| v != target).map(|v| self.cols[v].as_slice()).collect()
    }

    /// The source dataset with its missing score cells filled from `self`.
    pub fn complete(&self, source: &LongitudinalDataset) -> LongitudinalDataset {
        let mut out = source.clone();
        for t in 0..self.n_scores {
            for i in 0..self.n() {
                if !source.is_observed(i, t) {
                    out.set_value(i, t, self.cols[t][i]);
                }
            }
        }
        out
    }
}
