//! Iterative single imputation by random-forest regression.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forest::{fit_forest, ForestParams};
use super::{ImputationSet, Provenance, WorkMatrix};
use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissForestConfig {
    pub n_trees: usize,
    pub max_sweeps: usize,
    pub min_leaf: usize,
    /// `None` uses `max(1, ⌊p/3⌋)`.
    pub mtry: Option<usize>,
    pub include_aux: bool,
}

impl Default for MissForestConfig {
    fn default() -> Self {
        MissForestConfig { n_trees: 10, max_sweeps: 10, min_leaf: 5, mtry: None, include_aux: false }
    }
}

/// Starts from observed means and refits a forest per incomplete score
/// (fewest missing first) until the normalized change over imputed cells
/// first increases, then returns the matrix from before that sweep.
pub fn impute_missforest(data: &LongitudinalDataset, config: &MissForestConfig, seed: u64) -> Result<ImputationSet> {
    if config.max_sweeps == 0 {
        return Err(Error::Config("max_sweeps must be at least 1".into()));
    }
    let mut work = WorkMatrix::from_dataset(data, config.include_aux);
    work.check_imputable()?;
    let order = work.visit_order();
    let missing: Vec<(usize, Vec<usize>)> = order.iter().map(|&t| (t, work.missing_rows(t))).collect();
    for (t, rows) in &missing {
        let obs = work.observed_rows(*t);
        let mean = obs.iter().map(|&i| work.cols[*t][i]).sum::<f64>() / obs.len() as f64;
        for &i in rows {
            work.cols[*t][i] = mean;
        }
    }
    let params = ForestParams {
        n_trees: config.n_trees,
        mtry: config.mtry,
        min_leaf: config.min_leaf,
        max_terminal_nodes: None,
        bootstrap: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sweeps = 0;
    let mut last_delta = f64::INFINITY;
    while !missing.is_empty() && sweeps < config.max_sweeps {
        let previous = work.clone();
        for (t, rows) in &missing {
            let train = work.observed_rows(*t);
            let preds = {
                let x = work.predictors(*t);
                let forest = fit_forest(&x, &work.cols[*t], &train, &params, &mut rng)?;
                rows.iter().map(|&i| forest.predict_of(&x, i)).collect::<Vec<_>>()
            };
            for (&i, v) in rows.iter().zip(preds) {
                work.cols[*t][i] = v;
            }
        }
        sweeps += 1;
        let (mut num, mut den) = (0.0, 0.0);
        for (t, rows) in &missing {
            for &i in rows {
                let (new, old) = (work.cols[*t][i], previous.cols[*t][i]);
                num += (new - old).powi(2);
                den += new * new;
            }
        }
        let delta = if den > 0.0 { num / den } else { 0.0 };
        log::debug!("missForest sweep {sweeps}: change {delta:e}");
        if delta > last_delta {
            work = previous;
            break;
        }
        last_delta = delta;
    }
    Ok(ImputationSet {
        completed: vec![work.complete(data)],
        provenance: Provenance {
            method: "missforest".into(),
            m: 1,
            hyper: serde_json::to_value(config)?,
            seed: Some(seed),
            warnings: Vec::new(),
            sweeps,
        },
    })
}
