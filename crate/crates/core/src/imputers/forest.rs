//! Bagged regression trees with per-node random predictor subsets.

use rand::Rng;

use super::tree::{fit_cart, RegressionTree, TreeParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` uses `max(1, ⌊p/3⌋)`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_terminal_nodes: Option<usize>,
    /// Resample `n` rows with replacement per tree.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 10, mtry: None, min_leaf: 5, max_terminal_nodes: None, bootstrap: true }
    }
}

impl ForestParams {
    pub fn effective_mtry(&self, n_vars: usize) -> usize {
        self.mtry.unwrap_or((n_vars / 3).max(1)).clamp(1, n_vars.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<RegressionTree>,
    mtry: usize,
}

/// Fits `n_trees` trees, each on a bootstrap resample of `rows`.
pub fn fit_forest<R: Rng + ?Sized>(
    x: &[&[f64]],
    y: &[f64],
    rows: &[usize],
    params: &ForestParams,
    rng: &mut R,
) -> Result<Forest> {
    if params.n_trees == 0 {
        return Err(Error::Config("a forest needs at least one tree".into()));
    }
    if rows.is_empty() {
        return Err(Error::Imputation("a forest needs at least one training row".into()));
    }
    let mtry = params.effective_mtry(x.len());
    let tree_params = TreeParams { max_terminal_nodes: params.max_terminal_nodes, min_leaf: params.min_leaf, mtry: Some(mtry) };
    let n = rows.len();
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut sample = Vec::with_capacity(n);
    for _ in 0..params.n_trees {
        sample.clear();
        if params.bootstrap {
            sample.extend((0..n).map(|_| rows[rng.random_range(0..n)]));
        } else {
            sample.extend_from_slice(rows);
        }
        trees.push(fit_cart(x, y, &sample, &tree_params, rng)?);
    }
    Ok(Forest { trees, mtry })
}

impl Forest {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn mtry(&self) -> usize {
        self.mtry
    }

    /// Mean of the per-tree leaf means.
    pub fn predict(&self, x_row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x_row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_of(&self, x: &[&[f64]], i: usize) -> f64 {
        self.trees.iter().map(|t| t.node(t.terminal_node_of(x, i)).value).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_unbagged_tree_matches_cart() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec<f64>> = (0..3).map(|_| (0..120).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..120).map(|i| x[0][i] - 2.0 * x[2][i] + 0.1 * rng.random::<f64>()).collect();
        let cols: Vec<&[f64]> = x.iter().map(|c| c.as_slice()).collect();
        let rows: Vec<usize> = (0..120).collect();
        let params = ForestParams { n_trees: 1, mtry: Some(3), min_leaf: 5, max_terminal_nodes: None, bootstrap: false };
        let forest = fit_forest(&cols, &y, &rows, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let tree = fit_cart(&cols, &y, &rows, &TreeParams::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for i in 0..120 {
            let row = [x[0][i], x[1][i], x[2][i]];
            assert_eq!(forest.predict(&row), tree.predict(&row));
        }
    }

    #[test]
    fn bootstrap_samples_have_training_size() {
        let x = vec![(0..50).map(|v| v as f64).collect::<Vec<_>>()];
        let y: Vec<f64> = (0..50).map(|v| (v % 7) as f64).collect();
        let cols: Vec<&[f64]> = x.iter().map(|c| c.as_slice()).collect();
        let rows: Vec<usize> = (0..50).collect();
        let forest = fit_forest(&cols, &y, &rows, &ForestParams::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(forest.n_trees(), 10);
        for tree in forest.trees() {
            assert_eq!(tree.node(0).rows.len(), 50);
        }
        let (lo, hi) = (0.0, 6.0);
        let p = forest.predict(&[25.0]);
        assert!(p >= lo && p <= hi);
    }

    #[test]
    fn default_mtry_is_a_third() {
        let p = ForestParams::default();
        assert_eq!(p.effective_mtry(3), 1);
        assert_eq!(p.effective_mtry(9), 3);
        assert_eq!(p.effective_mtry(1), 1);
    }
}
