use longmiss::estimators::FitOptions;
use longmiss::harness::{apply_method, Hyperparameters, Method};
use longmiss::imputers::tree::{Node, NodeKind};
use longmiss::imputers::{
    fit_cart, impute_knn, impute_missforest, mice_impute, KnnConfig, MiceConfig, MissForestConfig, RegressionTree,
    TreeParams,
};
use longmiss::missingness::{apply_mar, apply_mcar};
use longmiss::model::generate_cohort;
use longmiss::{ErrorDistribution, ErrorKind, GcmSpec, LongitudinalDataset};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort(n: usize, seed: u64) -> LongitudinalDataset {
    generate_cohort(&GcmSpec::population(), &ErrorDistribution::new(ErrorKind::Normal), n, seed).unwrap()
}

fn leaf(rows: Vec<usize>, parent: Option<usize>, value: f64) -> Node {
    Node { rows, parent, value, sse: 0.0, kind: NodeKind::Leaf }
}

fn split(var: usize, threshold: f64, left: usize, right: usize, parent: Option<usize>) -> Node {
    Node { rows: vec![], parent, value: f64::NAN, sse: 0.0, kind: NodeKind::Split { var, threshold, left, right } }
}

#[test]
fn two_level_tree_routes_b7_c7_to_the_leaf_of_eight() {
    // Variables: 0 = B, 1 = C. `> threshold` is the right branch.
    let nodes = vec![
        split(0, 5.0, 1, 2, None),
        split(1, 6.0, 3, 4, Some(0)),
        split(1, 6.0, 5, 6, Some(0)),
        leaf(vec![0], Some(1), 3.0),
        leaf(vec![1], Some(1), 7.0),
        leaf(vec![2], Some(2), 5.0),
        leaf(vec![3], Some(2), 8.0),
    ];
    let tree = RegressionTree::from_nodes(nodes, 2).unwrap();
    assert_eq!(tree.predict(&[7.0, 7.0]), 8.0);
    assert_eq!(tree.predict(&[7.0, 2.0]), 5.0);
    assert_eq!(tree.predict(&[1.0, 9.0]), 7.0);
    assert_eq!(tree.predict(&[1.0, 1.0]), 3.0);
    assert_eq!(tree.donors(tree.terminal_node(&[7.0, 7.0])).0, &[3]);
}

fn partition(tree: &RegressionTree) -> Vec<Vec<usize>> {
    let mut leaves: Vec<Vec<usize>> = tree
        .leaves()
        .into_iter()
        .map(|id| {
            let mut rows = tree.node(id).rows.clone();
            rows.sort_unstable();
            rows
        })
        .collect();
    leaves.sort();
    leaves
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cart_partition_survives_monotone_transforms(seed in any::<u64>(), n in 20usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = cohort(n, seed);
        let (x0, x1, y) = (data.observed_column(0), data.observed_column(1), data.observed_column(3));
        let params = TreeParams { max_terminal_nodes: Some(6), min_leaf: 3, mtry: None };
        let rows: Vec<usize> = (0..n).collect();
        let base = fit_cart(&[&x0, &x1], &y, &rows, &params, &mut rng).unwrap();
        let t0: Vec<f64> = x0.iter().map(|v| v.exp()).collect();
        let t1: Vec<f64> = x1.iter().map(|v| 3.0 * v - 1.0).collect();
        let moved = fit_cart(&[&t0, &t1], &y, &rows, &params, &mut rng).unwrap();
        prop_assert_eq!(partition(&base), partition(&moved));
    }

    #[test]
    fn observed_cells_are_never_altered(seed in 0u64..1000, mr in 0.05f64..0.4) {
        let data = apply_mar(&cohort(40, seed), mr).unwrap();
        let sets = [
            impute_knn(&data, &KnnConfig::default()).unwrap(),
            impute_missforest(&data, &MissForestConfig { n_trees: 3, ..MissForestConfig::default() }, seed).unwrap(),
            mice_impute(&data, &MiceConfig { m: 2, sweeps: 2, ..MiceConfig::cart() }, seed).unwrap(),
        ];
        for set in &sets {
            for done in &set.completed {
                prop_assert!(done.is_complete());
                for i in 0..data.n() {
                    for t in 0..data.occasions() {
                        if let Some(v) = data.value(i, t) {
                            prop_assert_eq!(done.value(i, t), Some(v));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn knn_with_all_donors_is_donor_mean_imputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = apply_mcar(&cohort(30, 2), 0.2, &mut rng).unwrap();
    let n = data.n();
    let done = &impute_knn(&data, &KnnConfig { k: n - 1, ..KnnConfig::default() }).unwrap().completed[0];
    for t in 0..data.occasions() {
        for i in (0..n).filter(|&i| !data.is_observed(i, t)) {
            // Every row shares y1 with every other, so all rows observed on t are comparable donors.
            let donors: Vec<f64> = (0..n).filter(|&j| j != i).filter_map(|j| data.value(j, t)).collect();
            let mean = donors.iter().sum::<f64>() / donors.len() as f64;
            assert!((done.value(i, t).unwrap() - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn missforest_preserves_means_under_mcar() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data = apply_mcar(&cohort(1000, 10), 0.1, &mut rng).unwrap();
    let done = &impute_missforest(&data, &MissForestConfig::default(), 5).unwrap().completed[0];
    for t in 1..data.occasions() {
        let observed = data.observed_column(t);
        let obs_mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let imputed: Vec<f64> = (0..data.n()).filter(|&i| !data.is_observed(i, t)).map(|i| done.value(i, t).unwrap()).collect();
        let imp_mean = imputed.iter().sum::<f64>() / imputed.len() as f64;
        assert!((imp_mean - obs_mean).abs() < 0.1 * obs_mean.abs(), "y{}: {imp_mean} vs {obs_mean}", t + 1);
    }
}

#[test]
fn mice_chains_from_different_seeds_are_exchangeable() {
    let data = apply_mar(&cohort(300, 21), 0.15).unwrap();
    let hyper = Hyperparameters::default();
    let opts = FitOptions::default();
    for method in [Method::MiceCart, Method::MiceForest] {
        let a = apply_method(method, &data, &hyper, 1, &opts).unwrap();
        let b = apply_method(method, &data, &hyper, 2, &opts).unwrap();
        assert_eq!(a.pooled.as_ref().unwrap().m + a.pooled.as_ref().unwrap().dropped, 20);
        assert_ne!(a.fit.theta, b.fit.theta);
        for k in 0..6 {
            let se = a.fit.se.get(k).max(b.fit.se.get(k));
            let gap = (a.fit.theta.get(k) - b.fit.theta.get(k)).abs();
            assert!(gap < 2.0 * se, "{method} parameter {k}: gap {gap} vs 2 SE {}", 2.0 * se);
        }
    }
}
