//! The factorial Monte Carlo study: conditions, replications, method
//! dispatch and aggregation into per-condition metrics.
//!
//! Every replication generates one cohort, injects missingness once, and
//! hands the same incomplete data to each method. Randomness comes from
//! [`seeds`] streams keyed by condition, replication, stage and method, so
//! results do not depend on thread count or scheduling.

pub mod report;
pub mod seeds;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{metrics_for, pool_rubin, MetricRecord, PooledFit};
use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimators::{fit_fiml, fit_tsre, FitOptions, FitResult, RobustTuning, Theta};
use crate::imputers::{
    impute_knn, impute_missforest, mice_impute, ImputationSet, KnnConfig, MiceConfig, MiceEngine, MissForestConfig,
    Provenance,
};
use crate::missingness::{self, Mechanism, MissingnessConfig};
use crate::model::{generate_cohort_with, ErrorDistribution, ErrorKind, GcmSpec};
use seeds::{stream, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fiml,
    Tsre,
    Knn,
    MissForest,
    MiceCart,
    MiceForest,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Fiml, Method::Tsre, Method::Knn, Method::MissForest, Method::MiceCart, Method::MiceForest];

    pub fn label(self) -> &'static str {
        match self {
            Method::Fiml => "fiml",
            Method::Tsre => "tsre",
            Method::Knn => "knn",
            Method::MissForest => "missforest",
            Method::MiceCart => "micecart",
            Method::MiceForest => "miceforest",
        }
    }

    pub fn index(self) -> u8 {
        Method::ALL.iter().position(|&m| m == self).expect("listed") as u8
    }

    pub fn is_imputation(self) -> bool {
        !matches!(self, Method::Fiml | Method::Tsre)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub knn_k: usize,
    pub missforest_trees: usize,
    pub miceforest_trees: usize,
    pub micecart_nodes: usize,
    /// Imputations per dataset for the chained-equation methods.
    pub m: usize,
    pub sweeps: usize,
    pub tsre_quantile: f64,
    /// Give imputers the auxiliary covariate as a predictor.
    pub include_aux: bool,
    /// Compute standard errors for every fit (metrics use estimates only).
    pub standard_errors: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            knn_k: 5,
            missforest_trees: 10,
            miceforest_trees: 10,
            micecart_nodes: 5,
            m: 20,
            sweeps: 5,
            tsre_quantile: 0.95,
            include_aux: false,
            standard_errors: false,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("knn_k", self.knn_k),
            ("missforest_trees", self.missforest_trees),
            ("miceforest_trees", self.miceforest_trees),
            ("micecart_nodes", self.micecart_nodes),
            ("m", self.m),
            ("sweeps", self.sweeps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("hyperparameter `{name}` must be at least 1")));
        }
        RobustTuning { downweight_quantile: self.tsre_quantile }.validate()
    }

    pub fn knn(&self) -> KnnConfig {
        KnnConfig { k: self.knn_k, include_aux: self.include_aux, ..KnnConfig::default() }
    }

    pub fn missforest(&self) -> MissForestConfig {
        MissForestConfig { n_trees: self.missforest_trees, include_aux: self.include_aux, ..MissForestConfig::default() }
    }

    pub fn mice(&self, engine: MiceEngine) -> MiceConfig {
        MiceConfig {
            engine,
            m: self.m,
            sweeps: self.sweeps,
            max_terminal_nodes: self.micecart_nodes,
            n_trees: self.miceforest_trees,
            include_aux: self.include_aux,
            ..MiceConfig::default()
        }
    }

    pub fn tuning(&self) -> RobustTuning {
        RobustTuning { downweight_quantile: self.tsre_quantile }
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions { compute_se: self.standard_errors, ..FitOptions::default() }
    }
}

/// One cell of the factorial design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub n: usize,
    pub mechanism: Mechanism,
    pub mr: f64,
    pub dist: ErrorKind,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub base_seed: u64,
    pub hyper: Hyperparameters,
}

impl Condition {
    pub fn new(n: usize, mechanism: Mechanism, mr: f64, dist: ErrorKind) -> Self {
        Condition {
            n,
            mechanism,
            mr,
            dist,
            methods: Method::ALL.to_vec(),
            reps: 100,
            base_seed: 1,
            hyper: Hyperparameters::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n <= 3 {
            return Err(Error::Config(format!("n must exceed 3, got {}", self.n)));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("a condition needs at least one method".into()));
        }
        MissingnessConfig::new(self.mechanism, self.mr).validate()?;
        self.hyper.validate()
    }

    pub fn missingness(&self) -> MissingnessConfig {
        MissingnessConfig::new(self.mechanism, self.mr)
    }
}

/// A fit produced by any of the six methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFit {
    pub fit: FitResult,
    /// Imputation methods: how the completed data were made.
    pub imputation: Option<Provenance>,
    /// Chained-equation methods: the Rubin pool behind `fit`.
    pub pooled: Option<PooledFit>,
}

fn fit_completed(set: &ImputationSet, shape: &GcmSpec, method: Method, opts: &FitOptions) -> Result<MethodFit> {
    let fits: Vec<FitResult> = set.completed.iter().map(|d| fit_fiml(d, shape, opts)).collect::<Result<_>>()?;
    let label = method.label().to_string();
    if fits.len() == 1 {
        let mut fit = fits.into_iter().next().expect("one fit");
        fit.method = label;
        return Ok(MethodFit { fit, imputation: Some(set.provenance.clone()), pooled: None });
    }
    let pooled = pool_rubin(&fits)?;
    let fit = FitResult {
        method: label,
        theta: pooled.theta_bar,
        se: pooled.se_pooled,
        loglik: None,
        converged: true,
        boundary: fits.iter().any(|f| f.converged && f.boundary),
        iterations: fits.iter().map(|f| f.iterations).sum(),
    };
    Ok(MethodFit { fit, imputation: Some(set.provenance.clone()), pooled: Some(pooled) })
}

/// Imputes with `method` (when it is an imputation method) using `seed`.
pub fn impute_with(method: Method, data: &LongitudinalDataset, hyper: &Hyperparameters, seed: u64) -> Result<ImputationSet> {
    match method {
        Method::Knn => impute_knn(data, &hyper.knn()),
        Method::MissForest => impute_missforest(data, &hyper.missforest(), seed),
        Method::MiceCart => mice_impute(data, &hyper.mice(MiceEngine::Cart), seed),
        Method::MiceForest => mice_impute(data, &hyper.mice(MiceEngine::Rf), seed),
        Method::Fiml | Method::Tsre => Err(Error::Config(format!("{method} is not an imputation method"))),
    }
}

/// Fits the linear growth model with `method`. Imputation methods fit
/// complete-data ML to each completed copy and pool by Rubin's rules.
pub fn apply_method(
    method: Method,
    data: &LongitudinalDataset,
    hyper: &Hyperparameters,
    seed: u64,
    opts: &FitOptions,
) -> Result<MethodFit> {
    let shape = GcmSpec::linear_shape(data.occasions())?;
    match method {
        Method::Fiml => {
            Ok(MethodFit { fit: fit_fiml(data, &shape, opts)?, imputation: None, pooled: None })
        }
        Method::Tsre => Ok(MethodFit {
            fit: fit_tsre(data, &shape, &hyper.tuning(), opts)?,
            imputation: None,
            pooled: None,
        }),
        _ => fit_completed(&impute_with(method, data, hyper, seed)?, &shape, method, opts),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

impl MethodOutcome {
    /// Estimates of a converged fit.
    pub fn estimate(&self) -> Option<Theta> {
        self.fit.as_ref().filter(|f| f.converged).map(|f| f.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub rep: usize,
    pub missing_rate: f64,
    pub outcomes: Vec<MethodOutcome>,
    #[serde(skip)]
    pub seconds: f64,
}

impl ReplicationResult {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

/// The incomplete dataset of replication `rep` of condition `index`.
pub fn replication_data(cond: &Condition, index: usize, rep: usize) -> Result<LongitudinalDataset> {
    let spec = GcmSpec::population();
    let mut gen = stream(cond.base_seed, index, rep, Stage::Generate, 0);
    let complete = generate_cohort_with(&spec, &ErrorDistribution::new(cond.dist), cond.n, &mut gen)?;
    let mut miss = stream(cond.base_seed, index, rep, Stage::Missingness, 0);
    missingness::apply(&complete, &cond.missingness(), &mut miss)
}

/// Runs every requested method on one replication. Method failures are
/// recorded in the outcomes, never propagated.
pub fn run_replication(cond: &Condition, index: usize, rep: usize) -> ReplicationResult {
    let start = Instant::now();
    let opts = cond.hyper.fit_options();
    let (missing_rate, outcomes) = match replication_data(cond, index, rep) {
        Ok(data) => {
            let outcomes = cond
                .methods
                .iter()
                .map(|&method| {
                    let seed: u64 = stream(cond.base_seed, index, rep, Stage::Method, method.index()).random();
                    match apply_method(method, &data, &cond.hyper, seed, &opts) {
                        Ok(r) => MethodOutcome { method, fit: Some(r.fit), error: None },
                        Err(e) => MethodOutcome { method, fit: None, error: Some(e.to_string()) },
                    }
                })
                .collect();
            (missingness::realized_missing_rate(&data), outcomes)
        }
        Err(e) => {
            let outcomes = cond
                .methods
                .iter()
                .map(|&method| MethodOutcome { method, fit: None, error: Some(e.to_string()) })
                .collect();
            (f64::NAN, outcomes)
        }
    };
    ReplicationResult { rep, missing_rate, outcomes, seconds: start.elapsed().as_secs_f64() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub metrics: Vec<MetricRecord>,
    pub successes: usize,
    pub failures: usize,
    /// Failure message counts; non-convergence is reported as `not converged`.
    pub failure_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition_id: usize,
    pub condition: Condition,
    pub methods: Vec<MethodSummary>,
    pub mean_missing_rate: f64,
    /// Summed replication run time; excluded from the CSV report.
    pub wall_seconds: f64,
}

impl ConditionSummary {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn metric(&self, method: Method, parameter: &str) -> Option<&MetricRecord> {
        self.method(method)?.metrics.iter().find(|r| r.parameter == parameter)
    }
}

/// Aggregates replications (in any order) into per-method metrics.
pub fn summarize(cond: &Condition, index: usize, reps: &[ReplicationResult]) -> ConditionSummary {
    let truth = Theta::from_spec(&GcmSpec::population()).expect("population spec is linear");
    let mut ordered: Vec<&ReplicationResult> = reps.iter().collect();
    ordered.sort_by_key(|r| r.rep);
    let methods = cond
        .methods
        .iter()
        .map(|&method| {
            let mut estimates = Vec::new();
            let mut failure_reasons = BTreeMap::new();
            for r in &ordered {
                let outcome = r.outcome(method);
                match outcome.and_then(|o| o.estimate()) {
                    Some(theta) => estimates.push(theta),
                    None => {
                        let reason = outcome
                            .and_then(|o| o.error.clone())
                            .unwrap_or_else(|| "not converged".to_string());
                        *failure_reasons.entry(reason).or_insert(0) += 1;
                    }
                }
            }
            MethodSummary {
                method,
                metrics: metrics_for(&estimates, &truth),
                successes: estimates.len(),
                failures: ordered.len() - estimates.len(),
                failure_reasons,
            }
        })
        .collect();
    let rates: Vec<f64> = ordered.iter().map(|r| r.missing_rate).collect();
    ConditionSummary {
        condition_id: index,
        condition: cond.clone(),
        methods,
        mean_missing_rate: rates.iter().sum::<f64>() / rates.len().max(1) as f64,
        wall_seconds: ordered.iter().map(|r| r.seconds).sum(),
    }
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {parallelism} worker threads: {e}")))
}

/// Runs all replications of all conditions on `parallelism` threads and
/// keeps the replication-level results. Condition `k` of the slice uses
/// stream index `k`.
pub fn run_grid_detailed(
    conditions: &[Condition],
    parallelism: usize,
) -> Result<Vec<(ConditionSummary, Vec<ReplicationResult>)>> {
    for (k, c) in conditions.iter().enumerate() {
        c.validate().map_err(|e| Error::Config(format!("condition {k}: {e}")))?;
    }
    let tasks: Vec<(usize, usize)> =
        conditions.iter().enumerate().flat_map(|(k, c)| (0..c.reps).map(move |r| (k, r))).collect();
    let total = tasks.len();
    let done = AtomicUsize::new(0);
    let step = (total / 20).max(1);
    let results: Vec<ReplicationResult> = pool(parallelism)?.install(|| {
        tasks
            .par_iter()
            .map(|&(k, r)| {
                let out = run_replication(&conditions[k], k, r);
                let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                if finished.is_multiple_of(step) || finished == total {
                    log::info!("{finished}/{total} replications done");
                }
                out
            })
            .collect()
    });
    let mut results = results.into_iter();
    Ok(conditions
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let reps: Vec<ReplicationResult> = results.by_ref().take(c.reps).collect();
            (summarize(c, k, &reps), reps)
        })
        .collect())
}

/// Summaries in input order; identical for any `parallelism`.
pub fn run_grid(conditions: &[Condition], parallelism: usize) -> Result<Vec<ConditionSummary>> {
    Ok(run_grid_detailed(conditions, parallelism)?.into_iter().map(|(s, _)| s).collect())
}

/// Runs one imputation method at each hyperparameter level (neighbors for
/// KNN, trees for missForest and miceForest, terminal nodes for micecart).
/// Every level reuses the condition's streams, so levels differ only in the
/// hyperparameter.
pub fn hyperparameter_sweep(
    cond: &Condition,
    method: Method,
    levels: &[usize],
    parallelism: usize,
) -> Result<Vec<(usize, ConditionSummary)>> {
    if !method.is_imputation() {
        return Err(Error::Config(format!("{method} has no tuned hyperparameter; sweep an imputation method")));
    }
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut c = cond.clone();
        c.methods = vec![method];
        match method {
            Method::Knn => c.hyper.knn_k = level,
            Method::MissForest => c.hyper.missforest_trees = level,
            Method::MiceCart => c.hyper.micecart_nodes = level,
            Method::MiceForest => c.hyper.miceforest_trees = level,
            Method::Fiml | Method::Tsre => unreachable!(),
        }
        let summary = run_grid(std::slice::from_ref(&c), parallelism)?.pop().expect("one condition");
        out.push((level, summary));
    }
    Ok(out)
}

/// The 140-condition design: five sample sizes by four error
/// distributions, each complete and under MAR and MNAR at three rates.
pub fn full_grid() -> Vec<Condition> {
    let mut grid = Vec::with_capacity(140);
    for n in [100, 200, 500, 1000, 5000] {
        for dist in ErrorKind::ALL {
            grid.push(Condition { reps: 500, ..Condition::new(n, Mechanism::None, 0.0, dist) });
            for mechanism in [Mechanism::Mar, Mechanism::Mnar] {
                for mr in [0.05, 0.15, 0.30] {
                    grid.push(Condition { reps: 500, ..Condition::new(n, mechanism, mr, dist) });
                }
            }
        }
    }
    grid
}

/// A condition as written in a grid file; unset fields fall back to the
/// grid-level values and defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionEntry {
    pub n: usize,
    pub mechanism: Mechanism,
    #[serde(default)]
    pub mr: f64,
    #[serde(default = "default_dist")]
    pub dist: ErrorKind,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default)]
    pub hyper: Hyperparameters,
}

fn default_dist() -> ErrorKind {
    ErrorKind::Normal
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_parallelism() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub conditions: Vec<ConditionEntry>,
    pub reps: usize,
    pub base_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let grid: GridConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("grid file: {e}")))?;
        grid.conditions()?;
        Ok(grid)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Resolved and validated conditions.
    pub fn conditions(&self) -> Result<Vec<Condition>> {
        self.conditions
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let c = Condition {
                    n: e.n,
                    mechanism: e.mechanism,
                    mr: e.mr,
                    dist: e.dist,
                    methods: e.methods.clone(),
                    reps: e.reps.unwrap_or(self.reps),
                    base_seed: self.base_seed,
                    hyper: e.hyper,
                };
                c.validate().map_err(|err| Error::Config(format!("condition {k}: {err}")))?;
                Ok(c)
            })
            .collect()
    }

    pub fn from_conditions(conditions: &[Condition], reps: usize, base_seed: u64) -> Self {
        GridConfig {
            conditions: conditions
                .iter()
                .map(|c| ConditionEntry {
                    n: c.n,
                    mechanism: c.mechanism,
                    mr: c.mr,
                    dist: c.dist,
                    methods: c.methods.clone(),
                    reps: (c.reps != reps).then_some(c.reps),
                    hyper: c.hyper,
                })
                .collect(),
            reps,
            base_seed,
            output_dir: default_output_dir(),
            parallelism: 1,
        }
    }
}
