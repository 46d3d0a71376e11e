//! Missingness injection for complete cohorts.
//!
//! MAR is monotone dropout driven by the last observed score: after occasion
//! `t` the cohort keeps `1 - [2t/(T-1)]·mr` of its subjects, removing the
//! highest still-observed scores at `t`. MNAR thresholds an auxiliary
//! variable `Aux_i = r·b_is + ε_i` built from the unobserved random slope.
//! Both leave the first occasion observed and average to `mr` over all cells.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

/// Name of the auxiliary covariate written by [`apply_mnar`].
pub const AUX: &str = "aux";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    None,
    Mar,
    Mnar,
}

impl Mechanism {
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Mar => "mar",
            Mechanism::Mnar => "mnar",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessConfig {
    pub mechanism: Mechanism,
    pub mr: f64,
    /// Correlation between Aux and the latent slope (MNAR only).
    pub target_corr: f64,
}

impl MissingnessConfig {
    pub fn new(mechanism: Mechanism, mr: f64) -> Self {
        MissingnessConfig { mechanism, mr, target_corr: 0.8 }
    }

    pub fn validate(&self) -> Result<()> {
        validate_rate(self.mr)?;
        match self.mechanism {
            Mechanism::None if self.mr != 0.0 => {
                Err(Error::Config(format!("mechanism `none` requires mr = 0, got {}", self.mr)))
            }
            Mechanism::Mar | Mechanism::Mnar if self.mr == 0.0 => {
                Err(Error::Config(format!("mechanism `{}` requires mr > 0", self.mechanism)))
            }
            Mechanism::Mnar if !(self.target_corr > 0.0 && self.target_corr < 1.0) => Err(Error::Config(
                format!("target correlation must lie in (0, 1), got {}", self.target_corr),
            )),
            _ => Ok(()),
        }
    }
}

/// The deepest cutoff level `1 - 2·mr` must stay in (0, 1].
pub fn validate_rate(mr: f64) -> Result<()> {
    if !(0.0..0.5).contains(&mr) {
        return Err(Error::Config(format!(
            "missingness rate {mr} out of range: cutoff level 1 - 2*mr must lie in (0, 1], so 0 <= mr < 0.5"
        )));
    }
    Ok(())
}

/// Cumulative fraction of the cohort still observed after occasion `t`
/// (1-based, `t = 1..T-1`): `1 - [2t/(T-1)]·mr`.
pub fn mar_retention_level(t: usize, occasions: usize, mr: f64) -> f64 {
    1.0 - (2.0 * t as f64 / (occasions - 1) as f64) * mr
}

/// Percentile level of the MNAR threshold at occasion `t` (1-based,
/// `t = 2..T`): `1 - [2(t-1)/(T-1)]·mr`.
pub fn mnar_level(t: usize, occasions: usize, mr: f64) -> f64 {
    1.0 - (2.0 * (t - 1) as f64 / (occasions - 1) as f64) * mr
}

/// Monotone MAR dropout.
///
/// At each occasion `t < T` the at-risk subjects (still observed at `t`) are
/// ranked by `y_t`; the highest are dropped from `t+1` on until the cohort
/// retains `round((1 - [2t/(T-1)]·mr)·N)` subjects. The cutoff `c_t` is
/// therefore an empirical upper quantile of the at-risk scores and only
/// observed values are ever compared. Ties drop the later subject first.
pub fn apply_mar(data: &LongitudinalDataset, mr: f64) -> Result<LongitudinalDataset> {
    validate_rate(mr)?;
    if !data.is_complete() {
        return Err(Error::Data("MAR injection expects a fully observed cohort".into()));
    }
    let mut out = data.clone();
    if mr == 0.0 {
        return Ok(out);
    }
    let n = data.n();
    let t_max = data.occasions();
    let mut at_risk: Vec<usize> = (0..n).collect();
    for t in 1..t_max {
        let retain = (mar_retention_level(t, t_max, mr) * n as f64).round() as usize;
        if at_risk.len() <= retain {
            continue;
        }
        let drop = at_risk.len() - retain;
        let occ = t - 1;
        let mut ranked = at_risk.clone();
        ranked.sort_by(|&a, &b| {
            let (ya, yb) = (out.y()[(a, occ)], out.y()[(b, occ)]);
            yb.total_cmp(&ya).then(b.cmp(&a))
        });
        for &i in &ranked[..drop] {
            for later in t..t_max {
                out.set_missing(i, later)?;
            }
        }
        let dropped: std::collections::HashSet<usize> = ranked[..drop].iter().copied().collect();
        at_risk.retain(|i| !dropped.contains(i));
    }
    Ok(out)
}

/// Regression weight `r` giving `corr(r·b_s + ε, b_s) = target_corr` when
/// `Var(b_s) = var_s` and `Var(ε) = 1`.
pub fn aux_coefficient(target_corr: f64, var_s: f64) -> f64 {
    target_corr / (var_s.sqrt() * (1.0 - target_corr * target_corr).sqrt())
}

/// MNAR via an auxiliary variable tied to the generating random slopes.
///
/// `y_it` (t = 2..T) is missing when `Aux_i` exceeds the analytic percentile
/// of `Aux ~ N(r·β_S, r²σ_S² + 1)` at level `1 - [2(t-1)/(T-1)]·mr`. The Aux
/// values are attached to the output as the covariate [`AUX`].
pub fn apply_mnar<R: Rng + ?Sized>(
    data: &LongitudinalDataset,
    mr: f64,
    target_corr: f64,
    rng: &mut R,
) -> Result<LongitudinalDataset> {
    validate_rate(mr)?;
    if !(target_corr > 0.0 && target_corr < 1.0) {
        return Err(Error::Config(format!("target correlation must lie in (0, 1), got {target_corr}")));
    }
    let truth = data
        .truth()
        .ok_or_else(|| Error::Mechanism("MNAR injection needs the generating random slopes".into()))?;
    if truth.random_effects.ncols() < 2 {
        return Err(Error::Mechanism("generating model has no slope factor".into()));
    }
    if !data.is_complete() {
        return Err(Error::Data("MNAR injection expects a fully observed cohort".into()));
    }
    let mut out = data.clone();
    if mr == 0.0 {
        return Ok(out);
    }
    let var_s = truth.spec.psi[(1, 1)];
    if !(var_s > 0.0) {
        return Err(Error::Mechanism("slope variance is zero; Aux cannot correlate with the slope".into()));
    }
    let beta_s = truth.spec.beta[1];
    let r = aux_coefficient(target_corr, var_s);
    let aux_dist = Normal::new(r * beta_s, (r * r * var_s + 1.0).sqrt())
        .map_err(|e| Error::Mechanism(format!("invalid Aux distribution: {e}")))?;

    let n = data.n();
    let t_max = data.occasions();
    let aux: Vec<f64> = (0..n)
        .map(|i| {
            let eps: f64 = StandardNormal.sample(rng);
            r * truth.random_effects[(i, 1)] + eps
        })
        .collect();
    for t in 2..=t_max {
        let level = mnar_level(t, t_max, mr);
        if level >= 1.0 {
            continue;
        }
        let threshold = aux_dist.inverse_cdf(level);
        for (i, &a) in aux.iter().enumerate() {
            if a > threshold {
                out.set_missing(i, t - 1)?;
            }
        }
    }
    out.set_covariate(AUX, DVector::from_vec(aux))?;
    Ok(out)
}

/// Uniform cell-wise missingness, keeping the first occasion observed.
pub fn apply_mcar<R: Rng + ?Sized>(data: &LongitudinalDataset, rate: f64, rng: &mut R) -> Result<LongitudinalDataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("MCAR rate must lie in [0, 1), got {rate}")));
    }
    let mut out = data.clone();
    for i in 0..data.n() {
        for t in 1..data.occasions() {
            if rng.random::<f64>() < rate && out.is_observed(i, t) {
                out.set_missing(i, t)?;
            }
        }
    }
    Ok(out)
}

pub fn apply<R: Rng + ?Sized>(
    data: &LongitudinalDataset,
    config: &MissingnessConfig,
    rng: &mut R,
) -> Result<LongitudinalDataset> {
    config.validate()?;
    match config.mechanism {
        Mechanism::None => Ok(data.clone()),
        Mechanism::Mar => apply_mar(data, config.mr),
        Mechanism::Mnar => apply_mnar(data, config.mr, config.target_corr, rng),
    }
}

/// Fraction of unobserved cells.
pub fn realized_missing_rate(data: &LongitudinalDataset) -> f64 {
    data.missing_count() as f64 / (data.n() * data.occasions()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_cohort, ErrorDistribution, ErrorKind, GcmSpec};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cohort(n: usize, seed: u64) -> LongitudinalDataset {
        generate_cohort(&GcmSpec::population(), &ErrorDistribution::new(ErrorKind::Normal), n, seed).unwrap()
    }

    #[test]
    fn mar_levels_for_four_occasions() {
        let levels: Vec<f64> = (1..4).map(|t| mar_retention_level(t, 4, 0.15)).collect();
        for (got, want) in levels.iter().zip([0.90, 0.80, 0.70]) {
            assert!((got - want).abs() < 1e-12);
        }
        let mnar: Vec<f64> = (2..=4).map(|t| mnar_level(t, 4, 0.15)).collect();
        for (got, want) in mnar.iter().zip([0.90, 0.80, 0.70]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_leaves_data_unchanged() {
        let d = cohort(100, 1);
        assert_eq!(apply_mar(&d, 0.0).unwrap(), d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_mnar(&d, 0.0, 0.8, &mut rng).unwrap(), d);
    }

    #[test]
    fn rate_range_is_enforced() {
        let d = cohort(10, 1);
        assert!(matches!(apply_mar(&d, 0.6), Err(Error::Config(_))));
        assert!(matches!(apply_mar(&d, -0.1), Err(Error::Config(_))));
        assert!(MissingnessConfig::new(Mechanism::None, 0.1).validate().is_err());
        assert!(MissingnessConfig::new(Mechanism::Mar, 0.0).validate().is_err());
    }

    #[test]
    fn mar_rate_and_monotonicity() {
        let d = apply_mar(&cohort(5000, 7), 0.30).unwrap();
        let rate = realized_missing_rate(&d);
        assert!((rate - 0.30).abs() < 0.01, "rate {rate}");
        for i in 0..d.n() {
            assert!(d.is_observed(i, 0));
            for t in 1..4 {
                if !d.is_observed(i, t - 1) {
                    assert!(!d.is_observed(i, t));
                }
            }
        }
        let small = apply_mar(&cohort(5000, 8), 0.05).unwrap();
        assert!((realized_missing_rate(&small) - 0.05).abs() < 0.01);
    }

    #[test]
    fn mar_mask_ignores_values_that_become_missing() {
        let full = cohort(300, 3);
        let a = apply_mar(&full, 0.15).unwrap();
        // Scramble the complete-data values in cells that end up missing.
        let mut y = full.y().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..full.n() {
            for t in 0..4 {
                if !a.is_observed(i, t) {
                    y[(i, t)] = rng.random::<f64>() * 100.0 - 50.0;
                }
            }
        }
        let b = apply_mar(&LongitudinalDataset::complete(y).unwrap(), 0.15).unwrap();
        assert_eq!(a.mask(), b.mask());
    }

    #[test]
    fn mnar_needs_truth() {
        let d = LongitudinalDataset::complete(DMatrix::from_element(3, 4, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(apply_mnar(&d, 0.1, 0.8, &mut rng), Err(Error::Mechanism(_))));
    }

    #[test]
    fn aux_coefficient_hits_target_correlation() {
        let r = aux_coefficient(0.8, 1.0);
        assert!((r - 4.0 / 3.0).abs() < 1e-12);
        assert!((r / (r * r + 1.0).sqrt() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn mnar_per_occasion_rates() {
        let d = cohort(100_000, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = apply_mnar(&d, 0.15, 0.8, &mut rng).unwrap();
        let n = m.n() as f64;
        let rates: Vec<f64> = (0..4).map(|t| m.missing_in_column(t) as f64 / n).collect();
        assert_eq!(rates[0], 0.0);
        for (got, want) in rates[1..].iter().zip([0.10, 0.20, 0.30]) {
            assert!((got - want).abs() < 0.01, "rates {rates:?}");
        }
        assert!((realized_missing_rate(&m) - 0.15).abs() < 0.01);
        assert!(m.covariate(AUX).is_some());
    }

    #[test]
    fn realized_rate_basics() {
        let d = cohort(20, 1);
        assert_eq!(realized_missing_rate(&d), 0.0);
        let mut one = LongitudinalDataset::complete(DMatrix::from_element(1, 4, 2.0)).unwrap();
        for t in 1..4 {
            one.set_missing(0, t).unwrap();
        }
        assert_eq!(realized_missing_rate(&one), 0.75);
    }
}
