//! Rubin pooling of multiply-imputed fits, and the bias and accuracy
//! metrics used to compare methods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{FitResult, Theta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFit {
    pub theta_bar: Theta,
    pub se_pooled: Theta,
    /// Fits that entered the pool.
    pub m: usize,
    /// Non-converged fits left out.
    pub dropped: usize,
    pub within: Theta,
    pub between: Theta,
}

impl PooledFit {
    /// Between-imputation variance is undefined for a single fit and set to 0.
    pub fn single_fit(&self) -> bool {
        self.m == 1
    }
}

/// Pools converged fits: mean estimate, `W` the mean squared SE, `B` the
/// sample variance of estimates, total variance `W + (1 + 1/m)B`.
/// At least half of the fits must have converged.
pub fn pool_rubin(fits: &[FitResult]) -> Result<PooledFit> {
    if fits.is_empty() {
        return Err(Error::Pooling("no fits to pool".into()));
    }
    let kept: Vec<&FitResult> = fits.iter().filter(|f| f.converged).collect();
    let dropped = fits.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Pooling("no imputed fit converged".into()));
    }
    if 2 * kept.len() < fits.len() {
        return Err(Error::Pooling(format!("only {} of {} imputed fits converged", kept.len(), fits.len())));
    }
    let m = kept.len() as f64;
    let theta_bar: [f64; 6] = std::array::from_fn(|k| kept.iter().map(|f| f.theta.get(k)).sum::<f64>() / m);
    let within: [f64; 6] = std::array::from_fn(|k| kept.iter().map(|f| f.se.get(k).powi(2)).sum::<f64>() / m);
    let between: [f64; 6] = std::array::from_fn(|k| {
        if kept.len() < 2 {
            0.0
        } else {
            kept.iter().map(|f| (f.theta.get(k) - theta_bar[k]).powi(2)).sum::<f64>() / (m - 1.0)
        }
    });
    let se: [f64; 6] = std::array::from_fn(|k| (within[k] + (1.0 + 1.0 / m) * between[k]).sqrt());
    Ok(PooledFit {
        theta_bar: Theta::from_array(theta_bar),
        se_pooled: Theta::from_array(se),
        m: kept.len(),
        dropped,
        within: Theta::from_array(within),
        between: Theta::from_array(between),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `100(θ̄ − θ)/θ`, or the raw bias `θ̄ − θ` when `θ = 0`. `NaN` for no estimates.
pub fn relative_bias(estimates: &[f64], truth: f64) -> f64 {
    if estimates.is_empty() {
        return f64::NAN;
    }
    let bias = mean(estimates) - truth;
    if truth == 0.0 {
        bias
    } else {
        100.0 * bias / truth
    }
}

/// Mean squared deviation from the truth. `NaN` for no estimates.
pub fn mse(estimates: &[f64], truth: f64) -> f64 {
    if estimates.is_empty() {
        return f64::NAN;
    }
    estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub parameter: String,
    /// Percent, or raw bias for a zero truth.
    pub rb: f64,
    pub mse: f64,
    pub n_reps: usize,
}

impl MetricRecord {
    pub fn from_estimates(parameter: &str, estimates: &[f64], truth: f64) -> Self {
        MetricRecord {
            parameter: parameter.to_string(),
            rb: relative_bias(estimates, truth),
            mse: mse(estimates, truth),
            n_reps: estimates.len(),
        }
    }
}

/// One record per growth parameter, from per-replication estimates.
pub fn metrics_for(estimates: &[Theta], truth: &Theta) -> Vec<MetricRecord> {
    Theta::NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let xs: Vec<f64> = estimates.iter().map(|t| t.get(k)).collect();
            MetricRecord::from_estimates(name, &xs, truth.get(k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(v: f64, se: f64, converged: bool) -> FitResult {
        FitResult {
            method: "x".into(),
            theta: Theta::from_array([v; 6]),
            se: Theta::from_array([se; 6]),
            loglik: None,
            converged,
            boundary: false,
            iterations: 0,
        }
    }

    #[test]
    fn two_fit_hand_example() {
        let p = pool_rubin(&[fit(1.0, 0.0, true), fit(3.0, 0.0, true)]).unwrap();
        assert_eq!(p.theta_bar.beta_l, 2.0);
        assert_eq!(p.between.beta_l, 2.0);
        assert!((p.se_pooled.beta_l.powi(2) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_fit_uses_within_only() {
        let p = pool_rubin(&[fit(1.5, 0.4, true)]).unwrap();
        assert!(p.single_fit());
        assert_eq!(p.theta_bar.var_e, 1.5);
        assert!((p.se_pooled.var_e - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identical_fits_have_no_between_variance() {
        let p = pool_rubin(&vec![fit(2.0, 0.3, true); 5]).unwrap();
        assert_eq!(p.between.beta_s, 0.0);
        assert!((p.se_pooled.beta_s - 0.3).abs() < 1e-12);
    }

    #[test]
    fn non_converged_fits_are_dropped_and_counted() {
        let p = pool_rubin(&[fit(1.0, 0.1, true), fit(9.0, 0.1, false), fit(3.0, 0.1, true)]).unwrap();
        assert_eq!((p.m, p.dropped), (2, 1));
        assert_eq!(p.theta_bar.cov_ls, 2.0);
        assert!(pool_rubin(&[fit(1.0, 0.1, false)]).is_err());
        assert!(pool_rubin(&[fit(1.0, 0.1, true), fit(1.0, 0.1, false), fit(1.0, 0.1, false)]).is_err());
        assert!(pool_rubin(&[]).is_err());
    }

    #[test]
    fn bias_and_mse_examples() {
        assert!((relative_bias(&[1.05], 1.0) - 5.0).abs() < 1e-12);
        assert!((relative_bias(&[0.03], 0.0) - 0.03).abs() < 1e-15);
        assert_eq!(relative_bias(&[2.0, 2.0], 2.0), 0.0);
        assert_eq!(mse(&[1.0, 1.0], 1.0), 0.0);
        assert_eq!(mse(&[0.0, 2.0], 1.0), 1.0);
    }
}
