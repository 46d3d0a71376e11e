use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{check_shape, minimize, se_from_covariance, FitOptions, FitResult, Theta};
use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GcmSpec;

const LN_2PI: f64 = 1.8378770664093453;

/// Sufficient statistics of the subjects sharing one observation pattern.
#[derive(Debug, Clone)]
pub struct PatternStats {
    pub observed: Vec<usize>,
    pub n: f64,
    pub mean: DVector<f64>,
    /// Covariance with denominator `n`.
    pub cov: DMatrix<f64>,
}

/// Normal-theory negative log-likelihood of the growth model, summed over
/// observation patterns.
///
/// Each pattern contributes `n/2 [k ln 2π + ln|Σ_oo| + tr(Σ_oo⁻¹ S) + d'Σ_oo⁻¹ d]`
/// with `d = ȳ - μ_o`, which equals the sum of the subjects' marginal
/// log-densities over their observed sub-vectors. A single complete pattern
/// built from `(μ̂, Σ̂)` gives the moment-discrepancy objective up to a
/// constant.
#[derive(Debug, Clone)]
pub struct MomentObjective {
    loadings: DMatrix<f64>,
    patterns: Vec<PatternStats>,
}

impl MomentObjective {
    pub fn from_data(data: &LongitudinalDataset, loadings: &DMatrix<f64>) -> Self {
        let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
        for i in 0..data.n() {
            let key: Vec<bool> = (0..data.occasions()).map(|t| data.is_observed(i, t)).collect();
            groups.entry(key).or_default().push(i);
        }
        let patterns = groups
            .into_iter()
            .map(|(key, rows)| {
                let observed: Vec<usize> = key.iter().enumerate().filter(|(_, &o)| o).map(|(t, _)| t).collect();
                let k = observed.len();
                let n = rows.len() as f64;
                let mut mean = DVector::zeros(k);
                for &i in &rows {
                    for (a, &t) in observed.iter().enumerate() {
                        mean[a] += data.y()[(i, t)];
                    }
                }
                mean /= n;
                let mut cov = DMatrix::zeros(k, k);
                for &i in &rows {
                    for a in 0..k {
                        let da = data.y()[(i, observed[a])] - mean[a];
                        for b in 0..=a {
                            cov[(a, b)] += da * (data.y()[(i, observed[b])] - mean[b]);
                        }
                    }
                }
                for a in 0..k {
                    for b in 0..=a {
                        cov[(a, b)] /= n;
                        cov[(b, a)] = cov[(a, b)];
                    }
                }
                PatternStats { observed, n, mean, cov }
            })
            .collect();
        MomentObjective { loadings: loadings.clone(), patterns }
    }

    /// Objective for complete data summarized by `(mean, cov)` over `n` subjects.
    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>, n: f64, loadings: &DMatrix<f64>) -> Self {
        let t = mean.len();
        MomentObjective {
            loadings: loadings.clone(),
            patterns: vec![PatternStats { observed: (0..t).collect(), n, mean: mean.clone(), cov: cov.clone() }],
        }
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn patterns(&self) -> &[PatternStats] {
        &self.patterns
    }

    pub fn value(&self, theta: &Theta) -> Result<f64> {
        let (mu, sigma) = theta.moments(&self.loadings);
        let mut total = 0.0;
        for p in &self.patterns {
            let s = linalg::submatrix(&sigma, &p.observed);
            let chol = linalg::cholesky(&s)
                .ok_or_else(|| Error::Numerical("implied covariance is not positive definite".into()))?;
            let d = &p.mean - linalg::subvector(&mu, &p.observed);
            let inv = chol.inverse();
            let trace: f64 = (inv.component_mul(&p.cov)).sum();
            let quad = d.dot(&(&inv * &d));
            let k = p.observed.len() as f64;
            total += 0.5 * p.n * (k * LN_2PI + linalg::log_det_from_cholesky(&chol) + trace + quad);
        }
        Ok(total)
    }

    /// Value and analytic gradient with respect to the natural parameters
    /// `(β_L, β_S, σ_L², σ_S², σ_LS, σ_e²)`.
    pub fn value_and_gradient(&self, theta: &Theta) -> Result<(f64, [f64; 6])> {
        let (mu, sigma) = theta.moments(&self.loadings);
        let t = mu.len();
        let mut g_mu = DVector::<f64>::zeros(t);
        let mut g_sigma = DMatrix::<f64>::zeros(t, t);
        let mut total = 0.0;
        for p in &self.patterns {
            let s = linalg::submatrix(&sigma, &p.observed);
            let chol = linalg::cholesky(&s)
                .ok_or_else(|| Error::Numerical("implied covariance is not positive definite".into()))?;
            let d = &p.mean - linalg::subvector(&mu, &p.observed);
            let inv = chol.inverse();
            let inv_d = &inv * &d;
            let trace: f64 = (inv.component_mul(&p.cov)).sum();
            let quad = d.dot(&inv_d);
            let k = p.observed.len() as f64;
            total += 0.5 * p.n * (k * LN_2PI + linalg::log_det_from_cholesky(&chol) + trace + quad);
            // dF/dΣ_oo = n/2 [P - P (S + d d') P]
            let outer = &p.cov + &d * d.transpose();
            let grad_s = 0.5 * p.n * (&inv - &inv * outer * &inv);
            for (a, &ta) in p.observed.iter().enumerate() {
                g_mu[ta] -= p.n * inv_d[a];
                for (b, &tb) in p.observed.iter().enumerate() {
                    g_sigma[(ta, tb)] += grad_s[(a, b)];
                }
            }
        }
        let lam = &self.loadings;
        let g_beta = lam.transpose() * &g_mu;
        let k = lam.transpose() * &g_sigma * lam;
        let grad = [g_beta[0], g_beta[1], k[(0, 0)], k[(1, 1)], k[(0, 1)] + k[(1, 0)], g_sigma.trace()];
        Ok((total, grad))
    }

    /// Hessian in the natural parameters by central differences of the
    /// analytic gradient.
    pub fn natural_hessian(&self, theta: &Theta) -> Option<DMatrix<f64>> {
        let x = DVector::from_row_slice(&theta.to_array());
        let mut h = super::optimize::jacobian_fd(
            |p| {
                let th = Theta::from_slice(p.as_slice());
                self.value_and_gradient(&th).ok().map(|(_, g)| DVector::from_row_slice(&g))
            },
            &x,
            1e-5,
        )?;
        linalg::symmetrize(&mut h);
        Some(h)
    }
}

/// Negative log-likelihood of `theta` on the observed cells of `data`.
pub fn negloglik_fiml(theta: &Theta, data: &LongitudinalDataset, shape: &GcmSpec) -> Result<f64> {
    let loadings = check_shape(shape, data.occasions())?;
    MomentObjective::from_data(data, &loadings).value(theta)
}

/// Starting values from available-case moments: OLS of occasion means on
/// the loadings and least squares of pairwise covariances on the structure.
pub fn sample_moment_start(data: &LongitudinalDataset, loadings: &DMatrix<f64>) -> Theta {
    let t = data.occasions();
    let means: Vec<f64> = (0..t)
        .map(|j| {
            let col = data.observed_column(j);
            col.iter().sum::<f64>() / col.len().max(1) as f64
        })
        .collect();
    let m = DVector::from_vec(means.clone());
    let beta = (loadings.transpose() * loadings)
        .try_inverse()
        .map(|inv| inv * loadings.transpose() * &m)
        .unwrap_or_else(|| DVector::from_vec(vec![means[0], 0.0]));

    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for a in 0..t {
        for b in 0..=a {
            let pairs: Vec<(f64, f64)> =
                (0..data.n()).filter_map(|i| Some((data.value(i, a)?, data.value(i, b)?))).collect();
            if pairs.len() < 2 {
                continue;
            }
            let np = pairs.len() as f64;
            let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / np, pairs.iter().map(|p| p.1).sum::<f64>() / np);
            let c = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / np;
            let (a0, a1, b0, b1) = (loadings[(a, 0)], loadings[(a, 1)], loadings[(b, 0)], loadings[(b, 1)]);
            rows.push([a0 * b0, a1 * b1, a0 * b1 + a1 * b0, if a == b { 1.0 } else { 0.0 }]);
            rhs.push(c);
        }
    }
    let diag_mean = (0..t)
        .map(|j| {
            let col = data.observed_column(j);
            let mu = col.iter().sum::<f64>() / col.len().max(1) as f64;
            col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / col.len().max(1) as f64
        })
        .sum::<f64>()
        / t as f64;
    let scale = if diag_mean > 0.0 { diag_mean } else { 1.0 };
    let mut est = [0.5 * scale, 0.5 * scale / ((t - 1) as f64).powi(2), 0.0, 0.5 * scale];
    if rows.len() >= 4 {
        let x = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
        let y = DVector::from_vec(rhs);
        if let Some(inv) = (x.transpose() * &x).try_inverse() {
            let sol = inv * x.transpose() * y;
            est = [sol[0], sol[1], sol[2], sol[3]];
        }
    }
    let slope_scale = scale / ((t - 1) as f64).powi(2);
    let var_l = est[0].max(0.05 * scale);
    let var_s = est[1].max(0.05 * slope_scale);
    let var_e = est[3].max(0.05 * scale);
    let limit = 0.5 * (var_l * var_s).sqrt();
    Theta { beta_l: beta[0], beta_s: beta[1], var_l, var_s, cov_ls: est[2].clamp(-limit, limit), var_e }
}

/// Full-information maximum likelihood over each subject's observed scores.
pub fn fit_fiml(data: &LongitudinalDataset, shape: &GcmSpec, opts: &FitOptions) -> Result<FitResult> {
    let loadings = check_shape(shape, data.occasions())?;
    if data.n() <= 3 {
        return Err(Error::Data(format!("need more than 3 subjects to fit the growth model, got {}", data.n())));
    }
    let objective = MomentObjective::from_data(data, &loadings);
    let mut starts = vec![sample_moment_start(data, &loadings)];
    if opts.multi_start {
        starts.push(Theta::from_spec(&GcmSpec::population())?);
    }
    let fit = minimize(&objective, &starts, opts)?;
    let se = if opts.compute_se {
        se_from_covariance(objective.natural_hessian(&fit.theta).and_then(|h| linalg::spd_inverse(&h)))
    } else {
        Theta::from_array([f64::NAN; 6])
    };
    log::debug!("fiml: f = {}, max|grad| = {:e}", fit.value, fit.grad_working.iter().fold(0.0_f64, |m, g| m.max(g.abs())));
    Ok(FitResult {
        method: "fiml".into(),
        theta: fit.theta,
        se,
        loglik: Some(-fit.value),
        converged: fit.converged,
        boundary: fit.boundary,
        iterations: fit.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missingness::apply_mar;
    use crate::model::{generate_cohort, ErrorDistribution, ErrorKind};

    fn population_data(n: usize, seed: u64) -> LongitudinalDataset {
        generate_cohort(&GcmSpec::population(), &ErrorDistribution::new(ErrorKind::Normal), n, seed).unwrap()
    }

    #[test]
    fn single_observation_is_univariate_normal() {
        let y = DMatrix::from_row_slice(1, 4, &[7.5, 0.0, 0.0, 0.0]);
        let mask = DMatrix::from_row_slice(1, 4, &[true, false, false, false]);
        let d = LongitudinalDataset::new(y, mask).unwrap();
        let theta = Theta::from_spec(&GcmSpec::population()).unwrap();
        let v = negloglik_fiml(&theta, &d, &GcmSpec::population()).unwrap();
        // μ1 = 6, Σ11 = 2
        let expected = 0.5 * (LN_2PI + 2.0_f64.ln() + (7.5 - 6.0_f64).powi(2) / 2.0);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicating_subjects_doubles_the_objective() {
        let d = apply_mar(&population_data(60, 4), 0.2).unwrap();
        let mut y = DMatrix::zeros(120, 4);
        let mut mask = DMatrix::from_element(120, 4, false);
        for i in 0..60 {
            for t in 0..4 {
                for r in [i, i + 60] {
                    y[(r, t)] = d.y()[(i, t)];
                    mask[(r, t)] = d.is_observed(i, t);
                }
            }
        }
        let dd = LongitudinalDataset::new(y, mask).unwrap();
        let theta = Theta { beta_l: 5.5, beta_s: 2.2, var_l: 1.3, var_s: 0.8, cov_ls: 0.1, var_e: 1.2 };
        let shape = GcmSpec::population();
        let single = negloglik_fiml(&theta, &d, &shape).unwrap();
        let double = negloglik_fiml(&theta, &dd, &shape).unwrap();
        assert!((double - 2.0 * single).abs() <= 1e-12 * double.abs());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let d = apply_mar(&population_data(200, 5), 0.15).unwrap();
        let obj = MomentObjective::from_data(&d, &GcmSpec::population().loadings);
        let theta = Theta { beta_l: 6.3, beta_s: 1.8, var_l: 0.9, var_s: 1.4, cov_ls: -0.2, var_e: 1.1 };
        let (_, g) = obj.value_and_gradient(&theta).unwrap();
        let base = theta.to_array();
        for k in 0..6 {
            let h = 1e-6;
            let (mut a, mut b) = (base, base);
            a[k] += h;
            b[k] -= h;
            let fd = (obj.value(&Theta::from_array(a)).unwrap() - obj.value(&Theta::from_array(b)).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0), "component {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn non_pd_covariance_is_an_error() {
        let d = population_data(10, 1);
        let theta = Theta { beta_l: 6.0, beta_s: 2.0, var_l: 0.0, var_s: 0.0, cov_ls: 0.0, var_e: -1.0 };
        assert!(matches!(negloglik_fiml(&theta, &d, &GcmSpec::population()), Err(Error::Numerical(_))));
    }

    #[test]
    fn fit_reaches_stationary_point_with_small_gradient() {
        let d = apply_mar(&population_data(500, 6), 0.3).unwrap();
        let shape = GcmSpec::population();
        let fit = fit_fiml(&d, &shape, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        let obj = MomentObjective::from_data(&d, &shape.loadings);
        let p = FitOptions::default().parameterization;
        let phi = p.from_theta(&fit.theta);
        let (_, g) = obj.value_and_gradient(&fit.theta).unwrap();
        let gw = p.pull_back(&phi, &g);
        assert!(gw.iter().all(|v| v.abs() < 1e-5), "{gw:?}");
        assert!(fit.se.to_array().iter().all(|s| s.is_finite() && *s > 0.0));
        let truth = Theta::from_spec(&shape).unwrap();
        let at_truth = negloglik_fiml(&truth, &d, &shape).unwrap();
        assert!(-fit.loglik.unwrap() <= at_truth + 1e-9);
    }

    #[test]
    fn too_few_subjects_is_rejected() {
        let d = population_data(3, 1);
        assert!(fit_fiml(&d, &GcmSpec::population(), &FitOptions::default()).is_err());
    }
}
