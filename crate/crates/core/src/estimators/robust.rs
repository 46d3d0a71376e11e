//! Two-stage robust estimation.
//!
//! Stage 1 computes Huber-weighted mean and covariance with an EM algorithm
//! that handles arbitrary missingness patterns. Stage 2 fits the growth
//! model to those moments with the normal-theory discrepancy, and standard
//! errors come from the sandwich of the stage-1 estimating equations pushed
//! through the stage-2 solution map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{check_shape, minimize, optimize, se_from_covariance, FitOptions, FitResult, MomentObjective, Theta};
use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GcmSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustTuning {
    /// Chi-square probability defining the distance beyond which weights
    /// decay. `1.0` disables downweighting (normal-theory EM).
    pub downweight_quantile: f64,
}

impl Default for RobustTuning {
    fn default() -> Self {
        RobustTuning { downweight_quantile: 0.95 }
    }
}

impl RobustTuning {
    pub fn huber(rho: f64) -> Self {
        RobustTuning { downweight_quantile: rho }
    }

    pub fn disabled() -> Self {
        RobustTuning { downweight_quantile: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let rho = self.downweight_quantile;
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("downweight quantile must lie in (0, 1], got {rho}")));
        }
        Ok(())
    }
}

/// Huber cutoff and consistency factor for one observed dimension.
#[derive(Debug, Clone, Copy)]
struct HuberConstants {
    /// Distance threshold `d₀`; infinite when downweighting is off.
    cutoff: f64,
    /// `τ = E[w(d)² d²] / k` under normality, so that `w²/τ` is consistent.
    tau: f64,
}

fn huber_constants(k: usize, rho: f64) -> HuberConstants {
    if rho >= 1.0 {
        return HuberConstants { cutoff: f64::INFINITY, tau: 1.0 };
    }
    let chi_k = ChiSquared::new(k as f64).expect("positive df");
    let chi_k2 = ChiSquared::new(k as f64 + 2.0).expect("positive df");
    let r2 = chi_k.inverse_cdf(rho);
    let tau = chi_k2.cdf(r2) + (r2 / k as f64) * (1.0 - chi_k.cdf(r2));
    HuberConstants { cutoff: r2.sqrt(), tau }
}

fn huber_weight(d: f64, c: &HuberConstants) -> f64 {
    if d <= c.cutoff {
        1.0
    } else {
        c.cutoff / d
    }
}

#[derive(Debug, Clone)]
pub struct RobustMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Mean weights `w1` per subject, in (0, 1].
    pub weights: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// All observed rows coincide; `cov` is the zero matrix.
    pub degenerate: bool,
}

struct Pattern {
    observed: Vec<usize>,
    missing: Vec<usize>,
    rows: Vec<usize>,
}

fn patterns(data: &LongitudinalDataset) -> Vec<Pattern> {
    let mut map: std::collections::BTreeMap<Vec<bool>, Vec<usize>> = Default::default();
    for i in 0..data.n() {
        map.entry((0..data.occasions()).map(|t| data.is_observed(i, t)).collect()).or_default().push(i);
    }
    map.into_iter()
        .map(|(key, rows)| Pattern {
            observed: (0..key.len()).filter(|&t| key[t]).collect(),
            missing: (0..key.len()).filter(|&t| !key[t]).collect(),
            rows,
        })
        .collect()
}

/// Per-subject E-step quantities under `(mu, sigma)`.
struct EStep {
    /// Conditional expectation of the full score vector.
    y_hat: Vec<DVector<f64>>,
    /// Conditional covariance of the missing block, embedded in T×T, per pattern.
    cond_cov: Vec<DMatrix<f64>>,
    pattern_of: Vec<usize>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

fn e_step(
    data: &LongitudinalDataset,
    pats: &[Pattern],
    consts: &[HuberConstants],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<EStep> {
    let n = data.n();
    let t = data.occasions();
    let mut y_hat = vec![DVector::zeros(t); n];
    let mut pattern_of = vec![0; n];
    let mut w1 = vec![1.0; n];
    let mut w2 = vec![1.0; n];
    let mut cond_cov = Vec::with_capacity(pats.len());
    for (pi, p) in pats.iter().enumerate() {
        let s_oo = linalg::submatrix(sigma, &p.observed);
        let chol = linalg::cholesky(&s_oo)
            .ok_or_else(|| Error::Numerical("working covariance is singular on an observed pattern".into()))?;
        let s_mo = DMatrix::from_fn(p.missing.len(), p.observed.len(), |a, b| sigma[(p.missing[a], p.observed[b])]);
        // B = Σ_mo Σ_oo⁻¹
        let b = chol.solve(&s_mo.transpose()).transpose();
        let c_mm = linalg::submatrix(sigma, &p.missing) - &b * s_mo.transpose();
        let mut full = DMatrix::zeros(t, t);
        for (a, &ta) in p.missing.iter().enumerate() {
            for (bb, &tb) in p.missing.iter().enumerate() {
                full[(ta, tb)] = c_mm[(a, bb)];
            }
        }
        cond_cov.push(full);
        let c = consts[p.observed.len()];
        for &i in &p.rows {
            let r = DVector::from_fn(p.observed.len(), |a, _| data.y()[(i, p.observed[a])] - mu[p.observed[a]]);
            let d = r.dot(&chol.solve(&r)).max(0.0).sqrt();
            let w = huber_weight(d, &c);
            w1[i] = w;
            w2[i] = w * w / c.tau;
            let fill = &b * &r;
            let mut yh = mu.clone();
            for &ta in &p.observed {
                yh[ta] = data.y()[(i, ta)];
            }
            for (a, &ta) in p.missing.iter().enumerate() {
                yh[ta] = mu[ta] + fill[a];
            }
            y_hat[i] = yh;
            pattern_of[i] = pi;
        }
    }
    Ok(EStep { y_hat, cond_cov, pattern_of, w1, w2 })
}

fn available_start(data: &LongitudinalDataset) -> (DVector<f64>, DMatrix<f64>) {
    let t = data.occasions();
    let mut mu = DVector::zeros(t);
    let mut sigma = DMatrix::zeros(t, t);
    for j in 0..t {
        let col = data.observed_column(j);
        let m = col.iter().sum::<f64>() / col.len() as f64;
        mu[j] = m;
        sigma[(j, j)] = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
    }
    (mu, sigma)
}

/// Huber-weighted mean and covariance of incomplete data by reweighted EM.
///
/// Each subject's Mahalanobis distance `d` on its observed sub-vector gets
/// the weight `w1 = min(1, d₀/d)` with `d₀² = χ²_k(ρ)` for its `k` observed
/// scores; covariance contributions use `w1²/τ_k`. With `ρ = 1` every weight
/// is one and this is the normal-theory EM for the saturated model.
pub fn robust_moments(data: &LongitudinalDataset, tuning: &RobustTuning) -> Result<RobustMoments> {
    tuning.validate()?;
    let n = data.n();
    let t = data.occasions();
    let pats = patterns(data);
    let consts: Vec<HuberConstants> =
        (0..=t).map(|k| if k == 0 { HuberConstants { cutoff: 1.0, tau: 1.0 } } else { huber_constants(k, tuning.downweight_quantile) }).collect();
    let (mut mu, mut sigma) = available_start(data);

    if (0..t).all(|j| sigma[(j, j)] == 0.0) {
        if data.is_complete() {
            return Ok(RobustMoments {
                mean: mu,
                cov: DMatrix::zeros(t, t),
                weights: DVector::from_element(n, 1.0),
                iterations: 0,
                converged: true,
                degenerate: true,
            });
        }
        return Err(Error::Numerical("observed scores have zero variance; covariance is singular".into()));
    }
    if (0..t).any(|j| sigma[(j, j)] <= 0.0) {
        return Err(Error::Numerical("an occasion has zero observed variance".into()));
    }

    let max_iter = 2000;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_w1 = vec![1.0; n];
    for iter in 0..max_iter {
        iterations = iter + 1;
        let e = e_step(data, &pats, &consts, &mu, &sigma)?;
        let sw1: f64 = e.w1.iter().sum();
        let mut mu_new = DVector::zeros(t);
        for i in 0..n {
            mu_new += e.w1[i] * &e.y_hat[i];
        }
        mu_new /= sw1;
        let mut sigma_new = DMatrix::zeros(t, t);
        for i in 0..n {
            let r = &e.y_hat[i] - &mu_new;
            sigma_new += e.w2[i] * (&r * r.transpose() + &e.cond_cov[e.pattern_of[i]]);
        }
        sigma_new /= n as f64;
        linalg::symmetrize(&mut sigma_new);
        let dmu = (&mu_new - &mu).amax() / (1.0 + mu.amax());
        let dsig = (&sigma_new - &sigma).amax() / (1.0 + sigma.amax());
        mu = mu_new;
        sigma = sigma_new;
        last_w1 = e.w1;
        if dmu.max(dsig) < 1e-11 {
            converged = true;
            break;
        }
    }
    if linalg::cholesky(&sigma).is_none() {
        return Err(Error::Numerical("robust covariance estimate is singular".into()));
    }
    // Report the weights at the final estimates.
    if let Ok(e) = e_step(data, &pats, &consts, &mu, &sigma) {
        last_w1 = e.w1;
    }
    Ok(RobustMoments {
        mean: mu,
        cov: sigma,
        weights: DVector::from_vec(last_w1),
        iterations,
        converged,
        degenerate: false,
    })
}

fn pack(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
    let t = mu.len();
    let mut v = Vec::with_capacity(t + t * (t + 1) / 2);
    v.extend(mu.iter());
    for a in 0..t {
        for b in 0..=a {
            v.push(sigma[(a, b)]);
        }
    }
    DVector::from_vec(v)
}

fn unpack(v: &DVector<f64>, t: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mu = DVector::from_fn(t, |i, _| v[i]);
    let mut sigma = DMatrix::zeros(t, t);
    let mut k = t;
    for a in 0..t {
        for b in 0..=a {
            sigma[(a, b)] = v[k];
            sigma[(b, a)] = v[k];
            k += 1;
        }
    }
    (mu, sigma)
}

/// Per-subject stage-1 estimating functions at `(mu, sigma)`, stacked as
/// `(w1 (ŷ - μ), vech(w2 [(ŷ - μ)(ŷ - μ)' + C] - Σ))`. They sum to zero at
/// the robust estimates.
pub fn estimating_functions(
    data: &LongitudinalDataset,
    tuning: &RobustTuning,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<Vec<DVector<f64>>> {
    let t = data.occasions();
    let pats = patterns(data);
    let consts: Vec<HuberConstants> =
        (0..=t).map(|k| if k == 0 { HuberConstants { cutoff: 1.0, tau: 1.0 } } else { huber_constants(k, tuning.downweight_quantile) }).collect();
    let e = e_step(data, &pats, &consts, mu, sigma)?;
    Ok((0..data.n())
        .map(|i| {
            let r = &e.y_hat[i] - mu;
            let m = e.w2[i] * (&r * r.transpose() + &e.cond_cov[e.pattern_of[i]]) - sigma;
            pack(&(e.w1[i] * r), &m)
        })
        .collect())
}

/// Normal-theory discrepancy
/// `tr(Σ̂Σ⁻¹) - ln|Σ̂Σ⁻¹| - T + (μ̂ - μ)'Σ⁻¹(μ̂ - μ)` between saturated
/// moments and the model implied by `theta`.
pub fn ml_discrepancy(mu_hat: &DVector<f64>, sigma_hat: &DMatrix<f64>, theta: &Theta, loadings: &DMatrix<f64>) -> Result<f64> {
    let (mu, sigma) = theta.moments(loadings);
    let chol = linalg::cholesky(&sigma).ok_or_else(|| Error::Numerical("implied covariance is not PD".into()))?;
    let inv = chol.inverse();
    let prod = &inv * sigma_hat;
    let det_hat = sigma_hat.determinant();
    if !(det_hat > 0.0) {
        return Err(Error::Numerical("saturated covariance is not PD".into()));
    }
    let log_det = det_hat.ln() - linalg::log_det_from_cholesky(&chol);
    let d = mu_hat - mu;
    Ok(prod.trace() - log_det - mu_hat.len() as f64 + d.dot(&(&inv * &d)))
}

/// Stage 2 alone: fit the growth model to given saturated moments.
pub fn fit_tsre_moments(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    shape: &GcmSpec,
    opts: &FitOptions,
) -> Result<(Theta, bool, bool, usize)> {
    let loadings = check_shape(shape, mean.len())?;
    let objective = MomentObjective::from_moments(mean, cov, n as f64, &loadings);
    let start = moment_start(mean, cov, &loadings);
    let mut starts = vec![start];
    if opts.multi_start {
        starts.push(Theta::from_spec(&GcmSpec::population())?);
    }
    let fit = minimize(&objective, &starts, opts)?;
    Ok((fit.theta, fit.converged, fit.boundary, fit.iterations))
}

fn moment_start(mean: &DVector<f64>, cov: &DMatrix<f64>, loadings: &DMatrix<f64>) -> Theta {
    let y = DMatrix::from_fn(1, mean.len(), |_, j| mean[j]);
    let d = LongitudinalDataset::complete(y).expect("one complete row");
    let mut start = super::sample_moment_start(&d, loadings);
    // Replace the covariance part with least squares on the given covariance.
    let t = mean.len();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for a in 0..t {
        for b in 0..=a {
            let (a0, a1, b0, b1) = (loadings[(a, 0)], loadings[(a, 1)], loadings[(b, 0)], loadings[(b, 1)]);
            rows.push([a0 * b0, a1 * b1, a0 * b1 + a1 * b0, if a == b { 1.0 } else { 0.0 }]);
            rhs.push(cov[(a, b)]);
        }
    }
    let x = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
    let scale = (cov.trace() / t as f64).max(1e-8);
    if let Some(inv) = (x.transpose() * &x).try_inverse() {
        let sol = inv * x.transpose() * DVector::from_vec(rhs);
        let slope_scale = scale / ((t - 1) as f64).powi(2);
        start.var_l = sol[0].max(0.05 * scale);
        start.var_s = sol[1].max(0.05 * slope_scale);
        start.var_e = sol[3].max(0.05 * scale);
        let limit = 0.5 * (start.var_l * start.var_s).sqrt();
        start.cov_ls = sol[2].clamp(-limit, limit);
    }
    start
}

/// Two-stage robust estimation of the growth model.
pub fn fit_tsre(data: &LongitudinalDataset, shape: &GcmSpec, tuning: &RobustTuning, opts: &FitOptions) -> Result<FitResult> {
    let loadings = check_shape(shape, data.occasions())?;
    if data.n() <= 3 {
        return Err(Error::Data(format!("need more than 3 subjects to fit the growth model, got {}", data.n())));
    }
    let stage1 = robust_moments(data, tuning)?;
    if stage1.degenerate {
        return Err(Error::Numerical("robust covariance is degenerate (all rows identical)".into()));
    }
    let (theta, converged, boundary, iterations) =
        fit_tsre_moments(&stage1.mean, &stage1.cov, data.n(), shape, opts)?;
    let se = if opts.compute_se {
        se_from_covariance(sandwich_covariance(data, tuning, &stage1, &theta, &loadings))
    } else {
        Theta::from_array([f64::NAN; 6])
    };
    Ok(FitResult {
        method: "tsre".into(),
        theta,
        se,
        loglik: None,
        converged: converged && stage1.converged,
        boundary,
        iterations,
    })
}

/// `J Γ J' / N` with `Γ = A⁻¹ B A⁻ᵀ` from the stage-1 estimating equations and
/// `J = -H_θθ⁻¹ H_θγ` the derivative of the stage-2 solution in the moments.
fn sandwich_covariance(
    data: &LongitudinalDataset,
    tuning: &RobustTuning,
    stage1: &RobustMoments,
    theta: &Theta,
    loadings: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = data.n() as f64;
    let t = data.occasions();
    let gamma = pack(&stage1.mean, &stage1.cov);
    let dim = gamma.len();

    let mean_ef = |g: &DVector<f64>| -> Option<DVector<f64>> {
        let (mu, sigma) = unpack(g, t);
        let efs = estimating_functions(data, tuning, &mu, &sigma).ok()?;
        Some(efs.iter().fold(DVector::zeros(dim), |acc, e| acc + e) / n)
    };
    let a = optimize::jacobian_fd(mean_ef, &gamma, 1e-6)?;
    let efs = estimating_functions(data, tuning, &stage1.mean, &stage1.cov).ok()?;
    let b = efs.iter().fold(DMatrix::zeros(dim, dim), |acc, e| acc + e * e.transpose()) / n;
    let a_inv = a.try_inverse()?;
    let gamma_cov = &a_inv * b * a_inv.transpose();

    let grad_at = |th: &Theta, g: &DVector<f64>| -> Option<DVector<f64>> {
        let (mu, sigma) = unpack(g, t);
        let obj = MomentObjective::from_moments(&mu, &sigma, n, loadings);
        obj.value_and_gradient(th).ok().map(|(_, gr)| DVector::from_row_slice(&gr))
    };
    let x = DVector::from_row_slice(&theta.to_array());
    let h_tt = optimize::jacobian_fd(|p| grad_at(&Theta::from_slice(p.as_slice()), &gamma), &x, 1e-5)?;
    let h_tg = optimize::jacobian_fd(|g| grad_at(theta, g), &gamma, 1e-6)?;
    let j = -(h_tt.try_inverse()? * h_tg);
    let mut cov = &j * gamma_cov * j.transpose() / n;
    linalg::symmetrize(&mut cov);
    Some(cov)
}
