//! Growth curve estimation from incomplete data: full-information maximum
//! likelihood ([`fit_fiml`]) and two-stage robust estimation ([`fit_tsre`]).

mod fiml;
pub mod optimize;
pub mod param;
mod robust;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use fiml::{fit_fiml, negloglik_fiml, sample_moment_start, MomentObjective, PatternStats};
pub use param::Parameterization;
pub use robust::{
    estimating_functions, fit_tsre, fit_tsre_moments, ml_discrepancy, robust_moments, RobustMoments, RobustTuning,
};

use crate::error::{Error, Result};
use crate::model::GcmSpec;

/// Parameters of the linear growth curve model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta_l: f64,
    pub beta_s: f64,
    pub var_l: f64,
    pub var_s: f64,
    pub cov_ls: f64,
    pub var_e: f64,
}

impl Theta {
    pub const NAMES: [&'static str; 6] = ["beta_l", "beta_s", "var_l", "var_s", "cov_ls", "var_e"];

    pub fn to_array(&self) -> [f64; 6] {
        [self.beta_l, self.beta_s, self.var_l, self.var_s, self.cov_ls, self.var_e]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Theta { beta_l: a[0], beta_s: a[1], var_l: a[2], var_s: a[3], cov_ls: a[4], var_e: a[5] }
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Theta::from_array([a[0], a[1], a[2], a[3], a[4], a[5]])
    }

    /// Parameters of a linear (q = 2) generating spec.
    pub fn from_spec(spec: &GcmSpec) -> Result<Self> {
        if spec.factors() != 2 {
            return Err(Error::Spec(format!("expected a linear model with 2 factors, got {}", spec.factors())));
        }
        Ok(Theta {
            beta_l: spec.beta[0],
            beta_s: spec.beta[1],
            var_l: spec.psi[(0, 0)],
            var_s: spec.psi[(1, 1)],
            cov_ls: spec.psi[(0, 1)],
            var_e: spec.sigma2_e,
        })
    }

    pub fn get(&self, k: usize) -> f64 {
        self.to_array()[k]
    }

    /// `(Λβ, ΛΨΛ' + σ_e² I)` for T×2 loadings.
    pub fn moments(&self, loadings: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let t = loadings.nrows();
        let mu = DVector::from_fn(t, |i, _| loadings[(i, 0)] * self.beta_l + loadings[(i, 1)] * self.beta_s);
        let sigma = DMatrix::from_fn(t, t, |i, j| {
            let (a0, a1, b0, b1) = (loadings[(i, 0)], loadings[(i, 1)], loadings[(j, 0)], loadings[(j, 1)]);
            a0 * b0 * self.var_l
                + a1 * b1 * self.var_s
                + (a0 * b1 + a1 * b0) * self.cov_ls
                + if i == j { self.var_e } else { 0.0 }
        });
        (mu, sigma)
    }

    /// Ψ is PSD and σ_e² positive.
    pub fn is_admissible(&self) -> bool {
        self.var_l >= 0.0
            && self.var_s >= 0.0
            && self.var_e > 0.0
            && self.cov_ls * self.cov_ls <= self.var_l * self.var_s * (1.0 + 1e-9)
    }
}

/// Outcome of a growth-model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub theta: Theta,
    /// Standard errors; `NaN` (serialized as `null`) when unavailable.
    #[serde(deserialize_with = "de_theta_nullable")]
    pub se: Theta,
    /// Maximized log-likelihood (FIML only).
    pub loglik: Option<f64>,
    pub converged: bool,
    /// A variance hit the floor or Ψ became singular at the solution.
    pub boundary: bool,
    #[serde(skip)]
    pub iterations: usize,
}

fn de_theta_nullable<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Theta, D::Error> {
    #[derive(Deserialize)]
    struct Raw {
        beta_l: Option<f64>,
        beta_s: Option<f64>,
        var_l: Option<f64>,
        var_s: Option<f64>,
        cov_ls: Option<f64>,
        var_e: Option<f64>,
    }
    let r = Raw::deserialize(d)?;
    let f = |v: Option<f64>| v.unwrap_or(f64::NAN);
    Ok(Theta {
        beta_l: f(r.beta_l),
        beta_s: f(r.beta_s),
        var_l: f(r.var_l),
        var_s: f(r.var_s),
        cov_ls: f(r.cov_ls),
        var_e: f(r.var_e),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub parameterization: Parameterization,
    pub optim: optimize::OptimOptions,
    pub compute_se: bool,
    /// Also start from the population values (β = (6, 2), Ψ = I, σ_e² = 1).
    pub multi_start: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            parameterization: Parameterization::LogCholesky,
            optim: optimize::OptimOptions::default(),
            compute_se: true,
            multi_start: true,
        }
    }
}

pub(crate) struct ObjectiveFit {
    pub theta: Theta,
    pub value: f64,
    pub grad_working: [f64; 6],
    pub converged: bool,
    pub iterations: usize,
    pub boundary: bool,
}

/// Minimizes a moment objective over the working parameterization from
/// each start and keeps the lowest value.
pub(crate) fn minimize(objective: &MomentObjective, starts: &[Theta], opts: &FitOptions) -> Result<ObjectiveFit> {
    let p = opts.parameterization;
    let eval = |x: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        let phi: [f64; 6] = std::array::from_fn(|k| x[k]);
        let theta = p.to_theta(&phi);
        let (f, g) = objective.value_and_gradient(&theta).ok()?;
        let gw = p.pull_back(&phi, &g);
        Some((f, DVector::from_row_slice(&gw)))
    };
    let mut best: Option<optimize::OptimOutcome> = None;
    for start in starts {
        let x0 = DVector::from_row_slice(&p.from_theta(start));
        let Some(out) = optimize::bfgs(eval, x0, &opts.optim) else {
            continue;
        };
        let out = optimize::newton_refine(eval, out, 20);
        if best.as_ref().is_none_or(|b| out.f < b.f) {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("objective is not finite at any starting value".into()))?;
    let phi: [f64; 6] = std::array::from_fn(|k| best.x[k]);
    let theta = p.to_theta(&phi);
    let grad_working: [f64; 6] = std::array::from_fn(|k| best.grad[k]);
    let converged = best.converged || best.grad.amax() < 1e-5;
    Ok(ObjectiveFit {
        theta,
        value: best.f,
        grad_working,
        converged,
        iterations: best.iterations,
        boundary: is_boundary(&theta),
    })
}

fn is_boundary(theta: &Theta) -> bool {
    let floor = 1e-6;
    theta.var_l < floor
        || theta.var_s < floor
        || theta.var_e < floor
        || theta.cov_ls * theta.cov_ls >= (1.0 - 1e-6) * theta.var_l * theta.var_s
}

pub(crate) fn check_shape(shape: &GcmSpec, occasions: usize) -> Result<DMatrix<f64>> {
    if shape.factors() != 2 {
        return Err(Error::Spec("estimators support the linear growth model (2 factors)".into()));
    }
    if shape.occasions() != occasions {
        return Err(Error::Data(format!(
            "model has {} occasions but data has {}",
            shape.occasions(),
            occasions
        )));
    }
    Ok(shape.loadings.clone())
}

/// Standard errors from the inverse of a 6×6 information matrix.
pub(crate) fn se_from_covariance(cov: Option<DMatrix<f64>>) -> Theta {
    match cov {
        Some(c) => Theta::from_array(std::array::from_fn(|k| {
            let v = c[(k, k)];
            if v >= 0.0 {
                v.sqrt()
            } else {
                f64::NAN
            }
        })),
        None => Theta::from_array([f64::NAN; 6]),
    }
}
