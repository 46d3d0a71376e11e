//! Unconstrained working parameterizations of the linear growth model.
//!
//! Both keep Ψ positive semi-definite and σ_e² positive for every real
//! vector, so the optimizer never leaves the admissible region.

use serde::{Deserialize, Serialize};

use super::Theta;

/// Variance floor on the working scale.
pub const VARIANCE_FLOOR: f64 = 1e-10;

const LOG_SD_MIN: f64 = -11.512925464970229; // 0.5 * ln(1e-10)
const LOG_SD_MAX: f64 = 50.0;
const ATANH_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `(β_L, β_S, log L11, L21, log L22, log σ_e²)` with `Ψ = L L'`.
    #[default]
    LogCholesky,
    /// `(β_L, β_S, log σ_L², log σ_S², atanh ρ_LS, log σ_e²)`.
    LogVariance,
}

fn clamp_log_sd(a: f64) -> (f64, f64) {
    // value and derivative of the clamp
    if a < LOG_SD_MIN {
        (LOG_SD_MIN, 0.0)
    } else if a > LOG_SD_MAX {
        (LOG_SD_MAX, 0.0)
    } else {
        (a, 1.0)
    }
}

impl Parameterization {
    pub fn to_theta(self, phi: &[f64; 6]) -> Theta {
        let (var_e_log, _) = clamp_log_sd(0.5 * phi[5]);
        let var_e = (2.0 * var_e_log).exp();
        match self {
            Parameterization::LogCholesky => {
                let (a1, _) = clamp_log_sd(phi[2]);
                let (a2, _) = clamp_log_sd(phi[4]);
                let l11 = a1.exp();
                let l21 = phi[3];
                let l22 = a2.exp();
                Theta {
                    beta_l: phi[0],
                    beta_s: phi[1],
                    var_l: l11 * l11,
                    var_s: l21 * l21 + l22 * l22,
                    cov_ls: l11 * l21,
                    var_e,
                }
            }
            Parameterization::LogVariance => {
                let (h1, _) = clamp_log_sd(0.5 * phi[2]);
                let (h2, _) = clamp_log_sd(0.5 * phi[3]);
                let z = phi[4].clamp(-ATANH_MAX, ATANH_MAX);
                let (v1, v2) = ((2.0 * h1).exp(), (2.0 * h2).exp());
                Theta {
                    beta_l: phi[0],
                    beta_s: phi[1],
                    var_l: v1,
                    var_s: v2,
                    cov_ls: z.tanh() * (v1 * v2).sqrt(),
                    var_e,
                }
            }
        }
    }

    /// Chain rule: gradient with respect to the working vector from the
    /// gradient with respect to the natural parameters.
    pub fn pull_back(self, phi: &[f64; 6], grad_theta: &[f64; 6]) -> [f64; 6] {
        let t = self.to_theta(phi);
        let (_, de) = clamp_log_sd(0.5 * phi[5]);
        let mut g = [0.0; 6];
        g[0] = grad_theta[0];
        g[1] = grad_theta[1];
        g[5] = grad_theta[5] * t.var_e * de;
        match self {
            Parameterization::LogCholesky => {
                let (a1, d1) = clamp_log_sd(phi[2]);
                let (a2, d2) = clamp_log_sd(phi[4]);
                let l11 = a1.exp();
                let l21 = phi[3];
                let l22 = a2.exp();
                // var_l = l11², cov = l11 l21, var_s = l21² + l22²
                g[2] = d1 * (grad_theta[2] * 2.0 * l11 * l11 + grad_theta[4] * l11 * l21);
                g[3] = grad_theta[3] * 2.0 * l21 + grad_theta[4] * l11;
                g[4] = d2 * grad_theta[3] * 2.0 * l22 * l22;
            }
            Parameterization::LogVariance => {
                let (_, d1) = clamp_log_sd(0.5 * phi[2]);
                let (_, d2) = clamp_log_sd(0.5 * phi[3]);
                let zc = phi[4].clamp(-ATANH_MAX, ATANH_MAX);
                let dz = if phi[4].abs() > ATANH_MAX { 0.0 } else { 1.0 };
                let th = zc.tanh();
                g[2] = d1 * (grad_theta[2] * t.var_l + grad_theta[4] * 0.5 * t.cov_ls);
                g[3] = d2 * (grad_theta[3] * t.var_s + grad_theta[4] * 0.5 * t.cov_ls);
                g[4] = dz * grad_theta[4] * (1.0 - th * th) * (t.var_l * t.var_s).sqrt();
            }
        }
        g
    }

    /// Working vector for an admissible `theta`; near-boundary values are
    /// pulled inside so that the map is defined.
    pub fn from_theta(self, theta: &Theta) -> [f64; 6] {
        let var_l = theta.var_l.max(1e-8);
        let var_s = theta.var_s.max(1e-8);
        let limit = 0.99 * (var_l * var_s).sqrt();
        let cov = theta.cov_ls.clamp(-limit, limit);
        let log_var_e = theta.var_e.max(1e-8).ln();
        match self {
            Parameterization::LogCholesky => {
                let l11 = var_l.sqrt();
                let l21 = cov / l11;
                let l22 = (var_s - l21 * l21).max(1e-12).sqrt();
                [theta.beta_l, theta.beta_s, l11.ln(), l21, l22.ln(), log_var_e]
            }
            Parameterization::LogVariance => {
                let rho = cov / (var_l * var_s).sqrt();
                [theta.beta_l, theta.beta_s, var_l.ln(), var_s.ln(), rho.atanh(), log_var_e]
            }
        }
    }
}
