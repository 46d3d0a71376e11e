//! The unconditional linear growth curve model.
//!
//! `y_i = Λ b_i + e_i`, `b_i = β + u_i`, with `u_i ~ N(0, Ψ)` and
//! independent errors of common variance `σ_e²`. Only the error
//! distribution is varied; random effects are always normal.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::dataset::{LongitudinalDataset, Truth};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct GcmSpec {
    /// T×q factor loadings.
    pub loadings: DMatrix<f64>,
    /// Fixed effects, length q.
    pub beta: DVector<f64>,
    /// q×q random-effect covariance.
    pub psi: DMatrix<f64>,
    pub sigma2_e: f64,
}

impl GcmSpec {
    /// Linear model over `occasions` with slope loadings `0, 1, ..., T-1`.
    pub fn linear(
        occasions: usize,
        beta: [f64; 2],
        var_l: f64,
        var_s: f64,
        cov_ls: f64,
        sigma2_e: f64,
    ) -> Result<Self> {
        let spec = GcmSpec {
            loadings: linear_loadings(occasions),
            beta: DVector::from_column_slice(&beta),
            psi: DMatrix::from_row_slice(2, 2, &[var_l, cov_ls, cov_ls, var_s]),
            sigma2_e,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The population model of the simulation study: four occasions,
    /// β = (6, 2), σ_L² = σ_S² = σ_e² = 1 and σ_LS = 0.
    pub fn population() -> Self {
        GcmSpec::linear(4, [6.0, 2.0], 1.0, 1.0, 0.0, 1.0).expect("population spec is valid")
    }

    /// Linear shape with `occasions` measurements, used where only Λ matters.
    pub fn linear_shape(occasions: usize) -> Result<Self> {
        GcmSpec::linear(occasions, [0.0, 0.0], 1.0, 1.0, 0.0, 1.0)
    }

    pub fn occasions(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.occasions();
        let q = self.factors();
        if t < 2 {
            return Err(Error::Spec(format!("need at least 2 occasions, got {t}")));
        }
        if q == 0 || self.beta.len() != q || self.psi.nrows() != q || self.psi.ncols() != q {
            return Err(Error::Spec(format!(
                "dimension mismatch: loadings {}x{}, beta {}, psi {}x{}",
                t,
                q,
                self.beta.len(),
                self.psi.nrows(),
                self.psi.ncols()
            )));
        }
        if !(self.sigma2_e > 0.0) || !self.sigma2_e.is_finite() {
            return Err(Error::Spec(format!("error variance must be positive, got {}", self.sigma2_e)));
        }
        if !linalg::is_psd(&self.psi) {
            return Err(Error::Spec("random-effect covariance is not symmetric PSD".into()));
        }
        let rank = self.loadings.clone().svd(false, false).rank(1e-10 * self.loadings.amax().max(1.0));
        if rank < q {
            return Err(Error::Spec("loading matrix does not have full column rank".into()));
        }
        Ok(())
    }

    /// Model-implied mean `Λβ` and covariance `ΛΨΛ' + σ_e² I`.
    pub fn implied_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.validate()?;
        let mu = &self.loadings * &self.beta;
        let mut sigma = &self.loadings * &self.psi * self.loadings.transpose();
        for i in 0..sigma.nrows() {
            sigma[(i, i)] += self.sigma2_e;
        }
        linalg::symmetrize(&mut sigma);
        Ok((mu, sigma))
    }
}

pub fn linear_loadings(occasions: usize) -> DMatrix<f64> {
    DMatrix::from_fn(occasions, 2, |t, j| if j == 0 { 1.0 } else { t as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Normal,
    Lognormal,
    #[serde(rename = "t5")]
    StudentT5,
    #[serde(rename = "contaminated")]
    ContaminatedNormal,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 4] =
        [ErrorKind::Normal, ErrorKind::Lognormal, ErrorKind::StudentT5, ErrorKind::ContaminatedNormal];

    pub fn label(self) -> &'static str {
        match self {
            ErrorKind::Normal => "normal",
            ErrorKind::Lognormal => "lognormal",
            ErrorKind::StudentT5 => "t5",
            ErrorKind::ContaminatedNormal => "contaminated",
        }
    }
}

impl std::fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub kind: ErrorKind,
    /// Outlier probability per error cell (contaminated normal only).
    pub contamination_rate: f64,
    /// Mean of the outlier component (contaminated normal only).
    pub shift: f64,
}

impl ErrorDistribution {
    pub fn new(kind: ErrorKind) -> Self {
        ErrorDistribution { kind, contamination_rate: 0.05, shift: 5.0 }
    }
}

impl From<ErrorKind> for ErrorDistribution {
    fn from(kind: ErrorKind) -> Self {
        ErrorDistribution::new(kind)
    }
}

/// One measurement error with scale `σ_e`.
///
/// Lognormal and t(5) draws are centered and scaled to mean 0 and variance
/// `σ_e²`. Contaminated-normal cells are `N(shift, σ_e²)` with probability
/// `contamination_rate` and `N(0, σ_e²)` otherwise, so their mean is
/// `rate · shift`.
pub fn draw_error<R: Rng + ?Sized>(dist: &ErrorDistribution, sigma2_e: f64, rng: &mut R) -> f64 {
    let sd = sigma2_e.sqrt();
    match dist.kind {
        ErrorKind::Normal => {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        }
        ErrorKind::Lognormal => {
            let x = LogNormal::new(0.0, 1.0).expect("valid lognormal").sample(rng);
            let e = std::f64::consts::E;
            sd * (x - e.sqrt()) / ((e - 1.0) * e).sqrt()
        }
        ErrorKind::StudentT5 => {
            let x = StudentT::new(5.0).expect("valid t").sample(rng);
            sd * x * (3.0_f64 / 5.0).sqrt()
        }
        ErrorKind::ContaminatedNormal => {
            let outlier = rng.random::<f64>() < dist.contamination_rate;
            let z: f64 = StandardNormal.sample(rng);
            if outlier {
                dist.shift + sd * z
            } else {
                sd * z
            }
        }
    }
}

/// Fully observed cohort of `n` subjects, reproducible from `seed`.
pub fn generate_cohort(
    spec: &GcmSpec,
    dist: &ErrorDistribution,
    n: usize,
    seed: u64,
) -> Result<LongitudinalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_cohort_with(spec, dist, n, &mut rng)
}

pub fn generate_cohort_with<R: Rng + ?Sized>(
    spec: &GcmSpec,
    dist: &ErrorDistribution,
    n: usize,
    rng: &mut R,
) -> Result<LongitudinalDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("cohort size must be at least 1".into()));
    }
    let t = spec.occasions();
    let q = spec.factors();
    let factor = linalg::psd_factor(&spec.psi);
    let mut effects = DMatrix::zeros(n, q);
    let mut y = DMatrix::zeros(n, t);
    let mut z = DVector::zeros(q);
    for i in 0..n {
        for k in 0..q {
            z[k] = StandardNormal.sample(rng);
        }
        let b = &spec.beta + &factor * &z;
        for k in 0..q {
            effects[(i, k)] = b[k];
        }
        for occ in 0..t {
            let mean: f64 = (0..q).map(|k| spec.loadings[(occ, k)] * b[k]).sum();
            y[(i, occ)] = mean + draw_error(dist, spec.sigma2_e, rng);
        }
    }
    let mut data = LongitudinalDataset::complete(y)?;
    data.set_truth(Truth { random_effects: effects, spec: spec.clone(), distribution: *dist });
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn implied_moments_of_population_spec() {
        let (mu, sigma) = GcmSpec::population().implied_moments().unwrap();
        assert_eq!(mu.as_slice(), &[6.0, 8.0, 10.0, 12.0]);
        let diag: Vec<f64> = (0..4).map(|i| sigma[(i, i)]).collect();
        assert_eq!(diag, vec![2.0, 3.0, 6.0, 11.0]);
        assert!(linalg::cholesky(&sigma).is_some());
    }

    #[test]
    fn zero_slope_variance_gives_compound_symmetry() {
        let spec = GcmSpec::linear(5, [1.0, 0.5], 2.0, 0.0, 0.0, 0.7).unwrap();
        let (_, sigma) = spec.implied_moments().unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expected = 2.0 + if i == j { 0.7 } else { 0.0 };
                assert_relative_eq!(sigma[(i, j)], expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(GcmSpec::linear(4, [0.0, 0.0], 1.0, 1.0, 2.0, 1.0), Err(Error::Spec(_))));
        assert!(matches!(GcmSpec::linear(4, [0.0, 0.0], 1.0, 1.0, 0.0, 0.0), Err(Error::Spec(_))));
        assert!(matches!(GcmSpec::linear(1, [0.0, 0.0], 1.0, 1.0, 0.0, 1.0), Err(Error::Spec(_))));
        let mut spec = GcmSpec::population();
        spec.psi[(0, 1)] = 0.3;
        assert!(spec.implied_moments().is_err());
    }

    #[test]
    fn degenerate_noise_reproduces_the_mean() {
        let spec = GcmSpec::linear(4, [6.0, 2.0], 0.0, 0.0, 0.0, 1e-24).unwrap();
        for kind in ErrorKind::ALL {
            let mut dist = ErrorDistribution::new(kind);
            dist.contamination_rate = 0.0;
            let data = generate_cohort(&spec, &dist, 50, 3).unwrap();
            for i in 0..50 {
                for t in 0..4 {
                    assert!((data.value(i, t).unwrap() - (6.0 + 2.0 * t as f64)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cohort_is_reproducible() {
        let spec = GcmSpec::population();
        let dist = ErrorDistribution::new(ErrorKind::StudentT5);
        let a = generate_cohort(&spec, &dist, 200, 42).unwrap();
        let b = generate_cohort(&spec, &dist, 200, 42).unwrap();
        let c = generate_cohort(&spec, &dist, 200, 43).unwrap();
        assert!(a.y().iter().zip(b.y().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.y(), c.y());
        assert_eq!(a.truth().unwrap().random_effects.nrows(), 200);
    }

    fn moments(draws: &[f64]) -> (f64, f64, f64) {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let skew = draws.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n / var.powf(1.5);
        (mean, var, skew)
    }

    fn draws(kind: ErrorKind, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = ErrorDistribution::new(kind);
        (0..n).map(|_| draw_error(&dist, 1.0, &mut rng)).collect()
    }

    #[test]
    fn normal_errors_are_symmetric() {
        let (mean, var, skew) = moments(&draws(ErrorKind::Normal, 1_000_000, 1));
        assert!(mean.abs() < 0.005);
        assert!((var - 1.0).abs() < 0.01);
        assert!(skew.abs() < 0.01, "skewness {skew}");
    }

    #[test]
    fn lognormal_errors_are_standardized_and_skewed() {
        // closed form: (e^{s2} + 2) sqrt(e^{s2} - 1) at s2 = 1
        let e = std::f64::consts::E;
        let analytic = (e + 2.0) * (e - 1.0).sqrt();
        assert_relative_eq!(analytic, 6.1849, epsilon = 1e-4);
        let (mean, var, skew) = moments(&draws(ErrorKind::Lognormal, 1_000_000, 2));
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.05);
        // sample skewness of LN converges slowly; a loose band around 6.18
        assert!(skew > 4.5 && skew < 7.5, "skewness {skew}");
    }

    #[test]
    fn t5_errors_have_unit_variance() {
        let (mean, var, _) = moments(&draws(ErrorKind::StudentT5, 1_000_000, 3));
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn contaminated_errors_have_mixture_mean() {
        let (mean, var, _) = moments(&draws(ErrorKind::ContaminatedNormal, 1_000_000, 4));
        assert!((mean - 0.25).abs() < 0.01, "mean {mean}");
        // 1 + 0.05 * 0.95 * 25
        assert!((var - 2.1875).abs() < 0.03, "variance {var}");
    }
}
