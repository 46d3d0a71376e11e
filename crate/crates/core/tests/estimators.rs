use longmiss::analysis::relative_bias;
use longmiss::estimators::{fit_fiml, fit_tsre, FitOptions, RobustTuning, Theta};
use longmiss::missingness::apply_mar;
use longmiss::model::generate_cohort;
use longmiss::{ErrorDistribution, ErrorKind, GcmSpec};

fn fits(spec: &GcmSpec, n: usize, reps: u64, mr: f64) -> Vec<Theta> {
    let shape = GcmSpec::linear_shape(4).unwrap();
    let opts = FitOptions { compute_se: false, ..FitOptions::default() };
    (0..reps)
        .map(|r| {
            let data = generate_cohort(spec, &ErrorDistribution::new(ErrorKind::Normal), n, 1000 + r).unwrap();
            let data = if mr > 0.0 { apply_mar(&data, mr).unwrap() } else { data };
            let fit = fit_fiml(&data, &shape, &opts).unwrap();
            assert!(fit.converged);
            fit.theta
        })
        .collect()
}

#[test]
fn fiml_recovers_the_population_at_n_5000() {
    let truth = Theta::from_spec(&GcmSpec::population()).unwrap();
    let est = fits(&GcmSpec::population(), 5000, 100, 0.0);
    for k in 0..6 {
        let xs: Vec<f64> = est.iter().map(|t| t.get(k)).collect();
        let rb = relative_bias(&xs, truth.get(k));
        if truth.get(k) == 0.0 {
            assert!(rb.abs() < 0.1, "parameter {k}: raw bias {rb}");
        } else {
            assert!(rb.abs() < 10.0, "parameter {k}: RB {rb}%");
        }
    }
    let slopes: Vec<f64> = est.iter().map(|t| t.beta_s).collect();
    assert!(relative_bias(&slopes, 2.0).abs() < 2.0);
}

#[test]
fn zero_covariance_is_estimated_without_bias() {
    let est = fits(&GcmSpec::population(), 500, 100, 0.0);
    let mean = est.iter().map(|t| t.cov_ls).sum::<f64>() / est.len() as f64;
    assert!(mean.abs() < 0.05, "{mean}");
}

#[test]
fn fiml_slope_variance_under_heavy_mar() {
    let est = fits(&GcmSpec::population(), 500, 100, 0.30);
    let vs: Vec<f64> = est.iter().map(|t| t.var_s).collect();
    assert!(relative_bias(&vs, 1.0).abs() < 10.0);
}

#[test]
fn tsre_resists_contamination_better_than_fiml() {
    let shape = GcmSpec::linear_shape(4).unwrap();
    let opts = FitOptions { compute_se: false, ..FitOptions::default() };
    let dist = ErrorDistribution::new(ErrorKind::ContaminatedNormal);
    let (mut f, mut r) = (0.0, 0.0);
    for rep in 0..20 {
        let data = apply_mar(&generate_cohort(&GcmSpec::population(), &dist, 500, 50 + rep).unwrap(), 0.15).unwrap();
        f += (fit_fiml(&data, &shape, &opts).unwrap().theta.var_e - 1.0).powi(2);
        r += (fit_tsre(&data, &shape, &RobustTuning::huber(0.95), &opts).unwrap().theta.var_e - 1.0).powi(2);
    }
    assert!(r < f, "tsre {r} vs fiml {f}");
}
