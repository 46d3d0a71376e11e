//! BFGS with backtracking line search, plus a Newton refinement step driven
//! by a finite-difference Hessian of the analytic gradient.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop when the largest gradient component falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step changes the objective by less than this
    /// fraction of `max(|f|, 1)`.
    pub rel_f_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions { max_iter: 500, grad_tol: 1e-6, rel_f_tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `None` from the objective marks an inadmissible point (barrier).
pub fn bfgs<F>(mut objective: F, x0: DVector<f64>, opts: &OptimOptions) -> Option<OptimOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (mut f, mut g) = objective(&x0)?;
    if !f.is_finite() {
        return None;
    }
    let mut x = x0;
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    for iter in 0..opts.max_iter {
        if g.amax() < opts.grad_tol {
            return Some(OptimOutcome { x, f, grad: g, iterations: iter, converged: true });
        }
        let mut dir = -(&h_inv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = if first { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + step * &dir;
            if let Some((ft, gt)) = objective(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No decrease along the direction: retry once from steepest descent.
            if h_inv != DMatrix::identity(n, n) {
                h_inv = DMatrix::identity(n, n);
                first = true;
                continue;
            }
            let converged = g.amax() < opts.grad_tol;
            return Some(OptimOutcome { x, f, grad: g, iterations: iter, converged });
        };
        first = false;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if iter == 0 {
                // Scale the initial inverse Hessian before the first update.
                let scale = sy / y.dot(&y);
                h_inv = DMatrix::identity(n, n) * scale;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        let df = (f - f_new).abs();
        x = x_new;
        f = f_new;
        g = g_new;
        if df <= opts.rel_f_tol * f.abs().max(1.0) {
            return Some(OptimOutcome { x, f, grad: g, iterations: iter + 1, converged: true });
        }
    }
    let converged = g.amax() < opts.grad_tol;
    Some(OptimOutcome { x, f, grad: g, iterations: opts.max_iter, converged })
}

/// Central-difference Jacobian of a vector-valued map (rows: outputs).
pub fn jacobian_fd<F>(mut map: F, x: &DVector<f64>, rel_step: f64) -> Option<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = rel_step * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let gp = map(&xp)?;
        let gm = map(&xm)?;
        cols.push((gp - gm) / (2.0 * h));
    }
    Some(DMatrix::from_columns(&cols))
}

/// Newton iterations with step halving from a point close to the optimum.
/// Returns the improved point, or the input when the Hessian is not usable.
pub fn newton_refine<F>(mut objective: F, start: OptimOutcome, max_steps: usize) -> OptimOutcome
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut best = start;
    for _ in 0..max_steps {
        if best.grad.amax() < 1e-10 * best.f.abs().max(1.0) {
            break;
        }
        let Some(mut hess) = jacobian_fd(|p| objective(p).map(|(_, g)| g), &best.x, 1e-6) else {
            break;
        };
        crate::linalg::symmetrize(&mut hess);
        let Some(chol) = crate::linalg::cholesky(&hess) else {
            break;
        };
        let dir = -chol.solve(&best.grad);
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial = &best.x + step * &dir;
            if let Some((ft, gt)) = objective(&trial) {
                if ft.is_finite() && (ft < best.f || (ft <= best.f + 1e-12 * best.f.abs() && gt.amax() < best.grad.amax())) {
                    best = OptimOutcome { x: trial, f: ft, grad: gt, iterations: best.iterations + 1, converged: best.converged };
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    best
}
