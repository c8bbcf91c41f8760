//! Damped Gauss-Newton (Levenberg-Marquardt) for small dense problems.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct LmOptions {
    pub max_iter: usize,
    pub initial_damping: f64,
    /// Stop once `||r|| <= target`.
    pub target: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            initial_damping: 1e-3,
            target: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmResult {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Minimizes `||r(x)||^2` where `eval` returns `(r(x), dr/dx)`.
///
/// Damping is relative to the mean diagonal of `J^T J`. It is divided by
/// three after an accepted step and doubled after a rejected one.
pub fn levenberg_marquardt(
    x0: DVector<f64>,
    mut eval: impl FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
    residual: impl Fn(&DVector<f64>) -> DVector<f64>,
    options: &LmOptions,
) -> LmResult {
    let mut x = x0;
    let (mut r, mut jac) = eval(&x);
    let mut cost = r.norm_squared();
    let mut lambda = options.initial_damping;
    let n = x.len();
    let mut iterations = 0;
    while iterations < options.max_iter && cost.sqrt() > options.target {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.norm() == 0.0 {
            break;
        }
        let scale = (jtj.trace() / n as f64).max(f64::MIN_POSITIVE);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * scale;
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 2.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let trial = &x + &step;
            let r_trial = residual(&trial);
            let c_trial = r_trial.norm_squared();
            if c_trial.is_finite() && c_trial < cost {
                x = trial;
                lambda = (lambda / 3.0).max(1e-15);
                accepted = true;
                break;
            }
            if step.norm() <= 1e-15 * (1.0 + x.norm()) {
                break;
            }
            lambda *= 2.0;
        }
        if !accepted {
            break;
        }
        (r, jac) = eval(&x);
        cost = r.norm_squared();
    }
    LmResult {
        x,
        residual_norm: cost.sqrt(),
        iterations,
    }
}
