//! Explicit Runge-Kutta integrators for autonomous systems `y' = f(y)`.

use std::ops::ControlFlow;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Integrator {
    /// Classical fourth-order scheme with a fixed step.
    Rk4 { h: f64 },
    /// Dormand-Prince 5(4) with embedded error control.
    Dp45 { atol: f64, rtol: f64 },
}

impl Default for Integrator {
    fn default() -> Self {
        Self::Dp45 { atol: 1e-9, rtol: 1e-9 }
    }
}

impl Integrator {
    pub fn rk4() -> Self {
        Self::Rk4 { h: 1e-3 }
    }
}

/// Smallest admissible adaptive step, relative to `max(1, |t|)`.
const MIN_STEP_RTOL: f64 = 1e-13;

/// Integrates from `t = 0` to `t_end`, calling `observe(t, y)` at the start
/// and after every accepted step. The observer may stop the integration
/// early by returning `ControlFlow::Break`. Returns the final time and state.
///
/// With `grid = Some(g)` adaptive steps are shortened so that every multiple
/// of `g` is hit exactly; two runs with the same grid can then be compared
/// pointwise. Fixed-step runs ignore the grid.
pub fn integrate<F, O>(
    mut rhs: F,
    y0: DVector<f64>,
    t_end: f64,
    method: Integrator,
    grid: Option<f64>,
    mut observe: O,
) -> Result<(f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    O: FnMut(f64, &DVector<f64>) -> Result<ControlFlow<()>>,
{
    let mut t = 0.0;
    let mut y = y0;
    if observe(t, &y)?.is_break() || t_end <= 0.0 {
        return Ok((t, y));
    }
    match method {
        Integrator::Rk4 { h } => {
            if h.is_nan() || h <= 0.0 {
                return Err(Error::Parse(format!("step size must be positive, got {h}")));
            }
            while t < t_end {
                let step = h.min(t_end - t);
                let k1 = rhs(&y)?;
                let k2 = rhs(&(&y + &k1 * (step / 2.0)))?;
                let k3 = rhs(&(&y + &k2 * (step / 2.0)))?;
                let k4 = rhs(&(&y + &k3 * step))?;
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
                t = if t_end - t <= h { t_end } else { t + step };
                if observe(t, &y)?.is_break() {
                    break;
                }
            }
        }
        Integrator::Dp45 { atol, rtol } => {
            let mut k1 = rhs(&y)?;
            let mut h = initial_step(&y, &k1, atol, rtol).min(t_end);
            while t < t_end {
                let h_min = MIN_STEP_RTOL * t.abs().max(1.0);
                if h < h_min {
                    return Err(Error::StepSizeUnderflow { t, h });
                }
                let stop = match grid {
                    Some(g) if g > 0.0 => (((t / g) + 1e-9).floor() + 1.0) * g,
                    _ => t_end,
                }
                .min(t_end);
                let step = h.min(stop - t);
                let (y_new, k7, err) = dp_step(&mut rhs, &y, &k1, step, atol, rtol)?;
                if err <= 1.0 {
                    t = if stop - t <= h { stop } else { t + step };
                    y = y_new;
                    k1 = k7;
                    if observe(t, &y)?.is_break() {
                        break;
                    }
                }
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // A step clipped to a grid point says nothing about the next one.
                h = if err <= 1.0 && step < h { h.max(step * factor) } else { step * factor };
            }
        }
    }
    Ok((t, y))
}

fn initial_step(y: &DVector<f64>, f0: &DVector<f64>, atol: f64, rtol: f64) -> f64 {
    let scale = y.map(|x| atol + rtol * x.abs());
    let d0 = y.component_div(&scale).norm() / (y.len() as f64).sqrt();
    let d1 = f0.component_div(&scale).norm() / (y.len() as f64).sqrt();
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        (0.01 * d0 / d1).min(0.1)
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded fourth-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand-Prince step; returns the new state, `f` there (for reuse), and the scaled error.
fn dp_step<F>(rhs: &mut F, y: &DVector<f64>, k1: &DVector<f64>, h: f64, atol: f64, rtol: f64) -> Result<(DVector<f64>, DVector<f64>, f64)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    debug_assert_eq!(C[0], 0.0);
    let mut k: Vec<DVector<f64>> = vec![k1.clone()];
    for row in &A[1..7] {
        let mut arg = y.clone();
        for (a, kj) in row.iter().zip(&k) {
            if *a != 0.0 {
                arg.axpy(h * a, kj, 1.0);
            }
        }
        k.push(rhs(&arg)?);
    }
    let mut y_new = y.clone();
    let mut err = DVector::zeros(y.len());
    for (j, kj) in k.iter().enumerate() {
        y_new.axpy(h * B5[j], kj, 1.0);
        err.axpy(h * (B5[j] - B4[j]), kj, 1.0);
    }
    let mut worst: f64 = 0.0;
    for i in 0..y.len() {
        let scale = atol + rtol * y[i].abs().max(y_new[i].abs());
        worst = worst.max(err[i].abs() / scale);
    }
    if !worst.is_finite() {
        worst = f64::INFINITY;
    }
    let k7 = k.pop().expect("seven stages");
    Ok((y_new, k7, worst))
}
