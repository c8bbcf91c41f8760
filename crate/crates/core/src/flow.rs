//! Squared-error losses and gradient flow in parameter space and in function space.

use std::ops::ControlFlow;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::conv::{compose, Architecture, ParamTuple};
use crate::error::{Error, Result};
use crate::fiber::FiberOptions;
use crate::invariants::delta_invariants;
use crate::linalg::{min_eigenvalue, numerical_rank, Matrix, RANK_RTOL};
use crate::lsq::{levenberg_marquardt, LmOptions};
use crate::ntk::{jacobian_blocks, jacobian_f64, kernel_representative, ntk, substituted};
use crate::ode::{integrate, Integrator};
use crate::scalar::Scalar;
use crate::tensor::{indices, EndToEndFilter, Tensor};

/// Gradient norm below which a flow is declared converged.
pub const GRAD_TOL: f64 = 1e-8;
/// Allowed drift of each invariant, relative to `1 + |delta_i(0)|`.
pub const DELTA_DRIFT_TOL: f64 = 1e-6;
/// Default time horizon.
pub const DEFAULT_T_MAX: f64 = 1e3;

/// Training pairs `(X_i, Y_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<Tensor<f64>>,
    outputs: Vec<Tensor<f64>>,
}

impl Dataset {
    pub fn new(arch: &Architecture, inputs: Vec<Tensor<f64>>, outputs: Vec<Tensor<f64>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs and {} outputs; need the same positive number",
                inputs.len(),
                outputs.len()
            )));
        }
        let out_shape = outputs[0].shape().to_vec();
        if out_shape.len() != arch.signal_dim() {
            return Err(Error::ShapeMismatch(format!(
                "outputs are {}-dimensional, architecture is {}-dimensional",
                out_shape.len(),
                arch.signal_dim()
            )));
        }
        let in_shape = arch.input_shape_for_output(&out_shape);
        for (x, y) in inputs.iter().zip(&outputs) {
            if x.shape() != in_shape.as_slice() || y.shape() != out_shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "sample shapes {:?} -> {:?}, expected {in_shape:?} -> {out_shape:?}",
                    x.shape(),
                    y.shape()
                )));
            }
        }
        Ok(Self { inputs, outputs })
    }

    /// `n` samples with standard normal entries and outputs of shape `out_shape`.
    pub fn random(arch: &Architecture, n: usize, out_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let in_shape = arch.input_shape_for_output(out_shape);
        let mut sample = |shape: &[usize]| {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        for _ in 0..n {
            inputs.push(sample(&in_shape)?);
            outputs.push(sample(out_shape)?);
        }
        Self::new(arch, inputs, outputs)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Tensor<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Tensor<f64>] {
        &self.outputs
    }

    /// `sum_i ||alpha(X_i) - Y_i||^2` for the end-to-end filter `v`.
    pub fn loss(&self, arch: &Architecture, v: &EndToEndFilter<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in self.inputs.iter().zip(&self.outputs) {
            let t = design_matrix(arch, x, y.shape())?;
            let pred = t * DVector::from_column_slice(v.data());
            total += (pred - DVector::from_column_slice(y.data())).norm_squared();
        }
        Ok(total)
    }
}

/// The matrix `T(X)` with `alpha(X) = T(X) v`, rows indexed by output
/// positions and columns by filter positions: `T[o, j] = X[o * S + j]`.
pub fn design_matrix(arch: &Architecture, x: &Tensor<f64>, out_shape: &[usize]) -> Result<DMatrix<f64>> {
    let k = arch.end_to_end_shape();
    let stride = arch.overall_stride();
    let in_shape = arch.input_shape_for_output(out_shape);
    if x.shape() != in_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "input of shape {:?}, expected {in_shape:?}",
            x.shape()
        )));
    }
    let rows: Vec<Vec<usize>> = indices(out_shape).collect();
    let cols: Vec<Vec<usize>> = indices(&k).collect();
    let mut t = DMatrix::zeros(rows.len(), cols.len());
    let mut pos = vec![0; k.len()];
    for (r, o) in rows.iter().enumerate() {
        for (c, j) in cols.iter().enumerate() {
            for m in 0..k.len() {
                pos[m] = o[m] * stride.components()[m] + j[m];
            }
            t[(r, c)] = *x.get(&pos);
        }
    }
    Ok(t)
}

/// `l(v) = (v - u)^T A (v - u) + c` with `A` symmetric positive definite.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticLoss<T = f64> {
    a: Matrix<T>,
    u: Tensor<T>,
    c: T,
}

impl<T: Scalar> QuadraticLoss<T> {
    pub fn new(a: Matrix<T>, u: Tensor<T>, c: T) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() != u.len() {
            return Err(Error::ShapeMismatch(format!(
                "A is {}x{} but u has {} entries",
                a.rows(),
                a.cols(),
                u.len()
            )));
        }
        let af = a.to_nalgebra();
        let scale = af.abs().max().max(f64::MIN_POSITIVE);
        if (&af - af.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::HypothesisViolated("A is not symmetric".into()));
        }
        let lmin = min_eigenvalue(&af);
        if lmin.is_nan() || lmin <= 1e-12 * scale {
            return Err(Error::DegenerateData(format!(
                "A is not positive definite (smallest eigenvalue {lmin:.3e})"
            )));
        }
        Ok(Self { a, u, c })
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn u(&self) -> &Tensor<T> {
        &self.u
    }

    pub fn c(&self) -> &T {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn value(&self, v: &EndToEndFilter<T>) -> Result<T> {
        let d = v.sub(&self.u)?;
        let ad = self.a.matvec(d.data())?;
        Ok(crate::scalar::dot(d.data(), &ad) + self.c.clone())
    }

    /// `2 A (v - u)`.
    pub fn grad(&self, v: &EndToEndFilter<T>) -> Result<EndToEndFilter<T>> {
        let d = v.sub(&self.u)?;
        let two = T::from_i64(2);
        let g = self.a.matvec(d.data())?.into_iter().map(|x| x * two.clone()).collect();
        Tensor::new(v.shape().to_vec(), g)
    }
}

impl QuadraticLoss<f64> {
    /// `A = B B^T / k + I / 2` and `u` with standard normal entries.
    pub fn random(shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let k: usize = shape.iter().product();
        let b = DMatrix::<f64>::from_fn(k, k, |_, _| StandardNormal.sample(&mut *rng));
        let a = &b * b.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5;
        let u: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect();
        Self::new(Matrix::from_nalgebra(&a), Tensor::new(shape.to_vec(), u)?, 0.0)
    }

    fn a_na(&self) -> DMatrix<f64> {
        self.a.to_nalgebra()
    }

    fn u_na(&self) -> DVector<f64> {
        DVector::from_column_slice(self.u.data())
    }
}

/// Reduces the dataset loss to `l_{A,u}(v) + c`.
pub fn dataset_to_quadratic(arch: &Architecture, data: &Dataset) -> Result<QuadraticLoss> {
    let k = arch.end_to_end_len();
    let out_len: usize = data.outputs[0].len();
    if data.len() * out_len < k {
        return Err(Error::DegenerateData(format!(
            "{} output values cannot determine a filter with {k} entries",
            data.len() * out_len
        )));
    }
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    let mut yy = 0.0;
    for (x, y) in data.inputs.iter().zip(&data.outputs) {
        let t = design_matrix(arch, x, y.shape())?;
        let yv = DVector::from_column_slice(y.data());
        a += t.transpose() * &t;
        b += t.transpose() * &yv;
        yy += yv.norm_squared();
    }
    let Some(chol) = a.clone().cholesky() else {
        return Err(Error::DegenerateData("inputs are not in general position".into()));
    };
    let u = chol.solve(&b);
    let c = yy - u.dot(&(&a * &u));
    QuadraticLoss::new(
        Matrix::from_nalgebra(&a),
        Tensor::new(arch.end_to_end_shape(), u.as_slice().to_vec())?,
        c,
    )
}

pub fn loss_grad_function<T: Scalar>(loss: &QuadraticLoss<T>, v: &EndToEndFilter<T>) -> Result<EndToEndFilter<T>> {
    loss.grad(v)
}

/// `J^T grad l(mu(theta))`, split into layers.
pub fn loss_grad_params<T: Scalar>(arch: &Architecture, theta: &ParamTuple<T>, loss: &QuadraticLoss<T>) -> Result<ParamTuple<T>> {
    let v = compose(arch, theta)?;
    let g = loss.grad(&v)?;
    let jac = jacobian_blocks(arch, theta)?;
    let filters = jac
        .blocks
        .iter()
        .zip(theta.filters())
        .map(|(block, w)| {
            let data = (0..block.cols())
                .map(|j| crate::scalar::dot(&block.column(j), g.data()))
                .collect();
            Tensor::new(w.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    ParamTuple::new(arch, filters)
}

fn grad_params_f64(arch: &Architecture, theta: &ParamTuple<f64>, a: &DMatrix<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let jac = jacobian_f64(arch, theta)?;
    let v = DVector::from_column_slice(compose(arch, theta)?.data());
    let g = a * (&v - u) * 2.0;
    Ok((jac.transpose() * g, v))
}

/// A sampled solution of a flow.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Flattened parameters (parameter flow) or end-to-end filters (function flow).
    pub states: Vec<Vec<f64>>,
    /// End-to-end filter at each time.
    pub functions: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    /// Norm of the parameter gradient; in function space `sqrt(g^T K g)`, which is the same quantity.
    pub grad_norms: Vec<f64>,
    pub deltas: Vec<Vec<f64>>,
    /// The gradient fell below the tolerance before `t_max`.
    pub converged: bool,
    /// Largest `|delta_i(t) - delta_i(0)| / (1 + |delta_i(0)|)` seen.
    pub max_delta_drift: f64,
    pub drift_flagged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    fn record(&mut self, t: f64, state: &[f64], v: &[f64], loss: f64, grad_norm: f64, delta: Vec<f64>) {
        if let Some(first) = self.deltas.first() {
            for (d, d0) in delta.iter().zip(first) {
                self.max_delta_drift = self.max_delta_drift.max((d - d0).abs() / (1.0 + d0.abs()));
            }
        }
        self.times.push(t);
        self.states.push(state.to_vec());
        self.functions.push(v.to_vec());
        self.losses.push(loss);
        self.grad_norms.push(grad_norm);
        self.deltas.push(delta);
    }

    fn finish(&mut self) {
        self.drift_flagged = self.max_delta_drift > DELTA_DRIFT_TOL;
        if self.drift_flagged {
            warn!("invariant drift {:.3e} exceeds tolerance", self.max_delta_drift);
        }
    }
}

/// Integrates `d theta / dt = -grad L(theta)`.
pub fn integrate_param_flow(
    arch: &Architecture,
    theta0: &ParamTuple<f64>,
    loss: &QuadraticLoss,
    t_max: f64,
    integrator: Integrator,
) -> Result<Trajectory> {
    integrate_param_flow_on_grid(arch, theta0, loss, t_max, integrator, None)
}

fn integrate_param_flow_on_grid(
    arch: &Architecture,
    theta0: &ParamTuple<f64>,
    loss: &QuadraticLoss,
    t_max: f64,
    integrator: Integrator,
    grid: Option<f64>,
) -> Result<Trajectory> {
    compose(arch, theta0)?;
    if loss.dim() != arch.end_to_end_len() {
        return Err(Error::ShapeMismatch(format!(
            "loss on {} entries for an end-to-end filter with {}",
            loss.dim(),
            arch.end_to_end_len()
        )));
    }
    let (a, u) = (loss.a_na(), loss.u_na());
    let unflatten = |y: &DVector<f64>| ParamTuple::from_flat(arch, y.as_slice());
    let mut traj = Trajectory::default();
    let rhs = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let (grad, _) = grad_params_f64(arch, &unflatten(y)?, &a, &u)?;
        Ok(-grad)
    };
    let observe = |t: f64, y: &DVector<f64>| -> Result<ControlFlow<()>> {
        let theta = unflatten(y)?;
        let (grad, v) = grad_params_f64(arch, &theta, &a, &u)?;
        let d = &v - &u;
        let value = d.dot(&(&a * &d)) + loss.c;
        let grad_norm = grad.norm();
        traj.record(t, y.as_slice(), v.as_slice(), value, grad_norm, delta_invariants(&theta));
        if grad_norm < GRAD_TOL {
            traj.converged = true;
            return Ok(ControlFlow::Break(()));
        }
        Ok(ControlFlow::Continue(()))
    };
    integrate(rhs, DVector::from_vec(theta0.flatten()), t_max, integrator, grid, observe)?;
    traj.finish();
    Ok(traj)
}

/// Keeps the fiber point of the previous evaluation and refines it for the
/// next one, falling back to a full fiber recovery when refinement fails.
/// Largest relative residual of `(mu(theta) - v, delta(theta) - delta)` at
/// which a warm-started point is accepted. Runge-Kutta stages and the
/// integrated state itself lie off the neuromanifold by the truncation error;
/// there the kernel is taken at the least-squares point, which extends the
/// vector field smoothly to a neighbourhood. Larger residuals mean the
/// tracker lost the fiber.
const TRACK_RTOL: f64 = 1e-3;

struct FiberTracker<'a> {
    arch: &'a Architecture,
    delta: Vec<f64>,
    last: Option<ParamTuple<f64>>,
}

impl FiberTracker<'_> {
    fn point(&mut self, v: &EndToEndFilter<f64>) -> Result<ParamTuple<f64>> {
        let theta = match self.last.as_ref().and_then(|prev| self.refine(prev, v)) {
            Some(theta) => theta,
            None => kernel_representative(self.arch, v, &self.delta, &FiberOptions::default())?,
        };
        let rank = numerical_rank(&jacobian_f64(self.arch, &theta)?, RANK_RTOL);
        let dim = self.arch.neuromanifold_dim();
        if rank < dim {
            return Err(Error::SingularPoint(format!(
                "Jacobian rank {rank} below neuromanifold dimension {dim} along the trajectory"
            )));
        }
        self.last = Some(theta.clone());
        Ok(theta)
    }

    /// Gauss-Newton on `(mu(theta) - v, delta(theta) - delta)`.
    fn refine(&self, start: &ParamTuple<f64>, v: &EndToEndFilter<f64>) -> Option<ParamTuple<f64>> {
        let arch = self.arch;
        let h = arch.depth();
        let k = v.len();
        let target = v.data();
        let delta = &self.delta;
        let residual = |x: &DVector<f64>| -> DVector<f64> {
            let theta = ParamTuple::from_flat(arch, x.as_slice()).expect("length matches");
            let mu = compose(arch, &theta).expect("valid");
            let d = delta_invariants(&theta);
            DVector::from_iterator(
                k + h - 1,
                mu.data()
                    .iter()
                    .zip(target)
                    .map(|(a, b)| a - b)
                    .chain(d.iter().zip(delta).map(|(a, b)| a - b)),
            )
        };
        let eval = |x: &DVector<f64>| {
            let theta = ParamTuple::from_flat(arch, x.as_slice()).expect("length matches");
            let jac = jacobian_f64(arch, &theta).expect("valid");
            let mut full = DMatrix::zeros(k + h - 1, x.len());
            full.rows_mut(0, k).copy_from(&jac);
            let mut offset = 0;
            let sizes = arch.layer_sizes();
            for (l, w) in theta.filters().iter().enumerate() {
                for (j, wj) in w.data().iter().enumerate() {
                    // d delta_i / d w_l = 2 w_l ([l == i + 1] - [l == i])
                    if l >= 1 {
                        full[(k + l - 1, offset + j)] += 2.0 * wj;
                    }
                    if l + 1 < h {
                        full[(k + l, offset + j)] -= 2.0 * wj;
                    }
                }
                offset += sizes[l];
            }
            (residual(x), full)
        };
        let scale = 1.0 + v.norm() + delta.iter().map(|d| d.abs()).sum::<f64>();
        let res = levenberg_marquardt(
            DVector::from_vec(start.flatten()),
            eval,
            residual,
            &LmOptions {
                max_iter: 20,
                initial_damping: 1e-12,
                target: 1e-13 * scale,
            },
        );
        (res.residual_norm <= TRACK_RTOL * scale).then(|| ParamTuple::from_flat(arch, res.x.as_slice()).expect("length matches"))
    }
}

/// Integrates `dv/dt = -K^(delta)(v) grad l(v)` on the neuromanifold.
pub fn integrate_function_flow(
    arch: &Architecture,
    v0: &EndToEndFilter<f64>,
    delta: &[f64],
    loss: &QuadraticLoss,
    t_max: f64,
    integrator: Integrator,
) -> Result<Trajectory> {
    integrate_function_flow_on_grid(arch, v0, delta, loss, t_max, integrator, None)
}

fn integrate_function_flow_on_grid(
    arch: &Architecture,
    v0: &EndToEndFilter<f64>,
    delta: &[f64],
    loss: &QuadraticLoss,
    t_max: f64,
    integrator: Integrator,
    grid: Option<f64>,
) -> Result<Trajectory> {
    if loss.dim() != v0.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss on {} entries for an end-to-end filter with {}",
            loss.dim(),
            v0.len()
        )));
    }
    let (a, u) = (loss.a_na(), loss.u_na());
    let shape = v0.shape().to_vec();
    let tracker = std::cell::RefCell::new(FiberTracker {
        arch,
        delta: delta.to_vec(),
        last: None,
    });
    let velocity = |y: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let v = Tensor::new(shape.clone(), y.as_slice().to_vec())?;
        let theta = tracker.borrow_mut().point(&v)?;
        let k = ntk(arch, &theta)?.matrix.to_nalgebra();
        let g = &a * (y - &u) * 2.0;
        Ok((-(&k * &g), g))
    };
    let mut traj = Trajectory::default();
    let rhs = |y: &DVector<f64>| Ok(velocity(y)?.0);
    let observe = |t: f64, y: &DVector<f64>| -> Result<ControlFlow<()>> {
        let (vel, g) = velocity(y)?;
        let d = y - &u;
        let value = d.dot(&(&a * &d)) + loss.c;
        // g^T K g = -g^T velocity
        let grad_norm = (-g.dot(&vel)).max(0.0).sqrt();
        traj.record(t, y.as_slice(), y.as_slice(), value, grad_norm, delta.to_vec());
        if grad_norm < GRAD_TOL {
            traj.converged = true;
            return Ok(ControlFlow::Break(()));
        }
        Ok(ControlFlow::Continue(()))
    };
    integrate(rhs, DVector::from_column_slice(v0.data()), t_max, integrator, grid, observe)?;
    traj.finish();
    Ok(traj)
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowComparison {
    /// `max_t ||mu(theta(t)) - v(t)||` over the common time points.
    pub max_deviation: f64,
    pub compared_points: usize,
    pub delta: Vec<f64>,
    pub param: Trajectory,
    pub function: Trajectory,
}

/// Runs both flows from `theta0` and `mu(theta0)` with `delta = delta(theta0)`.
pub fn compare_flows(
    arch: &Architecture,
    theta0: &ParamTuple<f64>,
    loss: &QuadraticLoss,
    t_max: f64,
    integrator: Integrator,
) -> Result<FlowComparison> {
    let grid = Some(t_max / 100.0);
    let delta = delta_invariants(theta0);
    let param = integrate_param_flow_on_grid(arch, theta0, loss, t_max, integrator, grid)?;
    let v0 = compose(arch, theta0)?;
    let function = integrate_function_flow_on_grid(arch, &v0, &delta, loss, t_max, integrator, grid)?;
    let (max_deviation, compared_points) = max_deviation_on_common_times(&param, &function);
    Ok(FlowComparison {
        max_deviation,
        compared_points,
        delta,
        param,
        function,
    })
}

/// Largest distance between the recorded functions at times present in both runs.
pub fn max_deviation_on_common_times(a: &Trajectory, b: &Trajectory) -> (f64, usize) {
    let (mut i, mut j) = (0, 0);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    while i < a.times.len() && j < b.times.len() {
        let (ta, tb) = (a.times[i], b.times[j]);
        if ta == tb {
            let d: f64 = a.functions[i]
                .iter()
                .zip(&b.functions[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
            count += 1;
            i += 1;
            j += 1;
        } else if ta < tb {
            i += 1;
        } else {
            j += 1;
        }
    }
    (worst, count)
}

/// Hessian of `L(theta) = l(mu(theta))` with its layer block layout.
#[derive(Clone, Debug)]
pub struct ParamHessian {
    pub matrix: DMatrix<f64>,
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl ParamHessian {
    /// The block `d^2 L / (d w_i d w_j)`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.matrix
            .view((self.offsets[i], self.offsets[j]), (self.sizes[i], self.sizes[j]))
            .into_owned()
    }
}

/// `d^2 L(x_i, y_j) = 2 mu_i(x)^T A mu_j(y) + mu_ij(x, y)^T grad l(mu(theta))`,
/// where `mu_i` replaces layer `i` and `mu_ij` replaces layers `i != j` (zero
/// for `i == j`). At `mu(theta) = 0` the second term is `-2 mu_ij^T A u`.
pub fn hessian_params(arch: &Architecture, theta: &ParamTuple<f64>, loss: &QuadraticLoss) -> Result<ParamHessian> {
    let v = compose(arch, theta)?;
    if loss.dim() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss on {} entries for an end-to-end filter with {}",
            loss.dim(),
            v.len()
        )));
    }
    let a = loss.a_na();
    let jac = jacobian_f64(arch, theta)?;
    let g = loss.grad(&v)?;
    let mut matrix = jac.transpose() * &a * &jac * 2.0;
    let sizes = arch.layer_sizes();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    for i in 0..arch.depth() {
        for j in i + 1..arch.depth() {
            let (si, sj) = (&arch.layers()[i].shape, &arch.layers()[j].shape);
            for x in 0..sizes[i] {
                let ex = Tensor::basis(si, x);
                for y in 0..sizes[j] {
                    let ey = Tensor::basis(sj, y);
                    let mixed = substituted(arch, theta, &[(i, &ex), (j, &ey)]).dot(&g);
                    matrix[(offsets[i] + x, offsets[j] + y)] += mixed;
                    matrix[(offsets[j] + y, offsets[i] + x)] += mixed;
                }
            }
        }
    }
    Ok(ParamHessian { matrix, offsets, sizes })
}

#[derive(Clone, Debug, Serialize)]
pub struct SaddleReport {
    pub is_strict_saddle: bool,
    pub min_eigenvalue: f64,
    pub grad_norm: f64,
}

pub fn strict_saddle_check(arch: &Architecture, theta: &ParamTuple<f64>, loss: &QuadraticLoss) -> Result<SaddleReport> {
    let (grad, _) = grad_params_f64(arch, theta, &loss.a_na(), &loss.u_na())?;
    let hess = hessian_params(arch, theta, loss)?;
    let min_eigenvalue = min_eigenvalue(&hess.matrix);
    let grad_norm = grad.norm();
    Ok(SaddleReport {
        is_strict_saddle: grad_norm < GRAD_TOL && min_eigenvalue < -1e-8,
        min_eigenvalue,
        grad_norm,
    })
}

/// A critical point of `L` with `w_zero = 0`.
///
/// With one layer zero, `mu = 0` and only the gradient in that layer
/// survives: `J_zero^T A u`. It is linear in every other filter; layer
/// `solve` is taken from the null space of that linear map while the
/// remaining layers are drawn at random.
pub fn zero_layer_critical_point(
    arch: &Architecture,
    loss: &QuadraticLoss,
    zero: usize,
    solve: usize,
    rng: &mut impl Rng,
) -> Result<ParamTuple<f64>> {
    let h = arch.depth();
    if zero >= h || solve >= h || zero == solve {
        return Err(Error::ShapeMismatch(format!(
            "layers {zero} and {solve} must be distinct and below {h}"
        )));
    }
    let mut filters: Vec<Tensor<f64>> = arch
        .layers()
        .iter()
        .map(|l| {
            let data: Vec<f64> = (0..l.size()).map(|_| StandardNormal.sample(&mut *rng)).collect();
            Tensor::new(l.shape.clone(), data)
        })
        .collect::<Result<_>>()?;
    filters[zero] = Tensor::zeros(&arch.layers()[zero].shape);
    let theta = ParamTuple::new(arch, filters)?;
    let au = loss.a_na() * loss.u_na();
    let au = Tensor::new(arch.end_to_end_shape(), au.as_slice().to_vec())?;
    let (sz, ss) = (&arch.layers()[zero].shape, &arch.layers()[solve].shape);
    let (nz, ns) = (arch.layers()[zero].size(), arch.layers()[solve].size());
    let map = DMatrix::from_fn(nz, ns, |x, y| {
        let ex = Tensor::basis(sz, x);
        let ey = Tensor::basis(ss, y);
        substituted(arch, &theta, &[(zero, &ex), (solve, &ey)]).dot(&au)
    });
    // The null space of `map` is the eigenspace of `map^T map` for eigenvalue zero.
    let gram = map.transpose() * &map;
    let eig = gram.symmetric_eigen();
    let idx = eig.eigenvalues.imin();
    let null = eig.eigenvectors.column(idx);
    if (&map * null).norm() > RANK_RTOL * map.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::HypothesisViolated(format!(
            "no nonzero filter for layer {solve} makes the point critical"
        )));
    }
    Ok(theta.with_layer(solve, Tensor::new(ss.clone(), null.iter().copied().collect())?))
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroAvoidanceRun {
    pub final_mu_norm: f64,
    pub layer_norms: Vec<f64>,
    pub final_loss: f64,
    pub final_time: f64,
    pub converged: bool,
    pub max_delta_drift: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroAvoidanceReport {
    pub seed: u64,
    pub runs: Vec<ZeroAvoidanceRun>,
    /// Fraction of runs ending with `||mu|| > 1e-4`.
    pub fraction_nonzero: f64,
}

/// Gradient flow from `n_runs` standard normal initializations.
pub fn zero_avoidance_experiment(
    arch: &Architecture,
    loss: &QuadraticLoss,
    n_runs: usize,
    seed: u64,
    t_max: f64,
    integrator: Integrator,
) -> Result<ZeroAvoidanceReport> {
    let runs: Vec<ZeroAvoidanceRun> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let x0: Vec<f64> = (0..arch.param_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let theta0 = ParamTuple::from_flat(arch, &x0)?;
            let traj = integrate_param_flow(arch, &theta0, loss, t_max, integrator)?;
            let theta = ParamTuple::from_flat(arch, traj.states.last().expect("at least the start"))?;
            let mu = compose(arch, &theta)?;
            Ok(ZeroAvoidanceRun {
                final_mu_norm: mu.norm(),
                layer_norms: theta.norms_sq().iter().map(|n| n.sqrt()).collect(),
                final_loss: *traj.losses.last().expect("recorded"),
                final_time: traj.final_time(),
                converged: traj.converged,
                max_delta_drift: traj.max_delta_drift,
            })
        })
        .collect::<Result<_>>()?;
    let fraction_nonzero = if runs.is_empty() {
        1.0
    } else {
        runs.iter().filter(|r| r.final_mu_norm > 1e-4).count() as f64 / runs.len() as f64
    };
    Ok(ZeroAvoidanceReport {
        seed,
        runs,
        fraction_nonzero,
    })
}
