//! Fully-connected linear networks `W = W_H ... W_1`.

use std::ops::ControlFlow;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::invariants::fc_delta_matrices;
use crate::linalg::{psd_power, Matrix};
use crate::ode::{integrate, Integrator};
use crate::scalar::Scalar;

/// `(W_1, .., W_H)` with `W_l` of shape `d_l x d_{l-1}`.
pub type MatrixTuple<T> = Vec<Matrix<T>>;

fn check_chain<T: Scalar>(weights: &[Matrix<T>]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::ShapeMismatch("at least one weight matrix is required".into()));
    }
    for (l, w) in weights.windows(2).enumerate() {
        if w[1].cols() != w[0].rows() {
            return Err(Error::ShapeMismatch(format!(
                "W_{} is {}x{} but W_{} has {} rows",
                l + 2,
                w[1].rows(),
                w[1].cols(),
                l + 1,
                w[0].rows()
            )));
        }
    }
    Ok(())
}

/// `W_H ... W_1`.
pub fn fc_compose<T: Scalar>(weights: &[Matrix<T>]) -> Result<Matrix<T>> {
    check_chain(weights)?;
    let mut acc = weights[0].clone();
    for w in &weights[1..] {
        acc = w.matmul(&acc)?;
    }
    Ok(acc)
}

/// `P_l = W_l ... W_1` for `l = 0..H` (`P_0 = I`).
fn prefixes<T: Scalar>(weights: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    let mut out = vec![Matrix::identity(weights[0].cols())];
    for w in weights {
        let next = w.matmul(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// `S_l = W_H ... W_l` for `l = 1..H+1` (`S_{H+1} = I`), indexed from zero.
fn suffixes<T: Scalar>(weights: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    let h = weights.len();
    let mut out = vec![Matrix::identity(weights[h - 1].rows()); h + 1];
    for l in (0..h).rev() {
        out[l] = out[l + 1].matmul(&weights[l])?;
    }
    Ok(out)
}

/// The kernel applied to `Z`:
/// `sum_l (W_H..W_{l+1})(W_H..W_{l+1})^T Z (W_{l-1}..W_1)^T (W_{l-1}..W_1)`.
pub fn fc_ntk_apply<T: Scalar>(weights: &[Matrix<T>], z: &Matrix<T>) -> Result<Matrix<T>> {
    check_chain(weights)?;
    let h = weights.len();
    let (rows, cols) = (weights[h - 1].rows(), weights[0].cols());
    if z.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "Z is {}x{}, the product is {rows}x{cols}",
            z.rows(),
            z.cols()
        )));
    }
    let pre = prefixes(weights)?;
    let suf = suffixes(weights)?;
    let mut total = Matrix::zeros(rows, cols);
    for l in 0..h {
        let left = suf[l + 1].gram_outer();
        let right = pre[l].transpose().matmul(&pre[l])?;
        total = total.add(&left.matmul(z)?.matmul(&right)?)?;
    }
    Ok(total)
}

/// `A_W(Z) = sum_{j=1}^H (W W^T)^((H-j)/H) Z (W^T W)^((j-1)/H)`.
pub fn fc_a_operator(w: &Matrix<f64>, h: usize, z: &Matrix<f64>) -> Result<Matrix<f64>> {
    if h == 0 {
        return Err(Error::InvalidArchitecture("depth must be at least one".into()));
    }
    if z.shape() != w.shape() {
        return Err(Error::ShapeMismatch(format!("Z is {:?}, W is {:?}", z.shape(), w.shape())));
    }
    let w = w.to_nalgebra();
    Ok(Matrix::from_nalgebra(&a_operator(&w, h, &z.to_nalgebra())))
}

fn a_operator(w: &DMatrix<f64>, h: usize, z: &DMatrix<f64>) -> DMatrix<f64> {
    let outer = w * w.transpose();
    let inner = w.transpose() * w;
    let hf = h as f64;
    (1..=h).fold(DMatrix::zeros(z.nrows(), z.ncols()), |acc, j| {
        acc + psd_power(&outer, (h - j) as f64 / hf) * z * psd_power(&inner, (j - 1) as f64 / hf)
    })
}

/// A balanced factorization of `W` into `h` factors.
///
/// With the thin SVD `W = U S V^T` of rank-bound `r = min(m, n)` the factors
/// are `W_1 = S^(1/h) V^T`, `W_l = S^(1/h)` in between and `W_h = U S^(1/h)`,
/// so all hidden widths are `r`. For `h = 1` this is `W` itself.
pub fn fc_balance(w: &Matrix<f64>, h: usize) -> Result<MatrixTuple<f64>> {
    if h == 0 {
        return Err(Error::InvalidArchitecture("depth must be at least one".into()));
    }
    if h == 1 {
        return Ok(vec![w.clone()]);
    }
    let svd = w.to_nalgebra().svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let root = DMatrix::from_diagonal(&svd.singular_values.map(|s| s.max(0.0).powf(1.0 / h as f64)));
    let mut out = Vec::with_capacity(h);
    out.push(Matrix::from_nalgebra(&(&root * vt)));
    for _ in 1..h - 1 {
        out.push(Matrix::from_nalgebra(&root));
    }
    out.push(Matrix::from_nalgebra(&(u * root)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrthogonalFiberReport {
    pub product_preserved: bool,
    pub balance_preserved: bool,
    pub ntk_preserved: bool,
    pub max_product_error: f64,
    pub max_delta: f64,
    pub max_ntk_error: f64,
}

const FC_RTOL: f64 = 1e-9;

/// Moves a balanced tuple along `(W_H G_{H-1}, G_{H-1}^-1 W_{H-1} G_{H-2}, .., G_1^-1 W_1)`
/// and reports which properties survive. For orthogonal `G` the inverse is the transpose.
pub fn fc_orthogonal_fiber_check(weights: &[Matrix<f64>], gs: &[Matrix<f64>]) -> Result<OrthogonalFiberReport> {
    check_chain(weights)?;
    let h = weights.len();
    if gs.len() + 1 != h {
        return Err(Error::ShapeMismatch(format!("{} transforms for {h} layers", gs.len())));
    }
    if weights.iter().any(|w| w.rows() != w.cols()) || weights.iter().any(|w| w.rows() != weights[0].rows()) {
        return Err(Error::HypothesisViolated("the check needs square matrices of one size".into()));
    }
    let n = weights[0].rows();
    let ws: Vec<DMatrix<f64>> = weights.iter().map(Matrix::to_nalgebra).collect();
    if ws.iter().any(|w| w.clone().lu().determinant().abs() <= f64::EPSILON * w.norm().powi(n as i32)) {
        return Err(Error::HypothesisViolated("the weights must be invertible".into()));
    }
    let mut g_inv = Vec::with_capacity(gs.len());
    for g in gs {
        if g.shape() != (n, n) {
            return Err(Error::ShapeMismatch(format!("transform of shape {:?}, expected {n}x{n}", g.shape())));
        }
        let inv = g
            .to_nalgebra()
            .try_inverse()
            .ok_or_else(|| Error::HypothesisViolated("a transform is singular".into()))?;
        g_inv.push(inv);
    }
    let moved: Vec<DMatrix<f64>> = (0..h)
        .map(|l| {
            let mut m = ws[l].clone();
            if l + 1 < h {
                m = &g_inv[l] * m;
            }
            if l > 0 {
                m *= gs[l - 1].to_nalgebra();
            }
            m
        })
        .collect();
    let moved: Vec<Matrix<f64>> = moved.iter().map(Matrix::from_nalgebra).collect();

    let before = fc_compose(weights)?;
    let after = fc_compose(&moved)?;
    let scale = before.max_abs().max(1.0);
    let max_product_error = before.max_abs_diff(&after) / scale;

    let max_delta = fc_delta_matrices(&moved)?
        .iter()
        .map(Matrix::max_abs)
        .fold(0.0, f64::max)
        / moved.iter().map(|m| m.max_abs() * m.max_abs()).fold(1.0, f64::max);

    let mut max_ntk_error: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut z = Matrix::zeros(n, n);
            z[(i, j)] = 1.0;
            let k0 = fc_ntk_apply(weights, &z)?;
            let k1 = fc_ntk_apply(&moved, &z)?;
            max_ntk_error = max_ntk_error.max(k0.max_abs_diff(&k1) / k0.max_abs().max(1.0));
        }
    }
    Ok(OrthogonalFiberReport {
        product_preserved: max_product_error <= FC_RTOL,
        balance_preserved: max_delta <= FC_RTOL,
        ntk_preserved: max_ntk_error <= FC_RTOL,
        max_product_error,
        max_delta,
        max_ntk_error,
    })
}

/// `l(W) = ||W X - Y||_F^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLoss {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl FcLoss {
    pub fn new(x: &Matrix<f64>, y: &Matrix<f64>) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs and {} outputs",
                x.cols(),
                y.cols()
            )));
        }
        Ok(Self {
            x: x.to_nalgebra(),
            y: y.to_nalgebra(),
        })
    }

    /// Standard normal data with `n` samples.
    pub fn random(d_in: usize, d_out: usize, n: usize, rng: &mut impl Rng) -> Self {
        Self {
            x: DMatrix::from_fn(d_in, n, |_, _| StandardNormal.sample(&mut *rng)),
            y: DMatrix::from_fn(d_out, n, |_, _| StandardNormal.sample(&mut *rng)),
        }
    }

    pub fn value(&self, w: &Matrix<f64>) -> f64 {
        (w.to_nalgebra() * &self.x - &self.y).norm_squared()
    }

    /// `2 (W X - Y) X^T`.
    pub fn grad(&self, w: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_nalgebra(&self.grad_na(&w.to_nalgebra()))
    }

    fn grad_na(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        (w * &self.x - &self.y) * self.x.transpose() * 2.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FcComparison {
    /// `max_t ||W_H(t) .. W_1(t) - W(t)||_F` over common time points.
    pub max_deviation: f64,
    pub compared_points: usize,
    /// Largest entry of `Delta_i(t) - Delta_i(0)` seen along the layer flow.
    pub max_delta_drift: f64,
    pub final_loss_layers: f64,
    pub final_loss_product: f64,
}

fn flatten(ws: &[DMatrix<f64>]) -> DVector<f64> {
    DVector::from_iterator(ws.iter().map(|w| w.len()).sum(), ws.iter().flat_map(|w| w.iter().copied()))
}

fn unflatten(y: &DVector<f64>, shapes: &[(usize, usize)]) -> Vec<DMatrix<f64>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = DMatrix::from_column_slice(r, c, &y.as_slice()[offset..offset + r * c]);
            offset += r * c;
            m
        })
        .collect()
}

fn product(ws: &[DMatrix<f64>]) -> DMatrix<f64> {
    ws[1..].iter().fold(ws[0].clone(), |acc, w| w * acc)
}

/// Integrates the layer flow `dW_l/dt = -grad_{W_l} L` and the product flow
/// `dW/dt = -A_W(grad l(W))` from the same product and compares them.
pub fn fc_compare_flows(weights: &[Matrix<f64>], loss: &FcLoss, t_max: f64, integrator: Integrator) -> Result<FcComparison> {
    check_chain(weights)?;
    let h = weights.len();
    let ws: Vec<DMatrix<f64>> = weights.iter().map(Matrix::to_nalgebra).collect();
    let shapes: Vec<(usize, usize)> = ws.iter().map(|w| w.shape()).collect();
    let w0 = product(&ws);
    if loss.x.nrows() != w0.ncols() || loss.y.nrows() != w0.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "data of shapes {:?} -> {:?} for a {:?} product",
            loss.x.shape(),
            loss.y.shape(),
            w0.shape()
        )));
    }
    let grid = Some(t_max / 100.0);
    let delta0 = fc_delta_matrices(weights)?;

    let mut layer_times = Vec::new();
    let mut layer_products = Vec::new();
    let mut max_delta_drift: f64 = 0.0;
    let layer_rhs = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let ws = unflatten(y, &shapes);
        let g = loss.grad_na(&product(&ws));
        let grads: Vec<DMatrix<f64>> = (0..h)
            .map(|l| {
                let d_out = ws[h - 1].nrows();
                let above = if l + 1 < h { product(&ws[l + 1..]) } else { DMatrix::identity(d_out, d_out) };
                let below = if l > 0 { product(&ws[..l]) } else { DMatrix::identity(ws[0].ncols(), ws[0].ncols()) };
                -(above.transpose() * &g * below.transpose())
            })
            .collect();
        Ok(flatten(&grads))
    };
    integrate(layer_rhs, flatten(&ws), t_max, integrator, grid, |t, y| {
        let ws = unflatten(y, &shapes);
        let as_matrices: Vec<Matrix<f64>> = ws.iter().map(Matrix::from_nalgebra).collect();
        for (d, d0) in fc_delta_matrices(&as_matrices)?.iter().zip(&delta0) {
            max_delta_drift = max_delta_drift.max(d.max_abs_diff(d0));
        }
        layer_times.push(t);
        layer_products.push(product(&ws));
        Ok(ControlFlow::Continue(()))
    })?;

    let (r, c) = w0.shape();
    let mut product_times = Vec::new();
    let mut product_states = Vec::new();
    let product_rhs = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let w = DMatrix::from_column_slice(r, c, y.as_slice());
        let step = a_operator(&w, h, &loss.grad_na(&w));
        Ok(DVector::from_column_slice((-step).as_slice()))
    };
    integrate(product_rhs, DVector::from_column_slice(w0.as_slice()), t_max, integrator, grid, |t, y| {
        product_times.push(t);
        product_states.push(DMatrix::from_column_slice(r, c, y.as_slice()));
        Ok(ControlFlow::Continue(()))
    })?;

    let (mut i, mut j) = (0, 0);
    let mut max_deviation: f64 = 0.0;
    let mut compared_points = 0;
    while i < layer_times.len() && j < product_times.len() {
        if layer_times[i] == product_times[j] {
            max_deviation = max_deviation.max((&layer_products[i] - &product_states[j]).norm());
            compared_points += 1;
            i += 1;
            j += 1;
        } else if layer_times[i] < product_times[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    let final_layers = Matrix::from_nalgebra(layer_products.last().expect("recorded"));
    let final_product = Matrix::from_nalgebra(product_states.last().expect("recorded"));
    Ok(FcComparison {
        max_deviation,
        compared_points,
        max_delta_drift,
        final_loss_layers: loss.value(&final_layers),
        final_loss_product: loss.value(&final_product),
    })
}

/// Each layer with standard normal entries, for shapes `dims[l+1] x dims[l]`.
pub fn random_tuple(dims: &[usize], rng: &mut impl Rng) -> MatrixTuple<f64> {
    dims.windows(2)
        .map(|d| Matrix::from_fn(d[1], d[0], |_, _| StandardNormal.sample(&mut *rng)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::rat;
    use num_rational::BigRational;

    fn pair_v() -> Vec<Matrix<BigRational>> {
        vec![
            Matrix::diag(&[rat(1, 1), rat(1, 2)]),
            Matrix::diag(&[rat(1, 1), rat(2, 1)]),
        ]
    }

    fn pair_u() -> Vec<Matrix<BigRational>> {
        vec![
            Matrix::from_rows(vec![vec![rat(0, 1), rat(1, 1)], vec![rat(1, 2), rat(0, 1)]]).unwrap(),
            Matrix::from_i64_rows(&[&[0, 2], &[1, 0]]),
        ]
    }

    #[test]
    fn counterexample_kernels() {
        let z = Matrix::identity(2);
        assert_eq!(fc_compose(&pair_v()).unwrap(), Matrix::identity(2));
        assert_eq!(fc_compose(&pair_u()).unwrap(), Matrix::identity(2));
        let kv = fc_ntk_apply(&pair_v(), &z).unwrap();
        let ku = fc_ntk_apply(&pair_u(), &z).unwrap();
        assert_eq!(kv, Matrix::diag(&[rat(2, 1), rat(17, 4)]));
        assert_eq!(ku, Matrix::diag(&[rat(17, 4), rat(2, 1)]));
    }

    #[test]
    fn identity_layers_scale_by_depth() {
        let ws = vec![Matrix::<BigRational>::identity(3); 4];
        let z = Matrix::from_i64_rows(&[&[1, 2, 3], &[4, 5, 6], &[7, 8, 9]]);
        assert_eq!(fc_ntk_apply(&ws, &z).unwrap(), z.scale(&rat(4, 1)));
    }

    #[test]
    fn scalar_a_operator() {
        let w = Matrix::from_rows(vec![vec![4.0]]).unwrap();
        let z = Matrix::from_rows(vec![vec![1.0]]).unwrap();
        // Both terms equal sqrt(16), matching the kernel of the balanced pair (2, 2).
        let out = fc_a_operator(&w, 2, &z).unwrap();
        assert!((out[(0, 0)] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn balance_of_diagonal() {
        let w = Matrix::diag(&[8.0, 1.0]);
        let ws = fc_balance(&w, 3).unwrap();
        assert!(fc_compose(&ws).unwrap().max_abs_diff(&w) < 1e-12);
        for d in fc_delta_matrices(&ws).unwrap() {
            assert!(d.max_abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_breaks_balance() {
        let ws = fc_balance(&Matrix::from_rows(vec![vec![2.0, 1.0], vec![0.5, 3.0]]).unwrap(), 2).unwrap();
        let report = fc_orthogonal_fiber_check(&ws, &[Matrix::diag(&[2.0, 2.0])]).unwrap();
        assert!(report.product_preserved);
        assert!(!report.balance_preserved);
        let (c, s) = (0.6, 0.8);
        let rot = Matrix::from_rows(vec![vec![c, -s], vec![s, c]]).unwrap();
        let report = fc_orthogonal_fiber_check(&ws, &[rot]).unwrap();
        assert!(report.product_preserved && report.balance_preserved && report.ntk_preserved, "{report:?}");
    }
}
