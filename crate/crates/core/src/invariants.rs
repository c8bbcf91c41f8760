//! Conserved norm invariants, rescaling within a fiber, and the induced metric.

use nalgebra::{DMatrix, DVector};

use crate::conv::{Architecture, ParamTuple};
use crate::error::{Error, Result};
use crate::linalg::{column_space, numerical_rank, orthogonal_complement, pseudoinverse, Matrix, RANK_RTOL};
use crate::ntk::{jacobian_f64, ntk_of_function};
use crate::scalar::Scalar;
use crate::tensor::EndToEndFilter;

/// `delta_i = ||w_{i+1}||^2 - ||w_i||^2` for `i = 1..H-1`.
pub type DeltaVector<T> = Vec<T>;

/// Relative size of the normal component above which a vector is rejected as
/// not tangent to the neuromanifold.
pub const TANGENT_RTOL: f64 = 1e-8;

pub fn delta_invariants<T: Scalar>(theta: &ParamTuple<T>) -> DeltaVector<T> {
    let norms = theta.norms_sq();
    norms.windows(2).map(|w| w[1].clone() - w[0].clone()).collect()
}

/// Scalars `lambda` with `prod lambda_l = 1` such that `lambda * theta` has
/// invariants `target`.
///
/// There are `2^(H-1)` solutions differing by sign patterns with an even
/// number of negative entries; the all-positive one comes first. Writing
/// `beta_l = lambda_l^2 ||w_l||^2`, the targets fix all `beta_l` up to a common
/// shift, and the product constraint `prod beta_l = prod ||w_l||^2` pins it.
pub fn solve_scaling(theta: &ParamTuple<f64>, target: &[f64]) -> Result<Vec<Vec<f64>>> {
    let h = theta.depth();
    if target.len() + 1 != h {
        return Err(Error::ShapeMismatch(format!(
            "{} invariants for {h} layers",
            target.len()
        )));
    }
    let norms = theta.norms_sq();
    if let Some(layer) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroFilter { layer });
    }
    let beta = scaled_norms(&norms, target);
    let positive: Vec<f64> = beta.iter().zip(&norms).map(|(b, n)| (b / n).sqrt()).collect();
    let mut out = Vec::with_capacity(1 << (h - 1));
    for mask in 0u64..(1 << (h - 1)) {
        let mut lambda = positive.clone();
        let mut sign = 1.0;
        for (l, x) in lambda.iter_mut().enumerate().take(h - 1) {
            if mask >> l & 1 == 1 {
                *x = -*x;
                sign = -sign;
            }
        }
        lambda[h - 1] *= sign;
        out.push(lambda);
    }
    Ok(out)
}

/// The squared norms `beta_l` after rescaling.
fn scaled_norms(norms: &[f64], target: &[f64]) -> Vec<f64> {
    let h = norms.len();
    if h == 1 {
        return norms.to_vec();
    }
    if h == 2 {
        // beta_1 (beta_1 + d) = C. The larger root is free of cancellation and
        // the smaller one is C / larger.
        let (c, d) = (norms[0] * norms[1], target[0]);
        let disc = (d * d + 4.0 * c).sqrt();
        return if d >= 0.0 {
            let b2 = (d + disc) / 2.0;
            vec![c / b2, b2]
        } else {
            let b1 = (disc - d) / 2.0;
            vec![b1, c / b1]
        };
    }
    // Offsets n_l = n_1 + S_l with S_l the partial sums of the targets,
    // shifted so that all offsets are at least one.
    let mut partial = vec![0.0; h];
    for l in 1..h {
        partial[l] = partial[l - 1] + target[l - 1];
    }
    let min_partial = partial.iter().copied().fold(f64::INFINITY, f64::min);
    let n1 = (-min_partial).max(0.0) + 1.0;
    let offsets: Vec<f64> = partial.iter().map(|s| n1 + s).collect();
    let n_min = offsets.iter().copied().fold(f64::INFINITY, f64::min);
    let log_c: f64 = norms.iter().map(|n| n.ln()).sum();
    let f = |x: f64| offsets.iter().map(|o| (x + o).ln()).sum::<f64>() - log_c;
    // f is increasing on (-n_min, inf), tends to -inf at the left end, and
    // (x + n_min)^H >= C at the right end of the bracket.
    let mut lo = -n_min;
    let mut hi = (log_c / h as f64).exp() - n_min;
    while f(hi) < 0.0 {
        hi = hi.abs() * 2.0 + 1.0;
    }
    while hi - lo > 1e-14 * (1.0 + hi.abs()) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = hi;
    for _ in 0..2 {
        let df: f64 = offsets.iter().map(|o| 1.0 / (x + o)).sum();
        let next = x - f(x) / df;
        if next > -n_min && next.is_finite() {
            x = next;
        }
    }
    offsets.iter().map(|o| x + o).collect()
}

/// `(lambda_1 w_1, ..., lambda_H w_H)`.
pub fn rescale<T: Scalar>(theta: &ParamTuple<T>, lambda: &[T]) -> Result<ParamTuple<T>> {
    if lambda.len() != theta.depth() {
        return Err(Error::ShapeMismatch(format!(
            "{} scalars for {} layers",
            lambda.len(),
            theta.depth()
        )));
    }
    Ok(ParamTuple::from_filters_unchecked(
        theta.filters().iter().zip(lambda).map(|(w, c)| w.scaled(c)).collect(),
    ))
}

/// Rescales with the all-positive solution of [`solve_scaling`].
pub fn rescale_to_delta(theta: &ParamTuple<f64>, target: &[f64]) -> Result<ParamTuple<f64>> {
    let lambda = solve_scaling(theta, target)?.swap_remove(0);
    rescale(theta, &lambda)
}

/// Orthonormal basis of the tangent space of `{theta' : delta(theta') = delta(theta)}`.
#[derive(Clone, Debug)]
pub struct TangentBasis {
    pub vectors: Vec<DVector<f64>>,
}

impl TangentBasis {
    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    /// The basis vectors as columns of an `N x dim` matrix.
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, self.vectors.len(), |i, j| self.vectors[j][i])
    }
}

/// Directions `(.., -w_i, w_{i+1}, ..)`: the normals of the invariant level set,
/// which are also the infinitesimal rescalings killed by `d mu`.
pub fn scaling_directions(theta: &ParamTuple<f64>) -> Vec<DVector<f64>> {
    let sizes: Vec<usize> = theta.filters().iter().map(|w| w.len()).collect();
    let n: usize = sizes.iter().sum();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    (0..theta.depth().saturating_sub(1))
        .map(|i| {
            let mut d = DVector::zeros(n);
            for (j, x) in theta.filter(i).data().iter().enumerate() {
                d[offsets[i] + j] = -x;
            }
            for (j, x) in theta.filter(i + 1).data().iter().enumerate() {
                d[offsets[i + 1] + j] = *x;
            }
            d
        })
        .collect()
}

pub fn tangent_basis_theta_delta(theta: &ParamTuple<f64>) -> Result<TangentBasis> {
    if let Some(layer) = theta.filters().iter().position(|w| w.norm_sq() == 0.0) {
        return Err(Error::ZeroFilter { layer });
    }
    let n: usize = theta.filters().iter().map(|w| w.len()).sum();
    Ok(TangentBasis {
        vectors: orthogonal_complement(&scaling_directions(theta), n),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubmersionReport {
    /// Rank of `d mu` restricted to the tangent space of the level set.
    pub restricted_rank: usize,
    /// Dimension of that tangent space.
    pub tangent_dim: usize,
    /// Rank of the full Jacobian.
    pub jacobian_rank: usize,
    pub bijective: bool,
}

/// Whether `d mu` restricted to the level set of `delta` is a bijection onto
/// the tangent space of the neuromanifold.
pub fn submersion_check(arch: &Architecture, theta: &ParamTuple<f64>) -> Result<SubmersionReport> {
    let jac = jacobian_f64(arch, theta)?;
    let basis = tangent_basis_theta_delta(theta)?;
    let restricted = &jac * basis.matrix(jac.ncols());
    let restricted_rank = numerical_rank(&restricted, RANK_RTOL);
    let tangent_dim = basis.dim();
    Ok(SubmersionReport {
        restricted_rank,
        tangent_dim,
        jacobian_rank: numerical_rank(&jac, RANK_RTOL),
        bijective: restricted_rank == tangent_dim && tangent_dim == arch.neuromanifold_dim(),
    })
}

fn check_tangent(space: &DMatrix<f64>, v: &DVector<f64>) -> Result<()> {
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(());
    }
    let normal = v - space * (space.transpose() * v);
    let ratio = normal.norm() / norm;
    if ratio > TANGENT_RTOL {
        return Err(Error::NotTangent { ratio });
    }
    Ok(())
}

/// `<v1, v2>` in the metric `K^(delta)(v)^+` on the tangent space at `v`.
pub fn pushforward_metric(
    arch: &Architecture,
    v: &EndToEndFilter<f64>,
    delta: &[f64],
    v_dot1: &EndToEndFilter<f64>,
    v_dot2: &EndToEndFilter<f64>,
) -> Result<f64> {
    let kernel = ntk_of_function(arch, v, delta)?;
    kernel_metric(&kernel.matrix, v_dot1, v_dot2)
}

/// `v1^T K^+ v2` after checking both vectors lie in the range of `K`.
pub fn kernel_metric(kernel: &Matrix<f64>, v_dot1: &EndToEndFilter<f64>, v_dot2: &EndToEndFilter<f64>) -> Result<f64> {
    let k = kernel.to_nalgebra();
    if v_dot1.len() != k.nrows() || v_dot2.len() != k.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "tangent vectors of length {} and {} for a {}-dimensional kernel",
            v_dot1.len(),
            v_dot2.len(),
            k.nrows()
        )));
    }
    let a = DVector::from_column_slice(v_dot1.data());
    let b = DVector::from_column_slice(v_dot2.data());
    let space = column_space(&k, RANK_RTOL);
    check_tangent(&space, &a)?;
    check_tangent(&space, &b)?;
    Ok(a.dot(&(pseudoinverse(&k, RANK_RTOL) * b)))
}

/// `||(J B)^+ v_dot||^2` at a fiber point: the squared length of the unique
/// level-set tangent vector mapping to `v_dot`.
pub fn pushforward_norm_sq_via_fiber(
    arch: &Architecture,
    theta: &ParamTuple<f64>,
    v_dot: &EndToEndFilter<f64>,
) -> Result<f64> {
    let jac = jacobian_f64(arch, theta)?;
    let basis = tangent_basis_theta_delta(theta)?;
    let restricted = &jac * basis.matrix(jac.ncols());
    let v = DVector::from_column_slice(v_dot.data());
    check_tangent(&column_space(&restricted, RANK_RTOL), &v)?;
    Ok((pseudoinverse(&restricted, RANK_RTOL) * v).norm_squared())
}

/// `Delta_i = W_{i+1}^T W_{i+1} - W_i W_i^T` for matrices multiplied as `W_H ... W_1`.
pub fn fc_delta_matrices<T: Scalar>(weights: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    weights
        .windows(2)
        .map(|w| {
            let upper = w[1].transpose().matmul(&w[1])?;
            let lower = w[0].gram_outer();
            upper.sub(&lower)
        })
        .collect()
}
