//! Jacobian blocks of the composition map and the neural tangent kernel.
//!
//! `mu` is linear in each filter separately, so the block `J_i` is obtained
//! exactly by substituting basis filters for `w_i` into [`compose`]; no
//! numerical differentiation is involved and the result is exact over the
//! rationals. The kernel is `K = sum_i J_i J_i^T`.

use nalgebra::DMatrix;

use crate::conv::{compose, compose_refs, Architecture, ParamTuple};
use crate::error::{Error, Result};
use crate::fiber::{recover_fiber, FiberMethod, FiberOptions};
use crate::invariants::rescale_to_delta;
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::tensor::{EndToEndFilter, FilterTensor, Tensor};

/// `J = [J_1 | ... | J_H]`, each block of size `k x |w_i|`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianBlocks<T> {
    pub blocks: Vec<Matrix<T>>,
}

impl<T: Scalar> JacobianBlocks<T> {
    /// The full `k x N` Jacobian.
    pub fn full(&self) -> Matrix<T> {
        let rows = self.blocks[0].rows();
        let cols: usize = self.blocks.iter().map(Matrix::cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for b in &self.blocks {
            for i in 0..rows {
                for j in 0..b.cols() {
                    out[(i, offset + j)] = b[(i, j)].clone();
                }
            }
            offset += b.cols();
        }
        out
    }
}

/// The kernel `K = J J^T` together with its per-layer terms `K_i = J_i J_i^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkMatrix<T> {
    pub matrix: Matrix<T>,
    pub layer_terms: Vec<Matrix<T>>,
}

impl<T: Scalar> NtkMatrix<T> {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn to_f64(&self) -> NtkMatrix<f64> {
        NtkMatrix {
            matrix: self.matrix.to_f64(),
            layer_terms: self.layer_terms.iter().map(Matrix::to_f64).collect(),
        }
    }
}

pub fn jacobian_blocks<T: Scalar>(arch: &Architecture, theta: &ParamTuple<T>) -> Result<JacobianBlocks<T>> {
    let k = compose(arch, theta)?.len();
    let blocks = (0..arch.depth())
        .map(|i| {
            let shape = &arch.layers()[i].shape;
            let size: usize = shape.iter().product();
            let columns: Vec<Vec<T>> = (0..size)
                .map(|j| {
                    let e = Tensor::basis(shape, j);
                    substituted(arch, theta, &[(i, &e)]).into_data()
                })
                .collect();
            Matrix::from_columns(k, &columns)
        })
        .collect();
    Ok(JacobianBlocks { blocks })
}

/// `mu` with some layers replaced, e.g. `mu(w_1, .., w_i', .., w_H)`.
pub(crate) fn substituted<T: Scalar>(
    arch: &Architecture,
    theta: &ParamTuple<T>,
    replace: &[(usize, &FilterTensor<T>)],
) -> Tensor<T> {
    let mut refs: Vec<&FilterTensor<T>> = theta.filters().iter().collect();
    for &(i, w) in replace {
        refs[i] = w;
    }
    compose_refs(arch, &refs)
}

/// `d_theta mu (theta_dot) = sum_i mu(w_1, .., theta_dot_i, .., w_H)`.
pub fn directional_derivative<T: Scalar>(
    arch: &Architecture,
    theta: &ParamTuple<T>,
    theta_dot: &ParamTuple<T>,
) -> Result<EndToEndFilter<T>> {
    compose(arch, theta)?;
    compose(arch, theta_dot)?;
    let mut acc: Option<Tensor<T>> = None;
    for (i, w_dot) in theta_dot.filters().iter().enumerate() {
        let term = substituted(arch, theta, &[(i, w_dot)]);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

pub fn ntk<T: Scalar>(arch: &Architecture, theta: &ParamTuple<T>) -> Result<NtkMatrix<T>> {
    let jac = jacobian_blocks(arch, theta)?;
    let layer_terms: Vec<Matrix<T>> = jac.blocks.iter().map(Matrix::gram_outer).collect();
    let mut matrix = layer_terms[0].clone();
    for term in &layer_terms[1..] {
        matrix = matrix.add(term)?;
    }
    Ok(NtkMatrix { matrix, layer_terms })
}

/// Function-space velocity `K g` for a cotangent `g`.
pub fn ntk_apply<T: Scalar>(kernel: &NtkMatrix<T>, g: &EndToEndFilter<T>) -> Result<EndToEndFilter<T>> {
    let out = kernel.matrix.matvec(g.data())?;
    Tensor::new(g.shape().to_vec(), out)
}

/// Jacobian of `mu` as an nalgebra matrix (`k x N`).
pub fn jacobian_f64(arch: &Architecture, theta: &ParamTuple<f64>) -> Result<DMatrix<f64>> {
    Ok(jacobian_blocks(arch, theta)?.full().to_nalgebra())
}

/// The kernel `K^(delta)(v)` of an end-to-end filter.
///
/// The fiber of `v` is recovered, checked to consist of a single scaling
/// class with a full-rank Jacobian, rescaled so its norm invariants equal
/// `delta` (all scalars positive), and its kernel returned. Sign choices do
/// not matter because every `K_i` is quadratic in the other filters.
pub fn ntk_of_function(arch: &Architecture, v: &EndToEndFilter<f64>, delta: &[f64]) -> Result<NtkMatrix<f64>> {
    let theta = kernel_representative(arch, v, delta, &FiberOptions::default())?;
    ntk(arch, &theta)
}

/// The fiber point used by [`ntk_of_function`].
pub fn kernel_representative(
    arch: &Architecture,
    v: &EndToEndFilter<f64>,
    delta: &[f64],
    options: &FiberOptions,
) -> Result<ParamTuple<f64>> {
    if !arch.kernel_depends_only_on_function() {
        return Err(Error::HypothesisViolated(if arch.signal_dim() == 1 {
            "one-dimensional architecture with a stride equal to one before the last layer".into()
        } else {
            "some layer has fewer than two filter sizes larger than one".into()
        }));
    }
    if delta.len() + 1 != arch.depth() {
        return Err(Error::ShapeMismatch(format!(
            "{} invariants for {} layers",
            delta.len(),
            arch.depth()
        )));
    }
    let fiber = recover_fiber(v, arch, FiberMethod::Auto, options)?;
    if fiber.representatives.len() != 1 {
        return Err(Error::SingularPoint(format!(
            "{} distinct scaling classes in the fiber",
            fiber.representatives.len()
        )));
    }
    let dim = arch.neuromanifold_dim();
    if fiber.ranks[0] < dim {
        return Err(Error::SingularPoint(format!(
            "Jacobian rank {} below neuromanifold dimension {dim}",
            fiber.ranks[0]
        )));
    }
    rescale_to_delta(&fiber.representatives[0], delta)
}
