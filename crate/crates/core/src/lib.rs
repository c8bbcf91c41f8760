//! Geometry of the neural tangent kernel for deep linear convolutional networks.
//!
//! Layers are multidimensional strided convolutions; the network computes a
//! single end-to-end convolution whose filter is the image of the parameter
//! tuple under the multilinear map [`compose`]. The crate computes that map,
//! its Jacobian and kernel, the fibers of the map, the conserved norm
//! invariants of gradient flow, and integrates the flow in parameter space
//! and in function space. A small fully-connected counterpart lives in [`fc`].
//!
//! Algebra is generic over [`Scalar`], which is implemented for `f64`, `f32`
//! and exact rationals. Root finding, fibers and flows are `f64` only.

pub mod conv;
pub mod error;
pub mod fc;
pub mod fiber;
pub mod io;
pub mod flow;
pub mod invariants;
pub mod linalg;
pub mod lsq;
pub mod ode;
pub mod ntk;
pub mod poly;
pub mod scalar;
pub mod tensor;

pub use conv::{apply_convolution, apply_layers, compose, end_to_end_shape, Architecture, LayerSpec, ParamTuple, StrideVector};
pub use error::{Error, Result};
pub use fc::{
    fc_a_operator, fc_balance, fc_compare_flows, fc_compose, fc_ntk_apply, fc_orthogonal_fiber_check, FcLoss,
    MatrixTuple,
};
pub use fiber::{
    enumerate_factorizations, invert_numeric, projective_roots, recover_fiber, recover_fiber_rootgroup,
    recover_two_layer, FiberMethod, FiberOptions, FiberResult, ProjectiveRootSet,
};
pub use flow::{
    compare_flows, dataset_to_quadratic, hessian_params, integrate_function_flow, integrate_param_flow,
    loss_grad_function, loss_grad_params, strict_saddle_check, zero_avoidance_experiment, Dataset, QuadraticLoss,
    Trajectory,
};
pub use invariants::{
    delta_invariants, fc_delta_matrices, pushforward_metric, rescale, solve_scaling, submersion_check,
    tangent_basis_theta_delta, DeltaVector,
};
pub use linalg::Matrix;
pub use ode::Integrator;
pub use ntk::{directional_derivative, jacobian_blocks, ntk, ntk_apply, ntk_of_function, JacobianBlocks, NtkMatrix};
pub use poly::{from_poly, poly_multiply, to_poly, SparsePoly};
pub use scalar::Scalar;
pub use tensor::{EndToEndFilter, FilterTensor, Tensor};

/// Floating-point scalar used by the numerical routines.
pub type Real = f64;
/// Exact scalar for symbolic checks.
pub type Rational = num_rational::BigRational;

pub type Tensor64 = Tensor<Real>;
pub type TensorQ = Tensor<Rational>;
pub type ParamTuple64 = ParamTuple<Real>;
pub type ParamTupleQ = ParamTuple<Rational>;
pub type Matrix64 = Matrix<Real>;
pub type MatrixQ = Matrix<Rational>;
pub type NtkMatrix64 = NtkMatrix<Real>;
pub type NtkMatrixQ = NtkMatrix<Rational>;
