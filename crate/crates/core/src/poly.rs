//! Sparse bihomogeneous polynomials in variable pairs `(x_m, y_m)`.
//!
//! A filter `w` of format `k` together with a sparse exponent `t` stands for
//! the polynomial whose coefficient `w[i]` multiplies
//! `prod_m x_m^{t_m (k_m - 1 - i_m)} y_m^{t_m i_m}`. Multiplying the layer
//! polynomials (with `t_l = s_1 ... s_{l-1}`) gives the polynomial of the
//! end-to-end filter with `t = 1`.

use std::fmt;

use num_integer::Integer;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{flat_index, indices, FilterTensor, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SparsePoly<T> {
    exponent: Vec<usize>,
    coeffs: Tensor<T>,
}

impl<T: Scalar> SparsePoly<T> {
    /// Wraps `coeffs` with the given sparse exponent.
    pub fn new(coeffs: Tensor<T>, exponent: Vec<usize>) -> Result<Self> {
        if exponent.len() != coeffs.dim() || exponent.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "sparse exponent {exponent:?} does not fit a {}-dimensional coefficient tensor",
                coeffs.dim()
            )));
        }
        Ok(Self { exponent, coeffs })
    }

    pub fn dim(&self) -> usize {
        self.exponent.len()
    }

    pub fn exponent(&self) -> &[usize] {
        &self.exponent
    }

    pub fn coeffs(&self) -> &Tensor<T> {
        &self.coeffs
    }

    /// Degree bound `k_m - 1` in the pair `(x_m^t, y_m^t)`.
    pub fn sparse_degree(&self) -> Vec<usize> {
        self.coeffs.shape().iter().map(|k| k - 1).collect()
    }

    /// Total degree `t_m (k_m - 1)` in each pair `(x_m, y_m)`.
    pub fn degree(&self) -> Vec<usize> {
        self.coeffs
            .shape()
            .iter()
            .zip(&self.exponent)
            .map(|(k, t)| (k - 1) * t)
            .collect()
    }

    /// Nonzero terms as `(per-dimension (x exponent, y exponent), coefficient)`.
    pub fn terms(&self) -> Vec<(Vec<(usize, usize)>, T)> {
        let deg = self.degree();
        indices(self.coeffs.shape())
            .zip(self.coeffs.data())
            .filter(|(_, c)| !c.is_zero_exact())
            .map(|(i, c)| {
                let mono = i
                    .iter()
                    .enumerate()
                    .map(|(m, &im)| {
                        let y = self.exponent[m] * im;
                        (deg[m] - y, y)
                    })
                    .collect();
                (mono, c.clone())
            })
            .collect()
    }
}

/// `pi_t(w)`.
pub fn to_poly<T: Scalar>(w: &FilterTensor<T>, t: &[usize]) -> Result<SparsePoly<T>> {
    SparsePoly::new(w.clone(), t.to_vec())
}

/// Inverse of [`to_poly`]: the coefficient tensor.
pub fn from_poly<T: Scalar>(p: &SparsePoly<T>) -> FilterTensor<T> {
    p.coeffs.clone()
}

/// Product of two sparse polynomials.
///
/// The result lives on the coarsest common exponent lattice
/// `gcd(t_p, t_q)` in each dimension, so it is again of the form `pi_t(v)`.
pub fn poly_multiply<T: Scalar>(p: &SparsePoly<T>, q: &SparsePoly<T>) -> Result<SparsePoly<T>> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cannot multiply polynomials in {} and {} variable pairs",
            p.dim(),
            q.dim()
        )));
    }
    let d = p.dim();
    let t: Vec<usize> = (0..d).map(|m| p.exponent[m].gcd(&q.exponent[m])).collect();
    let (dp, dq) = (p.degree(), q.degree());
    let shape: Vec<usize> = (0..d).map(|m| (dp[m] + dq[m]) / t[m] + 1).collect();
    let mut out = Tensor::zeros(&shape);
    let q_idx: Vec<Vec<usize>> = indices(q.coeffs.shape()).collect();
    let mut pos = vec![0; d];
    for (i, a) in indices(p.coeffs.shape()).zip(p.coeffs.data()) {
        if a.is_zero_exact() {
            continue;
        }
        for (j, b) in q_idx.iter().zip(q.coeffs.data()) {
            for m in 0..d {
                // y-degree of the product term, measured on the lattice t.
                pos[m] = (i[m] * p.exponent[m] + j[m] * q.exponent[m]) / t[m];
            }
            let slot: &mut T = &mut out.data_mut()[flat_index(&shape, &pos)];
            *slot = slot.clone() + a.clone() * b.clone();
        }
    }
    SparsePoly::new(out, t)
}

impl<T: Scalar> fmt::Display for SparsePoly<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms = self.terms();
        if terms.is_empty() {
            return write!(f, "0");
        }
        let single = self.dim() == 1;
        for (n, (mono, c)) in terms.iter().enumerate() {
            if n > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}")?;
            for (m, &(xe, ye)) in mono.iter().enumerate() {
                let sub = if single { String::new() } else { (m + 1).to_string() };
                for (var, e) in [("x", xe), ("y", ye)] {
                    match e {
                        0 => {}
                        1 => write!(f, "*{var}{sub}")?,
                        e => write!(f, "*{var}{sub}^{e}")?,
                    }
                }
            }
        }
        Ok(())
    }
}
