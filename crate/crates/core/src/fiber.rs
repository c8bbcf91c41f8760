//! Recovering the parameters that compose to a given end-to-end filter.
//!
//! For one-dimensional signals the layer polynomials are univariate after
//! dehomogenizing (`x = 1`), so a factorization is a grouping of the roots of
//! the end-to-end polynomial: the layer with sparse exponent `t` owns whole
//! orbits `{r, r*zeta, .., r*zeta^(t-1)}` under the `t`-th roots of unity and
//! sees each orbit as the single root `r^t`. Real factors additionally need
//! orbits to come in complex-conjugate pairs. The grouping is searched
//! exhaustively, layer by layer from the coarsest lattice down.
//!
//! Every method returns one canonical representative per scaling class: all
//! layers except the last have unit norm and a positive first significant
//! entry, and the last layer absorbs the scale.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{compose, Architecture, ParamTuple};
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, RANK_RTOL};
use crate::lsq::{levenberg_marquardt, LmOptions};
use crate::ntk::jacobian_f64;
use crate::tensor::{EndToEndFilter, Tensor};

/// Coefficients below this fraction of the largest one count as zero.
pub const COEF_ZERO_RTOL: f64 = 1e-12;
/// Roots closer than this (relative) are one root with multiplicity.
pub const ROOT_CLUSTER_TOL: f64 = 1e-6;
/// Relative tolerance when matching roots into orbits.
pub const ORBIT_TOL: f64 = 1e-7;
/// A candidate factorization is accepted if `||mu(theta) - v|| <= RESIDUAL_RTOL * ||v||`.
pub const RESIDUAL_RTOL: f64 = 1e-8;
/// Upper bound on the number of groupings explored before giving up.
pub const MAX_GROUPINGS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiberMethod {
    ClosedForm,
    RootGroup,
    Numeric,
    Auto,
}

impl FromStr for FiberMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" | "closed-form" => Ok(Self::ClosedForm),
            "rootgroup" | "root_group" | "root-group" => Ok(Self::RootGroup),
            "numeric" => Ok(Self::Numeric),
            "auto" => Ok(Self::Auto),
            other => Err(Error::Parse(format!("unknown fiber method {other:?}"))),
        }
    }
}

impl fmt::Display for FiberMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ClosedForm => "closed_form",
            Self::RootGroup => "rootgroup",
            Self::Numeric => "numeric",
            Self::Auto => "auto",
        })
    }
}

#[derive(Clone, Debug)]
pub struct FiberOptions {
    /// Random restarts for the numeric method.
    pub attempts: usize,
    pub seed: u64,
}

impl Default for FiberOptions {
    fn default() -> Self {
        Self { attempts: 64, seed: 0 }
    }
}

/// Roots of the homogeneous end-to-end polynomial in `P^1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectiveRootSet {
    /// Roots `y` of `p(1, y)` other than zero, with multiplicities.
    pub finite: Vec<(Complex64, usize)>,
    /// Multiplicity of `(1:0)`, present when the leading coefficient vanishes.
    pub at_zero: usize,
    /// Multiplicity of `(0:1)`, present when the last coefficient vanishes.
    pub at_infinity: usize,
}

impl ProjectiveRootSet {
    pub fn degree(&self) -> usize {
        self.finite.iter().map(|(_, m)| m).sum::<usize>() + self.at_zero + self.at_infinity
    }
}

#[derive(Clone, Debug)]
pub struct FiberResult {
    pub method: FiberMethod,
    /// One canonical point per scaling class.
    pub representatives: Vec<ParamTuple<f64>>,
    /// Jacobian rank at each representative.
    pub ranks: Vec<usize>,
    /// `||mu(theta) - v|| / ||v||` for each representative.
    pub residuals: Vec<f64>,
    pub roots: Option<ProjectiveRootSet>,
}

impl FiberResult {
    pub fn class_count(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_unique(&self) -> bool {
        self.representatives.len() == 1
    }

    fn build(
        arch: &Architecture,
        v: &EndToEndFilter<f64>,
        method: FiberMethod,
        representatives: Vec<ParamTuple<f64>>,
        roots: Option<ProjectiveRootSet>,
    ) -> Result<Self> {
        let mut ranks = Vec::with_capacity(representatives.len());
        let mut residuals = Vec::with_capacity(representatives.len());
        for theta in &representatives {
            ranks.push(numerical_rank(&jacobian_f64(arch, theta)?, RANK_RTOL));
            residuals.push(relative_residual(arch, theta, v));
        }
        Ok(Self {
            method,
            representatives,
            ranks,
            residuals,
            roots,
        })
    }
}

pub fn recover_fiber(
    v: &EndToEndFilter<f64>,
    arch: &Architecture,
    method: FiberMethod,
    options: &FiberOptions,
) -> Result<FiberResult> {
    check_target(v, arch)?;
    let method = match method {
        FiberMethod::Auto if is_two_layer_example(arch) => FiberMethod::ClosedForm,
        FiberMethod::Auto if arch.signal_dim() == 1 => FiberMethod::RootGroup,
        FiberMethod::Auto => FiberMethod::Numeric,
        m => m,
    };
    match method {
        FiberMethod::ClosedForm => recover_two_layer(v, arch),
        FiberMethod::RootGroup => recover_fiber_rootgroup(v, arch),
        FiberMethod::Numeric => invert_numeric(v, arch, options.attempts, options.seed),
        FiberMethod::Auto => unreachable!("resolved above"),
    }
}

fn check_target(v: &EndToEndFilter<f64>, arch: &Architecture) -> Result<()> {
    let shape = arch.end_to_end_shape();
    if v.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "end-to-end filter of shape {:?}, architecture expects {shape:?}",
            v.shape()
        )));
    }
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse("end-to-end filter has non-finite entries".into()));
    }
    if v.norm() == 0.0 {
        return Err(Error::NoFactorization(
            "the zero filter has a fiber of positive dimension; no finite set of representatives".into(),
        ));
    }
    Ok(())
}

/// Architecture `k = (3, 2)`, `s = (2, 1)` for one-dimensional signals.
fn is_two_layer_example(arch: &Architecture) -> bool {
    arch.signal_dim() == 1
        && arch.depth() == 2
        && arch.layers()[0].shape == [3]
        && arch.layers()[0].stride.components() == [2]
        && arch.layers()[1].shape == [2]
}

fn relative_residual(arch: &Architecture, theta: &ParamTuple<f64>, v: &EndToEndFilter<f64>) -> f64 {
    match compose(arch, theta) {
        Ok(mu) => mu.sub(v).map(|d| d.norm() / v.norm()).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    }
}

/// Closed-form fiber for `k = (3, 2)`, `s = (2, 1)`.
///
/// On the hypersurface `v0 v3^2 + v1^2 v4 - v1 v2 v3 = 0` with `v1, v3` not
/// both zero, `b = (v1, v3)` and `a = (v0/v1, 1, v4/v3)`, with the obvious
/// substitutes when one of `v1, v3` vanishes. When both vanish the point is
/// singular and the general root grouping is used.
pub fn recover_two_layer(v: &EndToEndFilter<f64>, arch: &Architecture) -> Result<FiberResult> {
    if !is_two_layer_example(arch) {
        return Err(Error::InvalidArchitecture(
            "the closed form needs one-dimensional layers with k = (3, 2) and s = (2, 1)".into(),
        ));
    }
    check_target(v, arch)?;
    let x = v.data();
    let scale = v.norm();
    let equation = x[0] * x[3] * x[3] + x[1] * x[1] * x[4] - x[1] * x[2] * x[3];
    let residual = equation.abs() / scale.powi(3);
    if residual > RESIDUAL_RTOL {
        return Err(Error::NotOnManifold { residual });
    }
    let tiny = COEF_ZERO_RTOL * scale;
    let (v1_zero, v3_zero) = (x[1].abs() <= tiny, x[3].abs() <= tiny);
    let (a, b) = match (v1_zero, v3_zero) {
        (false, false) => (vec![x[0] / x[1], 1.0, x[4] / x[3]], vec![x[1], x[3]]),
        (true, false) => (vec![x[2], x[3], x[4]], vec![0.0, 1.0]),
        (false, true) => (vec![x[0], x[1], x[2]], vec![1.0, 0.0]),
        (true, true) => {
            debug!("v1 = v3 = 0: singular point, falling back to root grouping");
            let mut res = recover_fiber_rootgroup(v, arch)?;
            res.method = FiberMethod::ClosedForm;
            return Ok(res);
        }
    };
    let theta = ParamTuple::from_vecs(arch, vec![a, b])?;
    let theta = canonical_representative(&theta);
    FiberResult::build(arch, v, FiberMethod::ClosedForm, vec![theta], None)
}

fn horner(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// Projective roots, plus the finite nonzero roots listed with multiplicity
/// (members of one cluster snapped to the cluster mean).
fn roots_with_multiplicity(v: &[f64]) -> Result<(ProjectiveRootSet, Vec<Complex64>)> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Err(Error::NoFactorization("zero polynomial".into()));
    }
    let tol = COEF_ZERO_RTOL * scale;
    let at_zero = v.iter().take_while(|x| x.abs() <= tol).count();
    let at_infinity = v.iter().rev().take_while(|x| x.abs() <= tol).count();
    let c = &v[at_zero..v.len() - at_infinity];
    let d = c.len() - 1;
    let mut roots: Vec<Complex64> = Vec::with_capacity(d);
    if d > 0 {
        let mut companion = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            if i + 1 < d {
                companion[(i + 1, i)] = 1.0;
            }
            companion[(i, d - 1)] = -c[i] / c[d];
        }
        for mut z in companion.complex_eigenvalues().iter().copied() {
            for _ in 0..5 {
                let (p, dp) = horner(c, z);
                if dp.norm() == 0.0 {
                    break;
                }
                let next = z - p / dp;
                if !(next.re.is_finite() && next.im.is_finite()) || horner(c, next).0.norm() >= p.norm() {
                    break;
                }
                z = next;
            }
            roots.push(z);
        }
    }
    // Single-linkage clustering.
    let n = roots.len();
    let mut label: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..i {
            let tol = ROOT_CLUSTER_TOL * roots[i].norm().max(roots[j].norm()).max(1e-300);
            if (roots[i] - roots[j]).norm() <= tol {
                let (a, b) = (label[i], label[j]);
                for l in label.iter_mut() {
                    if *l == a {
                        *l = b;
                    }
                }
            }
        }
    }
    let mut finite: Vec<(Complex64, usize)> = Vec::new();
    let mut snapped = vec![Complex64::new(0.0, 0.0); n];
    let mut seen: Vec<usize> = Vec::new();
    for i in 0..n {
        if seen.contains(&label[i]) {
            continue;
        }
        seen.push(label[i]);
        let members: Vec<usize> = (0..n).filter(|&j| label[j] == label[i]).collect();
        let mean = members.iter().map(|&j| roots[j]).sum::<Complex64>() / members.len() as f64;
        for &j in &members {
            snapped[j] = mean;
        }
        finite.push((mean, members.len()));
    }
    Ok((
        ProjectiveRootSet {
            finite,
            at_zero,
            at_infinity,
        },
        snapped,
    ))
}

/// Projective roots of `p(x, y) = sum_i v_i x^(k-1-i) y^i` for a one-dimensional filter.
pub fn projective_roots(v: &[f64]) -> Result<ProjectiveRootSet> {
    Ok(roots_with_multiplicity(v)?.0)
}

#[derive(Clone, Debug)]
struct Pool {
    finite: Vec<Complex64>,
    at_zero: usize,
    at_infinity: usize,
}

#[derive(Clone, Debug)]
enum UnitKind {
    Real(f64),
    Pair(Complex64),
    Zero,
    Infinity,
}

impl UnitKind {
    fn degree(&self) -> usize {
        match self {
            Self::Pair(_) => 2,
            _ => 1,
        }
    }
}

/// Interchangeable units of one kind and the pool roots each instance consumes.
#[derive(Clone, Debug)]
struct UnitType {
    kind: UnitKind,
    instances: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default)]
struct LayerRoots {
    roots: Vec<Complex64>,
    zeros: usize,
    infinities: usize,
}

fn close(a: Complex64, b: Complex64, rtol: f64) -> bool {
    (a - b).norm() <= rtol * a.norm().max(b.norm())
}

fn unit_types(pool: &Pool, t: usize) -> Vec<UnitType> {
    let n = pool.finite.len();
    let zeta = Complex64::from_polar(1.0, 2.0 * PI / t as f64);
    let mut used = vec![false; n];
    let mut orbits: Vec<(Complex64, Vec<usize>)> = Vec::new();
    for i in 0..n {
        if used[i] {
            continue;
        }
        let r = pool.finite[i];
        let mut members = vec![i];
        let mut target = r;
        for _ in 1..t {
            target *= zeta;
            let best = (0..n)
                .filter(|&j| !used[j] && !members.contains(&j))
                .min_by(|&a, &b| {
                    (pool.finite[a] - target)
                        .norm()
                        .total_cmp(&(pool.finite[b] - target).norm())
                });
            match best {
                Some(j) if close(pool.finite[j], target, ORBIT_TOL) => members.push(j),
                _ => break,
            }
        }
        if members.len() == t {
            for &j in &members {
                used[j] = true;
            }
            let rho = members.iter().map(|&j| pool.finite[j].powu(t as u32)).sum::<Complex64>() / t as f64;
            orbits.push((rho, members));
        }
    }

    let rtol = ORBIT_TOL * t as f64;
    let mut units: Vec<(UnitKind, Vec<usize>)> = Vec::new();
    let mut paired = vec![false; orbits.len()];
    for i in 0..orbits.len() {
        if paired[i] {
            continue;
        }
        let (rho, members) = &orbits[i];
        if rho.im.abs() <= rtol * rho.norm() {
            paired[i] = true;
            units.push((UnitKind::Real(rho.re), members.clone()));
            continue;
        }
        let partner = (i + 1..orbits.len()).find(|&j| !paired[j] && close(orbits[j].0, rho.conj(), rtol));
        if let Some(j) = partner {
            paired[i] = true;
            paired[j] = true;
            let upper = if rho.im > 0.0 { *rho } else { orbits[j].0 };
            let mut all = members.clone();
            all.extend(&orbits[j].1);
            units.push((UnitKind::Pair(upper), all));
        }
    }

    let mut types: Vec<UnitType> = Vec::new();
    for (kind, members) in units {
        let existing = types.iter_mut().find(|ty| match (&ty.kind, &kind) {
            (UnitKind::Real(a), UnitKind::Real(b)) => close((*a).into(), (*b).into(), rtol),
            (UnitKind::Pair(a), UnitKind::Pair(b)) => close(*a, *b, rtol),
            _ => false,
        });
        match existing {
            Some(ty) => ty.instances.push(members),
            None => types.push(UnitType {
                kind,
                instances: vec![members],
            }),
        }
    }
    for (kind, count) in [(UnitKind::Zero, pool.at_zero / t), (UnitKind::Infinity, pool.at_infinity / t)] {
        if count > 0 {
            types.push(UnitType {
                kind,
                instances: vec![Vec::new(); count],
            });
        }
    }
    types
}

/// All count vectors `c` with `c_j <= available_j` and `sum c_j deg_j == target`.
fn count_vectors(types: &[UnitType], target: usize) -> Vec<Vec<usize>> {
    fn rec(types: &[UnitType], j: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if j == types.len() {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        let deg = types[j].kind.degree();
        let max = types[j].instances.len().min(left / deg);
        for c in 0..=max {
            cur.push(c);
            rec(types, j + 1, left - c * deg, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(types, 0, target, &mut Vec::new(), &mut out);
    out
}

struct Search<'a> {
    arch: &'a Architecture,
    order: Vec<usize>,
    exponents: Vec<usize>,
    found: Vec<Vec<LayerRoots>>,
}

impl Search<'_> {
    fn run(&mut self, step: usize, pool: Pool, chosen: &mut Vec<LayerRoots>) -> Result<()> {
        if step == self.order.len() {
            if pool.finite.is_empty() && pool.at_zero == 0 && pool.at_infinity == 0 {
                if self.found.len() >= MAX_GROUPINGS {
                    return Err(Error::AmbiguousGrouping(format!(
                        "more than {MAX_GROUPINGS} root groupings"
                    )));
                }
                self.found.push(chosen.clone());
            }
            return Ok(());
        }
        let l = self.order[step];
        let t = self.exponents[l];
        let need = self.arch.layers()[l].shape[0] - 1;
        let types = unit_types(&pool, t);
        for counts in count_vectors(&types, need) {
            let mut layer = LayerRoots::default();
            let mut remove: Vec<usize> = Vec::new();
            for (ty, &c) in types.iter().zip(&counts) {
                for inst in &ty.instances[..c] {
                    remove.extend(inst);
                    match ty.kind {
                        UnitKind::Real(r) => layer.roots.push(r.into()),
                        UnitKind::Pair(z) => layer.roots.extend([z, z.conj()]),
                        UnitKind::Zero => layer.zeros += 1,
                        UnitKind::Infinity => layer.infinities += 1,
                    }
                }
            }
            let next = Pool {
                finite: pool
                    .finite
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !remove.contains(i))
                    .map(|(_, z)| *z)
                    .collect(),
                at_zero: pool.at_zero - layer.zeros * t,
                at_infinity: pool.at_infinity - layer.infinities * t,
            };
            chosen[l] = layer;
            self.run(step + 1, next, chosen)?;
        }
        Ok(())
    }
}

/// Monic coefficients (ascending) of `z^zeros prod (z - rho)`, padded with
/// `infinities` zeros at the top.
fn layer_filter(layer: &LayerRoots) -> Vec<f64> {
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for &rho in &layer.roots {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (i, &c) in poly.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= c * rho;
        }
        poly = next;
    }
    let mut w = vec![0.0; layer.zeros];
    w.extend(poly.iter().map(|c| c.re));
    w.extend(std::iter::repeat_n(0.0, layer.infinities));
    w
}

/// Rescales the last layer so that `mu(theta)` best matches `v`.
fn fit_last_scale(arch: &Architecture, theta: ParamTuple<f64>, v: &EndToEndFilter<f64>) -> Result<ParamTuple<f64>> {
    let mu = compose(arch, &theta)?;
    let denom = mu.norm_sq();
    if denom == 0.0 {
        return Ok(theta);
    }
    let c = mu.dot(v) / denom;
    let h = theta.depth() - 1;
    let last = theta.filter(h).scaled(&c);
    Ok(theta.with_layer(h, last))
}

/// Gauss-Newton polish of a nearly exact factorization.
fn polish(arch: &Architecture, theta: &ParamTuple<f64>, v: &EndToEndFilter<f64>) -> Result<ParamTuple<f64>> {
    let target = v.data().to_vec();
    let residual = |x: &DVector<f64>| -> DVector<f64> {
        let th = ParamTuple::from_flat(arch, x.as_slice()).expect("length matches");
        let mu = compose(arch, &th).expect("valid");
        DVector::from_iterator(target.len(), mu.data().iter().zip(&target).map(|(a, b)| a - b))
    };
    let eval = |x: &DVector<f64>| {
        let th = ParamTuple::from_flat(arch, x.as_slice()).expect("length matches");
        (residual(x), jacobian_f64(arch, &th).expect("valid"))
    };
    let res = levenberg_marquardt(
        DVector::from_vec(theta.flatten()),
        eval,
        residual,
        &LmOptions {
            max_iter: 50,
            target: 1e-3 * RESIDUAL_RTOL * v.norm(),
            ..Default::default()
        },
    );
    ParamTuple::from_flat(arch, res.x.as_slice())
}

/// All factorizations of a one-dimensional end-to-end filter, one per scaling class.
pub fn enumerate_factorizations(v: &EndToEndFilter<f64>, arch: &Architecture) -> Result<Vec<ParamTuple<f64>>> {
    Ok(rootgroup(v, arch)?.0)
}

fn rootgroup(v: &EndToEndFilter<f64>, arch: &Architecture) -> Result<(Vec<ParamTuple<f64>>, ProjectiveRootSet)> {
    if arch.signal_dim() != 1 {
        return Err(Error::InvalidArchitecture(
            "root grouping needs one-dimensional signals; use the numeric method".into(),
        ));
    }
    check_target(v, arch)?;
    let (roots, snapped) = roots_with_multiplicity(v.data())?;
    let exponents: Vec<usize> = arch.sparse_exponents().iter().map(|t| t[0]).collect();
    let mut order: Vec<usize> = (0..arch.depth()).collect();
    order.sort_by(|&a, &b| exponents[b].cmp(&exponents[a]).then(b.cmp(&a)));
    let mut search = Search {
        arch,
        order,
        exponents,
        found: Vec::new(),
    };
    let pool = Pool {
        finite: snapped,
        at_zero: roots.at_zero,
        at_infinity: roots.at_infinity,
    };
    search.run(0, pool, &mut vec![LayerRoots::default(); arch.depth()])?;
    debug!("{} candidate groupings", search.found.len());

    let mut classes: Vec<ParamTuple<f64>> = Vec::new();
    let mut best = f64::INFINITY;
    for grouping in &search.found {
        let theta = ParamTuple::from_vecs(arch, grouping.iter().map(layer_filter).collect())?;
        let mut theta = fit_last_scale(arch, theta, v)?;
        let mut r = relative_residual(arch, &theta, v);
        if r > RESIDUAL_RTOL && r < 1e-3 {
            theta = polish(arch, &theta, v)?;
            r = relative_residual(arch, &theta, v);
        }
        best = best.min(r);
        if r <= RESIDUAL_RTOL {
            push_unique(&mut classes, canonical_representative(&theta), &[]);
        }
    }
    if classes.is_empty() {
        return Err(Error::NoFactorization(format!(
            "no grouping of the {} roots reproduces the filter (best relative residual {best:.3e})",
            roots.degree()
        )));
    }
    Ok((classes, roots))
}

pub fn recover_fiber_rootgroup(v: &EndToEndFilter<f64>, arch: &Architecture) -> Result<FiberResult> {
    let (classes, roots) = rootgroup(v, arch)?;
    FiberResult::build(arch, v, FiberMethod::RootGroup, classes, Some(roots))
}

/// Unit-norm layers `1..H-1` with a positive first significant entry; the
/// last layer carries the scale.
pub fn canonical_representative(theta: &ParamTuple<f64>) -> ParamTuple<f64> {
    let h = theta.depth();
    let mut filters = theta.filters().to_vec();
    let mut carry = 1.0;
    for w in filters.iter_mut().take(h - 1) {
        let norm = w.norm();
        if norm == 0.0 {
            continue;
        }
        let max = w.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let first = w.data().iter().find(|x| x.abs() > 1e-8 * max).copied().unwrap_or(1.0);
        let c = first.signum() / norm;
        *w = w.scaled(&c);
        carry /= c;
    }
    filters[h - 1] = filters[h - 1].scaled(&carry);
    ParamTuple::from_filters_unchecked(filters)
}

fn same_point(a: &ParamTuple<f64>, b: &ParamTuple<f64>) -> bool {
    let (x, y) = (a.flatten(), b.flatten());
    let scale = x.iter().chain(&y).fold(1.0f64, |m, z| m.max(z.abs()));
    x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-6 * scale)
}

fn push_unique(classes: &mut Vec<ParamTuple<f64>>, theta: ParamTuple<f64>, perms: &[Vec<usize>]) {
    let duplicate = classes.iter().any(|c| {
        same_point(c, &theta)
            || perms.iter().any(|p| {
                let permuted = ParamTuple::from_filters_unchecked(p.iter().map(|&i| theta.filter(i).clone()).collect());
                same_point(c, &canonical_representative(&permuted))
            })
    });
    if !duplicate {
        classes.push(theta);
    }
}

/// Non-identity layer permutations generated by swaps of interchangeable layers.
pub fn swap_permutations(arch: &Architecture) -> Vec<Vec<usize>> {
    let h = arch.depth();
    let mut class_of: Vec<usize> = (0..h).collect();
    for l in 0..h {
        for big_l in l + 1..h {
            if arch.swap_eligible(l, big_l) {
                let (a, b) = (class_of[big_l], class_of[l]);
                for c in class_of.iter_mut() {
                    if *c == a {
                        *c = b;
                    }
                }
            }
        }
    }
    let mut perms: Vec<Vec<usize>> = vec![(0..h).collect()];
    let mut classes: Vec<usize> = class_of.clone();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let members: Vec<usize> = (0..h).filter(|&i| class_of[i] == class).collect();
        if members.len() < 2 {
            continue;
        }
        let arrangements = permutations(&members);
        let members = &members;
        perms = perms
            .iter()
            .flat_map(|p| {
                arrangements.iter().map(move |arr| {
                    let mut q = p.clone();
                    for (slot, &src) in members.iter().zip(arr) {
                        q[*slot] = src;
                    }
                    q
                })
            })
            .collect();
    }
    perms.retain(|p| p.iter().enumerate().any(|(i, &j)| i != j));
    perms
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Multi-start damped Gauss-Newton from standard normal starting points.
///
/// Restarts run in parallel but each uses its own seeded generator, so the
/// result depends only on `seed` and `attempts`.
pub fn invert_numeric(v: &EndToEndFilter<f64>, arch: &Architecture, attempts: usize, seed: u64) -> Result<FiberResult> {
    check_target(v, arch)?;
    let norm = v.norm();
    let unit = v.scaled(&(1.0 / norm));
    let n = arch.param_count();
    let outcomes: Vec<(f64, Vec<f64>)> = (0..attempts)
        .into_par_iter()
        .map(|attempt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let x0: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let theta0 = ParamTuple::from_flat(arch, &x0).expect("length matches");
            let theta = fit_last_scale(arch, theta0, &unit).expect("valid");
            let polished = descend(arch, &theta, &unit);
            (relative_residual(arch, &polished, &unit), polished.flatten())
        })
        .collect();
    // Swapping interchangeable layers keeps the end-to-end filter. For D >= 2
    // swapped tuples count as one class; for D = 1 each image is a class of
    // its own, and adding the images covers basins the restarts missed.
    let perms = swap_permutations(arch);
    let quotient = arch.signal_dim() >= 2;
    let mut classes: Vec<ParamTuple<f64>> = Vec::new();
    let mut best = f64::INFINITY;
    for (r, x) in &outcomes {
        best = best.min(*r);
        if *r <= RESIDUAL_RTOL {
            let theta = ParamTuple::from_flat(arch, x)?;
            let h = theta.depth() - 1;
            let theta = theta.with_layer(h, theta.filter(h).scaled(&norm));
            if quotient {
                push_unique(&mut classes, canonical_representative(&theta), &perms);
                continue;
            }
            push_unique(&mut classes, canonical_representative(&theta), &[]);
            for p in &perms {
                let image = ParamTuple::from_filters_unchecked(p.iter().map(|&i| theta.filter(i).clone()).collect());
                if relative_residual(arch, &image, v) <= RESIDUAL_RTOL {
                    push_unique(&mut classes, canonical_representative(&image), &[]);
                }
            }
        }
    }
    if classes.is_empty() {
        return Err(Error::FiberNotFound {
            attempts,
            best_residual: best,
        });
    }
    FiberResult::build(arch, v, FiberMethod::Numeric, classes, None)
}

fn descend(arch: &Architecture, theta: &ParamTuple<f64>, v: &Tensor<f64>) -> ParamTuple<f64> {
    let target = v.data().to_vec();
    let residual = |x: &DVector<f64>| -> DVector<f64> {
        let th = ParamTuple::from_flat(arch, x.as_slice()).expect("length matches");
        let mu = compose(arch, &th).expect("valid");
        DVector::from_iterator(target.len(), mu.data().iter().zip(&target).map(|(a, b)| a - b))
    };
    let eval = |x: &DVector<f64>| {
        let th = ParamTuple::from_flat(arch, x.as_slice()).expect("length matches");
        (residual(x), jacobian_f64(arch, &th).expect("valid"))
    };
    let res = levenberg_marquardt(
        DVector::from_vec(theta.flatten()),
        eval,
        residual,
        &LmOptions {
            max_iter: 500,
            target: 1e-3 * RESIDUAL_RTOL,
            ..Default::default()
        },
    );
    ParamTuple::from_flat(arch, res.x.as_slice()).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn roots_of_simple_polynomials() {
        let r = projective_roots(&[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!((r.at_zero, r.at_infinity), (1, 1));
        assert_eq!(r.finite.len(), 1);
        assert!((r.finite[0].0 + 1.0).norm() < 1e-12);
        let r = projective_roots(&[1.0, -2.0, 1.0]).unwrap();
        assert_eq!(r.finite.len(), 1);
        assert_eq!(r.finite[0].1, 2);
        assert!((r.finite[0].0 - 1.0).norm() < 1e-12);
        assert_eq!(r.degree(), 2);
    }

    #[test]
    fn stride_one_has_three_classes() {
        let arch = Architecture::one_dim(&[(3, 1), (2, 1)]).unwrap();
        let res = recover_fiber_rootgroup(&vec_t(&[0.0, 1.0, 1.0, 0.0]), &arch).unwrap();
        assert_eq!(res.class_count(), 3);
        assert!(res.residuals.iter().all(|&r| r <= RESIDUAL_RTOL));
    }

    #[test]
    fn conjugate_pair_forces_single_class() {
        let arch = Architecture::one_dim(&[(3, 1), (2, 1)]).unwrap();
        let res = recover_fiber_rootgroup(&vec_t(&[1.0, 0.0, 1.0, 0.0]), &arch).unwrap();
        assert_eq!(res.class_count(), 1);
        let theta = &res.representatives[0];
        let s = 0.5f64.sqrt();
        assert!(theta.filter(0).max_abs_diff(&vec_t(&[s, 0.0, s])) < 1e-12);
        assert!(theta.filter(1).max_abs_diff(&vec_t(&[1.0 / s, 0.0])) < 1e-12);
    }

    #[test]
    fn two_layer_closed_form_matches_rootgroup() {
        let arch = Architecture::one_dim(&[(3, 2), (2, 1)]).unwrap();
        let theta = ParamTuple::from_vecs(&arch, vec![vec![1.0, 2.0, -1.0], vec![0.5, 3.0]]).unwrap();
        let v = compose(&arch, &theta).unwrap();
        let a = recover_two_layer(&v, &arch).unwrap();
        let b = recover_fiber_rootgroup(&v, &arch).unwrap();
        assert_eq!(b.class_count(), 1);
        assert!(same_point(&a.representatives[0], &b.representatives[0]));
        assert!(same_point(&a.representatives[0], &canonical_representative(&theta)));
        let off = vec_t(&[1.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(matches!(recover_two_layer(&off, &arch), Err(Error::NotOnManifold { .. })));
    }

    #[test]
    fn swap_group_sizes() {
        let arch = Architecture::new(vec![
            crate::conv::LayerSpec::new(vec![2, 2], vec![1, 1]).unwrap(),
            crate::conv::LayerSpec::new(vec![2, 2], vec![1, 1]).unwrap(),
            crate::conv::LayerSpec::new(vec![2, 2], vec![1, 1]).unwrap(),
        ])
        .unwrap();
        assert_eq!(swap_permutations(&arch).len(), 5);
        let arch = Architecture::one_dim(&[(3, 2), (2, 1)]).unwrap();
        assert!(swap_permutations(&arch).is_empty());
    }

    #[test]
    fn numeric_inversion_agrees_on_generic_point() {
        let arch = Architecture::one_dim(&[(3, 2), (2, 1)]).unwrap();
        let theta = ParamTuple::from_vecs(&arch, vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.7]]).unwrap();
        let v = compose(&arch, &theta).unwrap();
        let res = invert_numeric(&v, &arch, 16, 7).unwrap();
        assert_eq!(res.class_count(), 1);
        assert!(same_point(&res.representatives[0], &canonical_representative(&theta)));
    }
}
