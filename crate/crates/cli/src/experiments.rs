//! Registry of the worked examples and the randomized property suites.

use nalgebra::DMatrix;
use ntk_geom::fiber::canonical_representative;
use ntk_geom::invariants::rescale_to_delta;
use ntk_geom::io::{matrix_to_json, params_to_json};
use ntk_geom::scalar::rat;
use ntk_geom::{
    compare_flows, compose, dataset_to_quadratic, delta_invariants, enumerate_factorizations, fc_balance,
    fc_compare_flows, fc_compose, fc_delta_matrices, fc_ntk_apply, fc_orthogonal_fiber_check, integrate_param_flow,
    ntk, ntk_of_function, recover_fiber, Architecture, Dataset, FcLoss, FiberMethod, FiberOptions, Integrator,
    Matrix, ParamTuple, QuadraticLoss, Rational, Scalar, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::report::{ExperimentReport, ReportBuilder};

pub const EXAMPLES: [&str; 4] = [
    "running-k1k2",
    "singular-ntk-pair",
    "stride-one-three-factorizations",
    "fc-counterexample",
];

pub fn reproduce(id: &str, seed: u64) -> Result<ExperimentReport> {
    match id {
        "running-k1k2" => running_k1k2(seed),
        "singular-ntk-pair" => singular_ntk_pair(seed),
        "stride-one-three-factorizations" => stride_one_three_factorizations(seed),
        "fc-counterexample" => fc_counterexample(seed),
        other => Err(CliError::UnknownExample {
            id: other.to_string(),
            known: EXAMPLES.join(", "),
        }),
    }
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn running() -> Architecture {
    Architecture::one_dim(&[(3, 2), (2, 1)]).expect("valid architecture")
}

fn stride_one() -> Architecture {
    Architecture::one_dim(&[(3, 1), (2, 1)]).expect("valid architecture")
}

fn small_rational(rng: &mut impl Rng, nonzero: bool) -> Rational {
    loop {
        let p: i64 = rng.random_range(-9..=9);
        if nonzero && p == 0 {
            continue;
        }
        return rat(p, rng.random_range(1..=5));
    }
}

pub fn normal_tuple(arch: &Architecture, rng: &mut impl Rng) -> ParamTuple<f64> {
    let flat: Vec<f64> = (0..arch.param_count()).map(|_| StandardNormal.sample(&mut *rng)).collect();
    ParamTuple::from_flat(arch, &flat).expect("length matches")
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut *rng));
    Matrix::from_nalgebra(&m.qr().q())
}

fn sq<T: Scalar>(x: &T) -> T {
    x.clone() * x.clone()
}

fn mul<T: Scalar>(x: &T, y: &T) -> T {
    x.clone() * y.clone()
}

/// The layer term of `a` in the running example, written in the entries of `b`.
fn running_k1<T: Scalar>(b: &[T]) -> Matrix<T> {
    let z = T::zero;
    let (b00, b01, b11) = (sq(&b[0]), mul(&b[0], &b[1]), sq(&b[1]));
    Matrix::from_rows(vec![
        vec![b00.clone(), z(), b01.clone(), z(), z()],
        vec![z(), b00.clone(), z(), b01.clone(), z()],
        vec![b01.clone(), z(), b00 + b11.clone(), z(), b01.clone()],
        vec![z(), b01.clone(), z(), b11.clone(), z()],
        vec![z(), z(), b01, z(), b11],
    ])
    .expect("rectangular")
}

/// The layer term of `b` in the running example, written in the entries of `a`.
fn running_k2<T: Scalar>(a: &[T]) -> Matrix<T> {
    let z = T::zero;
    let (a00, a01, a02, a11, a12, a22) =
        (sq(&a[0]), mul(&a[0], &a[1]), mul(&a[0], &a[2]), sq(&a[1]), mul(&a[1], &a[2]), sq(&a[2]));
    Matrix::from_rows(vec![
        vec![a00.clone(), a01.clone(), a02.clone(), z(), z()],
        vec![a01.clone(), a11.clone(), a12.clone(), z(), z()],
        vec![a02.clone(), a12.clone(), a00 + a22.clone(), a01.clone(), a02.clone()],
        vec![z(), z(), a01, a11, a12.clone()],
        vec![z(), z(), a02, a12, a22],
    ])
    .expect("rectangular")
}

/// The kernel of the stride-one example `(3, 1), (2, 1)` in the filter entries.
fn stride_one_kernel<T: Scalar>(a: &[T], b: &[T]) -> Matrix<T> {
    let (a00, a01, a02, a11, a12, a22) =
        (sq(&a[0]), mul(&a[0], &a[1]), mul(&a[0], &a[2]), sq(&a[1]), mul(&a[1], &a[2]), sq(&a[2]));
    let (b00, b01, b11) = (sq(&b[0]), mul(&b[0], &b[1]), sq(&b[1]));
    let e01 = a01.clone() + b01.clone();
    let e12 = a01 + a12.clone() + b01.clone();
    let e23 = a12 + b01;
    Matrix::from_rows(vec![
        vec![a00.clone() + b00.clone(), e01.clone(), a02.clone(), T::zero()],
        vec![e01, a00 + a11.clone() + b00.clone() + b11.clone(), e12.clone(), a02.clone()],
        vec![a02.clone(), e12, a11 + a22.clone() + b00 + b11.clone(), e23.clone()],
        vec![T::zero(), a02, e23, a22 + b11],
    ])
    .expect("rectangular")
}

fn rational_json(m: &Matrix<Rational>) -> Value {
    matrix_to_json(m)
}

fn relative_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1.0)
}

fn running_k1k2(seed: u64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("running-k1k2", seed);
    let arch = running();
    let mut rng = rng_for(seed);
    let points = 20;
    rep.input("architecture", ntk_geom::io::architecture_to_json(&arch));
    rep.input("points", points);

    let mut symbolic_ok = true;
    let mut sum_ok = true;
    let mut worst: f64 = 0.0;
    let mut first = None;
    for _ in 0..points {
        // Entries a_1, b_0, b_1 nonzero keep v_1 and v_3 nonzero.
        let a = vec![small_rational(&mut rng, false), small_rational(&mut rng, true), small_rational(&mut rng, false)];
        let b = vec![small_rational(&mut rng, true), small_rational(&mut rng, true)];
        let theta = ParamTuple::from_vecs(&arch, vec![a.clone(), b.clone()])?;
        let k = ntk(&arch, &theta)?;
        symbolic_ok &= k.layer_terms[0] == running_k1(&b) && k.layer_terms[1] == running_k2(&a);
        sum_ok &= k.matrix == k.layer_terms[0].add(&k.layer_terms[1])?;
        if first.is_none() {
            first = Some((params_to_json(&arch, &theta), rational_json(&k.layer_terms[0]), rational_json(&k.layer_terms[1])));
        }

        // Route through the function alone: a = (v0/v1, 1, v4/v3), b = (v1, v3)
        // rescaled by the positive root lambda^2 of the invariant equation.
        let v = compose(&arch, &theta)?.to_f64();
        let delta = delta_invariants(&theta)[0].to_f64();
        let x = v.data();
        let a_hat = [x[0] / x[1], 1.0, x[4] / x[3]];
        let b_hat = [x[1], x[3]];
        let (na, nb) = (a_hat.iter().map(|t| t * t).sum::<f64>(), b_hat.iter().map(|t| t * t).sum::<f64>());
        let lambda_sq = (-delta + (delta * delta + 4.0 * na * nb).sqrt()) / (2.0 * na);
        let closed = running_k1(&b_hat).scale(&(1.0 / lambda_sq)).add(&running_k2(&a_hat).scale(&lambda_sq))?;
        let exact = k.matrix.to_f64();
        let via_function = ntk_of_function(&arch, &v, &[delta])?.matrix;
        worst = worst.max(relative_diff(&closed, &exact)).max(relative_diff(&via_function, &exact));
    }
    rep.check(
        "layer terms match the symbolic matrices",
        symbolic_ok,
        format!("{points} rational points, exact comparison"),
    );
    rep.check("kernel is the sum of the layer terms", sum_ok, "exact");
    rep.check(
        "kernel from (v, delta) matches the parameter kernel",
        worst <= 1e-10,
        format!("max relative error {worst:.3e}"),
    );
    rep.residual("max_relative_error", worst);
    if let Some((params, k1, k2)) = first {
        rep.artifact("first_point", params);
        rep.artifact("first_k1", k1);
        rep.artifact("first_k2", k2);
    }
    Ok(rep.finish())
}

fn int_tuple(arch: &Architecture, filters: &[&[i64]]) -> Result<ParamTuple<Rational>> {
    let filters = filters.iter().map(|f| f.iter().map(|&x| rat(x, 1)).collect()).collect();
    Ok(ParamTuple::from_vecs(arch, filters)?)
}

fn singular_ntk_pair(seed: u64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("singular-ntk-pair", seed);
    let arch = running();
    let first = int_tuple(&arch, &[&[1, 0, 2], &[2, 1]])?;
    let second = int_tuple(&arch, &[&[2, 0, 1], &[1, 2]])?;
    rep.input("first", params_to_json(&arch, &first));
    rep.input("second", params_to_json(&arch, &second));

    let v1 = compose(&arch, &first)?;
    let v2 = compose(&arch, &second)?;
    rep.check("same end-to-end filter", v1 == v2, format!("{:?}", v1.data().iter().map(ToString::to_string).collect::<Vec<_>>()));
    let d1 = delta_invariants(&first);
    let d2 = delta_invariants(&second);
    rep.check("same invariants", d1 == d2, format!("delta = {}", d1[0]));

    let k1 = ntk(&arch, &first)?.matrix;
    let k2 = ntk(&arch, &second)?.matrix;
    let printed1 = Matrix::from_i64_rows(&[
        &[5, 0, 4, 0, 0],
        &[0, 4, 0, 2, 0],
        &[4, 0, 10, 0, 4],
        &[0, 2, 0, 1, 0],
        &[0, 0, 4, 0, 5],
    ]);
    let printed2 = Matrix::from_i64_rows(&[
        &[5, 0, 4, 0, 0],
        &[0, 1, 0, 2, 0],
        &[4, 0, 10, 0, 4],
        &[0, 2, 0, 4, 0],
        &[0, 0, 4, 0, 5],
    ]);
    rep.check("first kernel matches the printed matrix", k1 == printed1, "exact");
    rep.check("second kernel matches the printed matrix", k2 == printed2, "exact");
    let mut differing = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            if k1[(i, j)] != k2[(i, j)] {
                differing.push(json!([i, j]));
            }
        }
    }
    rep.check(
        "kernels differ exactly at (1,1) and (3,3)",
        differing == [json!([1, 1]), json!([3, 3])],
        differing.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" "),
    );
    rep.artifact("first_kernel", rational_json(&k1));
    rep.artifact("second_kernel", rational_json(&k2));
    rep.artifact("differing_entries", differing);
    Ok(rep.finish())
}

fn stride_one_three_factorizations(seed: u64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("stride-one-three-factorizations", seed);
    let arch = stride_one();
    let v = Tensor::vector(vec![0.0, 1.0, 1.0, 0.0]);
    rep.input("architecture", ntk_geom::io::architecture_to_json(&arch));
    rep.input("filter", json!([0, 1, 1, 0]));

    let q = 2f64.powf(0.25);
    let printed_factors: [([f64; 3], [f64; 2]); 3] = [
        ([0.0, q, 0.0], [1.0 / q, 1.0 / q]),
        ([1.0 / q, 1.0 / q, 0.0], [0.0, q]),
        ([0.0, 1.0 / q, 1.0 / q], [q, 0.0]),
    ];
    let printed_kernels: [[[i64; 4]; 4]; 3] = [
        [[1, 1, 0, 0], [1, 4, 1, 0], [0, 1, 4, 1], [0, 0, 1, 1]],
        [[1, 1, 0, 0], [1, 4, 1, 0], [0, 1, 3, 0], [0, 0, 0, 2]],
        [[2, 0, 0, 0], [0, 3, 1, 0], [0, 1, 4, 1], [0, 0, 1, 1]],
    ];

    let classes = enumerate_factorizations(&v, &arch)?;
    rep.check("three scaling classes", classes.len() == 3, format!("{} classes", classes.len()));

    let mut matched = [false; 3];
    let mut factor_err: f64 = 0.0;
    let mut kernel_err: f64 = 0.0;
    let mut formula_err: f64 = 0.0;
    let mut kernels = Vec::new();
    for theta in &classes {
        let balanced = rescale_to_delta(theta, &[0.0])?;
        let flat = balanced.flatten();
        // Match against the printed pair up to the joint sign flip (a, b) -> (-a, -b).
        let distance = |(a, b): &([f64; 3], [f64; 2]), sign: f64| {
            a.iter()
                .chain(b)
                .zip(&flat)
                .map(|(p, x)| (p - sign * x).abs())
                .fold(0.0, f64::max)
        };
        let (idx, err) = printed_factors
            .iter()
            .enumerate()
            .map(|(i, p)| (i, distance(p, 1.0).min(distance(p, -1.0))))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("three candidates");
        factor_err = factor_err.max(err);
        if matched[idx] {
            rep.check("each printed factorization matched once", false, format!("factorization {} matched twice", idx + 1));
        }
        matched[idx] = true;

        let k = ntk(&arch, &balanced)?.matrix;
        let target = Matrix::from_fn(4, 4, |i, j| printed_kernels[idx][i][j] as f64 / 2f64.sqrt());
        kernel_err = kernel_err.max(k.max_abs_diff(&target));
        let (a, b) = printed_factors[idx];
        formula_err = formula_err.max(stride_one_kernel(&a, &b).max_abs_diff(&target));
        kernels.push(matrix_to_json(&k));
    }
    rep.check(
        "balanced classes are the printed factorizations",
        matched.iter().all(|m| *m) && factor_err <= 1e-12,
        format!("max entry error {factor_err:.3e}"),
    );
    rep.check(
        "kernels are the printed matrices over sqrt 2",
        kernel_err <= 1e-12,
        format!("max entry error {kernel_err:.3e}"),
    );
    rep.check(
        "symbolic kernel formula reproduces the printed matrices",
        formula_err <= 1e-12,
        format!("max entry error {formula_err:.3e}"),
    );

    // The symbolic formula against the exact kernel at rational points.
    let mut rng = rng_for(seed);
    let mut exact_ok = true;
    for _ in 0..20 {
        let a: Vec<Rational> = (0..3).map(|_| small_rational(&mut rng, false)).collect();
        let b: Vec<Rational> = (0..2).map(|_| small_rational(&mut rng, false)).collect();
        let theta = ParamTuple::from_vecs(&arch, vec![a.clone(), b.clone()])?;
        exact_ok &= ntk(&arch, &theta)?.matrix == stride_one_kernel(&a, &b);
    }
    rep.check("symbolic kernel formula is exact", exact_ok, "20 rational points");

    rep.residual("factor_error", factor_err);
    rep.residual("kernel_error", kernel_err);
    rep.artifact(
        "classes",
        classes.iter().map(|t| params_to_json(&arch, t)).collect::<Vec<_>>(),
    );
    rep.artifact("balanced_kernels", kernels);
    Ok(rep.finish())
}

/// Two weight chains `(W_1, W_2)`.
type ChainPair = (Vec<Matrix<Rational>>, Vec<Matrix<Rational>>);

fn fc_pairs() -> Result<ChainPair> {
    let v = vec![Matrix::diag(&[rat(1, 1), rat(1, 2)]), Matrix::diag(&[rat(1, 1), rat(2, 1)])];
    let u = vec![
        Matrix::from_rows(vec![vec![rat(0, 1), rat(1, 1)], vec![rat(1, 2), rat(0, 1)]])?,
        Matrix::from_i64_rows(&[&[0, 2], &[1, 0]]),
    ];
    Ok((v, u))
}

/// The fixed part of the fully-connected counterexample.
fn fc_counterexample_checks(rep: &mut ReportBuilder) -> Result<ChainPair> {
    let (v, u) = fc_pairs()?;
    rep.input("v", v.iter().map(rational_json).collect::<Vec<_>>());
    rep.input("u", u.iter().map(rational_json).collect::<Vec<_>>());
    let identity = Matrix::<Rational>::identity(2);
    rep.check(
        "both products are the identity",
        fc_compose(&v)? == identity && fc_compose(&u)? == identity,
        "exact",
    );
    let dv = fc_delta_matrices(&v)?;
    let du = fc_delta_matrices(&u)?;
    let expect = Matrix::diag(&[rat(0, 1), rat(15, 4)]);
    rep.check(
        "both pairs have Delta = diag(0, 15/4)",
        dv[0] == expect && du[0] == expect,
        format!("{:?} and {:?}", dv[0].to_f64().to_rows(), du[0].to_f64().to_rows()),
    );
    let kv = fc_ntk_apply(&v, &identity)?;
    let ku = fc_ntk_apply(&u, &identity)?;
    let diff = kv.sub(&ku)?;
    rep.check(
        "kernels differ on the identity probe",
        !diff.is_zero(),
        format!("difference {:?}", diff.to_f64().to_rows()),
    );
    rep.residual("probe_difference_max", diff.to_f64().max_abs());
    rep.artifact("kernel_v", rational_json(&kv));
    rep.artifact("kernel_u", rational_json(&ku));
    rep.artifact("difference", rational_json(&diff));
    Ok((v, u))
}

fn fc_counterexample(seed: u64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("fc-counterexample", seed);
    fc_counterexample_checks(&mut rep)?;
    Ok(rep.finish())
}

/// `fc --check counterexample`: the fixed example plus the two layer flows.
pub fn fc_check_counterexample(seed: u64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("fc-counterexample-flows", seed);
    let (v, u) = fc_counterexample_checks(&mut rep)?;
    let mut rng = rng_for(seed);
    let loss = FcLoss::random(2, 2, 4, &mut rng);
    let t_max = 1.0;
    rep.input("t_max", t_max);
    let to_f64 = |ws: &[Matrix<Rational>]| ws.iter().map(Matrix::to_f64).collect::<Vec<_>>();
    let cv = fc_compare_flows(&to_f64(&v), &loss, t_max, Integrator::default())?;
    let cu = fc_compare_flows(&to_f64(&u), &loss, t_max, Integrator::default())?;
    rep.check(
        "the two parametrizations leave the balanced product flow differently",
        (cv.max_deviation - cu.max_deviation).abs() > 1e-6,
        format!("deviations {:.4e} and {:.4e}", cv.max_deviation, cu.max_deviation),
    );
    rep.residual("deviation_v", cv.max_deviation);
    rep.residual("deviation_u", cu.max_deviation);
    rep.residual("delta_drift", cv.max_delta_drift.max(cu.max_delta_drift));
    Ok(rep.finish())
}

/// `fc --check balanced-flow`: layer and product flows agree from balanced starts.
pub fn fc_check_balanced_flow(seed: u64, runs: usize) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("fc-balanced-flow", seed);
    let mut rng = rng_for(seed);
    let (t_max, depth) = (1.0, 3);
    rep.input("runs", runs);
    rep.input("t_max", t_max);
    rep.input("depth", depth);
    let (mut worst, mut drift): (f64, f64) = (0.0, 0.0);
    for _ in 0..runs {
        let w = normal_matrix(2, 2, &mut rng);
        let tuple = fc_balance(&w, depth)?;
        let loss = FcLoss::random(2, 2, 4, &mut rng);
        let cmp = fc_compare_flows(&tuple, &loss, t_max, Integrator::default())?;
        worst = worst.max(cmp.max_deviation);
        drift = drift.max(cmp.max_delta_drift);
    }
    rep.check("flows agree", worst <= 1e-4, format!("max deviation {worst:.3e}"));
    rep.check("balance is conserved", drift <= 1e-6, format!("max Delta drift {drift:.3e}"));
    rep.residual("max_deviation", worst);
    rep.residual("max_delta_drift", drift);
    Ok(rep.finish())
}

/// `fc --check orthogonal-fiber`: orthogonal moves keep the kernel, others do not.
pub fn fc_check_orthogonal_fiber(seed: u64, runs: usize) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("fc-orthogonal-fiber", seed);
    let mut rng = rng_for(seed);
    rep.input("runs", runs);
    let (mut product, mut balance, mut kernel) = (0f64, 0f64, 0f64);
    let mut all_preserved = true;
    let mut scaled_breaks = true;
    let mut identity_keeps = true;
    for _ in 0..runs {
        let n = rng.random_range(2..=3);
        let depth = rng.random_range(2..=4);
        let w = normal_matrix(n, n, &mut rng);
        let tuple = fc_balance(&w, depth)?;
        let gs: Vec<Matrix<f64>> = (1..depth).map(|_| random_orthogonal(n, &mut rng)).collect();
        let r = fc_orthogonal_fiber_check(&tuple, &gs)?;
        all_preserved &= r.product_preserved && r.balance_preserved && r.ntk_preserved;
        product = product.max(r.max_product_error);
        balance = balance.max(r.max_delta);
        kernel = kernel.max(r.max_ntk_error);

        let doubled: Vec<Matrix<f64>> = (1..depth).map(|_| Matrix::identity(n).scale(&2.0)).collect();
        let r = fc_orthogonal_fiber_check(&tuple, &doubled)?;
        scaled_breaks &= r.product_preserved && !r.balance_preserved;
        let ids: Vec<Matrix<f64>> = (1..depth).map(|_| Matrix::identity(n)).collect();
        let r = fc_orthogonal_fiber_check(&tuple, &ids)?;
        identity_keeps &= r.product_preserved && r.balance_preserved && r.ntk_preserved;
    }
    rep.check(
        "orthogonal moves preserve product, balance and kernel",
        all_preserved,
        format!("errors {product:.1e}, {balance:.1e}, {kernel:.1e}"),
    );
    rep.check("2I keeps the product but breaks balance", scaled_breaks, format!("{runs} tuples"));
    rep.check("identity moves change nothing", identity_keeps, format!("{runs} tuples"));
    rep.residual("max_product_error", product);
    rep.residual("max_delta", balance);
    rep.residual("max_ntk_error", kernel);
    Ok(rep.finish())
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteName {
    DeltaConservation,
    FiberRoundTrip,
    FlowComparison,
    ZeroAvoidance,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: SuiteName,
    #[serde(default)]
    pub runs: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub t_max: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub suites: Vec<SuiteSpec>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let spec = |name| SuiteSpec {
            name,
            runs: None,
            seed: None,
            t_max: None,
        };
        Self {
            suites: vec![
                spec(SuiteName::DeltaConservation),
                spec(SuiteName::FiberRoundTrip),
                spec(SuiteName::FlowComparison),
                spec(SuiteName::ZeroAvoidance),
            ],
        }
    }
}

impl SuiteConfig {
    pub fn parse(text: &str) -> ntk_geom::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn run_suite(spec: &SuiteSpec, default_seed: u64) -> Result<ExperimentReport> {
    let seed = spec.seed.unwrap_or(default_seed);
    match spec.name {
        SuiteName::DeltaConservation => delta_conservation_suite(seed, spec.runs.unwrap_or(20), spec.t_max.unwrap_or(10.0)),
        SuiteName::FiberRoundTrip => fiber_round_trip_suite(seed, spec.runs.unwrap_or(50)),
        SuiteName::FlowComparison => flow_comparison_suite(seed, spec.runs.unwrap_or(10), spec.t_max.unwrap_or(1.0)),
        SuiteName::ZeroAvoidance => zero_avoidance_suite(seed, spec.runs.unwrap_or(20), spec.t_max.unwrap_or(1e3)),
    }
}

fn delta_conservation_suite(seed: u64, runs: usize, t_max: f64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("delta-conservation", seed);
    let arch = running();
    let mut rng = rng_for(seed);
    rep.input("runs", runs);
    rep.input("t_max", t_max);
    let (mut drift, mut flagged, mut monotone) = (0f64, 0usize, true);
    for _ in 0..runs {
        let theta = normal_tuple(&arch, &mut rng);
        let loss = QuadraticLoss::random(&arch.end_to_end_shape(), &mut rng)?;
        let traj = integrate_param_flow(&arch, &theta, &loss, t_max, Integrator::default())?;
        drift = drift.max(traj.max_delta_drift);
        flagged += usize::from(traj.drift_flagged);
        monotone &= traj.losses.windows(2).all(|w| w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()));
    }
    rep.check("invariants conserved", flagged == 0 && drift <= 1e-6, format!("max relative drift {drift:.3e}"));
    rep.check("loss nonincreasing", monotone, format!("{runs} runs"));
    rep.residual("max_delta_drift", drift);
    Ok(rep.finish())
}

/// One-dimensional architecture with end-to-end degree at most 10.
fn random_1d_arch(rng: &mut impl Rng, strides_above_one: bool) -> Architecture {
    loop {
        let depth = rng.random_range(2..=3);
        let layers: Vec<(usize, usize)> = (0..depth)
            .map(|l| {
                let k = rng.random_range(2..=3);
                let s = if strides_above_one && l + 1 < depth { rng.random_range(2..=3) } else { 1 };
                (k, s)
            })
            .collect();
        let arch = Architecture::one_dim(&layers).expect("valid layers");
        if arch.end_to_end_len() <= 11 {
            return arch;
        }
    }
}

fn close(a: &ParamTuple<f64>, b: &ParamTuple<f64>, tol: f64) -> bool {
    let (x, y) = (a.flatten(), b.flatten());
    let scale = x.iter().chain(&y).fold(1.0f64, |m, z| m.max(z.abs()));
    x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= tol * scale)
}

fn fiber_round_trip_suite(seed: u64, runs: usize) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("fiber-round-trip", seed);
    let mut rng = rng_for(seed);
    rep.input("runs", runs);
    let (mut found, mut single, mut strided_runs, mut worst) = (0usize, true, 0usize, 0f64);
    for run in 0..runs {
        let strided = run % 2 == 0;
        let arch = random_1d_arch(&mut rng, strided);
        let theta = normal_tuple(&arch, &mut rng);
        let v = compose(&arch, &theta)?;
        let fiber = recover_fiber(&v, &arch, FiberMethod::Auto, &FiberOptions::default())?;
        let own = canonical_representative(&theta);
        found += usize::from(fiber.representatives.iter().any(|r| close(r, &own, 1e-6)));
        if strided {
            strided_runs += 1;
            single &= fiber.class_count() == 1;
        }
        worst = fiber.residuals.iter().fold(worst, |m, r| m.max(*r));
    }
    rep.check("fiber contains the generating class", found == runs, format!("{found} of {runs}"));
    rep.check("strided fibers are single classes", single, format!("{strided_runs} strided runs"));
    rep.check("representatives reproduce the filter", worst <= 1e-8, format!("max residual {worst:.3e}"));
    rep.residual("max_residual", worst);
    Ok(rep.finish())
}

fn flow_comparison_suite(seed: u64, runs: usize, t_max: f64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("flow-comparison", seed);
    let arch = running();
    let mut rng = rng_for(seed);
    rep.input("runs", runs);
    rep.input("t_max", t_max);
    let (mut worst, mut largest_delta) = (0f64, 0f64);
    for _ in 0..runs {
        let target: f64 = rng.random_range(-10.0..=10.0);
        let theta = rescale_to_delta(&normal_tuple(&arch, &mut rng), &[target])?;
        let loss = QuadraticLoss::random(&arch.end_to_end_shape(), &mut rng)?;
        let cmp = compare_flows(&arch, &theta, &loss, t_max, Integrator::default())?;
        worst = worst.max(cmp.max_deviation);
        largest_delta = largest_delta.max(target.abs());
    }
    rep.check(
        "parameter and function flows agree",
        worst <= 1e-4,
        format!("max deviation {worst:.3e} with |delta| up to {largest_delta:.2}"),
    );
    rep.residual("max_deviation", worst);
    Ok(rep.finish())
}

fn zero_avoidance_suite(seed: u64, runs: usize, t_max: f64) -> Result<ExperimentReport> {
    let mut rep = ReportBuilder::new("zero-avoidance", seed);
    let arch = running();
    let mut rng = rng_for(seed);
    rep.input("runs", runs);
    rep.input("t_max", t_max);
    let data = Dataset::random(&arch, 8, &[1], &mut rng)?;
    let loss = dataset_to_quadratic(&arch, &data)?;
    let tight = Integrator::Dp45 { atol: 1e-12, rtol: 1e-12 };
    rep.input("integrator", serde_json::to_value(tight).expect("serializable"));
    let report = ntk_geom::zero_avoidance_experiment(&arch, &loss, runs, seed, t_max, tight)?;
    let smallest = report.runs.iter().map(|r| r.final_mu_norm).fold(f64::INFINITY, f64::min);
    let converged = report.runs.iter().filter(|r| r.converged).count();
    rep.check(
        "every run ends away from zero",
        report.fraction_nonzero == 1.0,
        format!("smallest final ||mu|| {smallest:.3e}"),
    );
    rep.check("every run converged", converged == runs, format!("{converged} of {runs}"));
    rep.residual("smallest_final_mu_norm", if runs == 0 { 0.0 } else { smallest });
    rep.artifact("runs", serde_json::to_value(&report.runs).expect("serializable"));
    Ok(rep.finish())
}
