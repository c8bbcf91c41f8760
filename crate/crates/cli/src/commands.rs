//! Subcommands that operate on user-supplied architectures, parameters and losses.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ntk_geom::invariants::{kernel_metric, pushforward_metric, pushforward_norm_sq_via_fiber, tangent_basis_theta_delta};
use ntk_geom::io::{
    architecture_from_json, architecture_to_json, filter_from_json, filter_to_json, loss_from_json, matrix_to_csv,
    ntk_to_json, params_from_json, params_to_json, parse_json, trajectory_to_csv, trajectory_to_svg,
};
use ntk_geom::ntk::jacobian_f64;
use ntk_geom::{
    compare_flows, compose, delta_invariants, integrate_param_flow, ntk, ntk_of_function, recover_fiber,
    submersion_check, Architecture, FiberMethod, FiberOptions, FiberResult, Integrator, ParamTuple, QuadraticLoss,
    Rational, Tensor,
};
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::experiments::{normal_tuple, rng_for, running};
use crate::report::{ExperimentReport, ReportBuilder};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_json(path: &Path) -> Result<Value> {
    parse_json(&read_text(path)?).map_err(|e| CliError::input(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_arch(path: &Path) -> Result<Architecture> {
    architecture_from_json(&read_json(path)?).map_err(|e| CliError::input(path, e))
}

fn read_params<T: ntk_geom::Scalar>(arch: &Architecture, path: &Path) -> Result<ParamTuple<T>> {
    params_from_json(arch, &read_json(path)?).map_err(|e| CliError::input(path, e))
}

fn read_loss(arch: &Architecture, path: &Path) -> Result<QuadraticLoss> {
    loss_from_json(arch, &read_json(path)?).map_err(|e| CliError::input(path, e))
}

/// Comma- or whitespace-separated reals.
fn parse_reals(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::Usage(format!("not a number: {t:?}"))))
        .collect()
}

fn check_delta_len(arch: &Architecture, delta: &[f64]) -> Result<()> {
    if delta.len() + 1 != arch.depth() {
        return Err(CliError::Usage(format!(
            "--delta needs {} values for {} layers, got {}",
            arch.depth() - 1,
            arch.depth(),
            delta.len()
        )));
    }
    Ok(())
}

/// Text printed on success and whether every checked property held.
pub struct Outcome {
    pub summary: String,
    pub json: Value,
    pub passed: bool,
}

impl Outcome {
    pub fn from_report(report: &ExperimentReport) -> Self {
        Self {
            summary: report.summary(),
            json: serde_json::to_value(report).expect("serializable"),
            passed: report.passed,
        }
    }
}

#[derive(Args, Debug)]
pub struct NtkArgs {
    /// Architecture JSON.
    #[arg(long)]
    pub arch: PathBuf,
    /// Parameter tuple JSON.
    #[arg(long, conflicts_with = "filter")]
    pub params: Option<PathBuf>,
    /// End-to-end filter JSON; needs --delta.
    #[arg(long, requires = "delta")]
    pub filter: Option<PathBuf>,
    /// Invariants delta_1..delta_{H-1}; the kernel is then a function of the filter and these values.
    #[arg(long, allow_hyphen_values = true)]
    pub delta: Option<String>,
    /// Exact rational arithmetic (parameters only).
    #[arg(long, conflicts_with_all = ["delta", "filter"])]
    pub exact: bool,
    /// Output file; `.csv` writes the matrix alone, anything else JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_ntk(args: &NtkArgs) -> Result<Outcome> {
    let arch = read_arch(&args.arch)?;
    let (json, csv) = if args.exact {
        let path = args.params.as_ref().ok_or_else(|| CliError::Usage("--exact needs --params".into()))?;
        let theta: ParamTuple<Rational> = read_params(&arch, path)?;
        let k = ntk(&arch, &theta)?;
        let mut json = ntk_to_json(&k);
        json["function"] = filter_to_json(&compose(&arch, &theta)?);
        json["delta"] = delta_invariants(&theta).iter().map(ntk_geom::Scalar::to_json).collect();
        (json, matrix_to_csv(&k.matrix))
    } else {
        let (v, delta, k) = match (&args.params, &args.filter) {
            (Some(path), _) => {
                let theta: ParamTuple<f64> = read_params(&arch, path)?;
                let v = compose(&arch, &theta)?;
                match &args.delta {
                    Some(text) => {
                        let delta = parse_reals(text)?;
                        check_delta_len(&arch, &delta)?;
                        let k = ntk_of_function(&arch, &v, &delta)?;
                        (v, delta, k)
                    }
                    None => (v, delta_invariants(&theta), ntk(&arch, &theta)?),
                }
            }
            (None, Some(path)) => {
                let v: Tensor<f64> =
                    filter_from_json(&arch, &read_json(path)?).map_err(|e| CliError::input(path, e))?;
                let delta = parse_reals(args.delta.as_deref().unwrap_or_default())?;
                check_delta_len(&arch, &delta)?;
                let k = ntk_of_function(&arch, &v, &delta)?;
                (v, delta, k)
            }
            (None, None) => return Err(CliError::Usage("ntk needs --params or --filter".into())),
        };
        let mut json = ntk_to_json(&k);
        json["function"] = filter_to_json(&v);
        json["delta"] = json!(delta);
        (json, matrix_to_csv(&k.matrix))
    };
    let summary = match &args.out {
        Some(path) => {
            let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
            let text = if is_csv { csv.clone() } else { pretty(&json) };
            write_text(path, &text)?;
            format!("kernel written to {}\n{csv}", path.display())
        }
        None => pretty(&json),
    };
    Ok(Outcome {
        summary,
        json,
        passed: true,
    })
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Args, Debug)]
pub struct FiberArgs {
    #[arg(long)]
    pub arch: PathBuf,
    /// End-to-end filter JSON.
    #[arg(long)]
    pub filter: PathBuf,
    /// closed-form, rootgroup, numeric or auto.
    #[arg(long, default_value = "auto")]
    pub method: FiberMethod,
    /// Random restarts for numerical inversion.
    #[arg(long, default_value_t = 64)]
    pub attempts: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn fiber_to_json(arch: &Architecture, fiber: &FiberResult) -> Value {
    let roots = fiber.roots.as_ref().map(|r| {
        json!({
            "finite": r.finite.iter().map(|(z, m)| json!([z.re, z.im, m])).collect::<Vec<_>>(),
            "at_zero": r.at_zero,
            "at_infinity": r.at_infinity,
        })
    });
    json!({
        "method": fiber.method.to_string(),
        "class_count": fiber.class_count(),
        "unique": fiber.is_unique(),
        "representatives": fiber
            .representatives
            .iter()
            .map(|t| params_to_json(arch, t)["filters"].clone())
            .collect::<Vec<_>>(),
        "invariants": fiber.representatives.iter().map(delta_invariants).collect::<Vec<_>>(),
        "ranks": fiber.ranks,
        "residuals": fiber.residuals,
        "roots": roots,
    })
}

pub fn run_fiber(args: &FiberArgs, seed: u64) -> Result<Outcome> {
    let arch = read_arch(&args.arch)?;
    let v: Tensor<f64> = filter_from_json(&arch, &read_json(&args.filter)?).map_err(|e| CliError::input(&args.filter, e))?;
    let options = FiberOptions {
        attempts: args.attempts,
        seed,
    };
    let fiber = recover_fiber(&v, &arch, args.method, &options)?;
    let mut json = fiber_to_json(&arch, &fiber);
    json["architecture"] = architecture_to_json(&arch);
    json["seed"] = json!(seed);
    let summary = match &args.out {
        Some(path) => {
            write_text(path, &pretty(&json))?;
            format!(
                "{} scaling class(es) by {}, max residual {:.3e}; written to {}\n",
                fiber.class_count(),
                fiber.method,
                fiber.residuals.iter().copied().fold(0.0, f64::max),
                path.display()
            )
        }
        None => pretty(&json),
    };
    Ok(Outcome {
        summary,
        json,
        passed: true,
    })
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    #[arg(long)]
    pub arch: PathBuf,
    /// Initial parameter tuple JSON.
    #[arg(long)]
    pub init: PathBuf,
    /// Quadratic loss or dataset JSON.
    #[arg(long)]
    pub loss: PathBuf,
    #[arg(long, default_value_t = 1e3)]
    pub t_max: f64,
    /// Fixed step of the fourth-order Runge-Kutta scheme.
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    /// Use adaptive Dormand-Prince steps instead of a fixed step.
    #[arg(long)]
    pub adaptive: bool,
    /// Absolute and relative tolerance of the adaptive scheme.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Trajectory CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also integrate the function-space flow and write the deviation summary
    /// (to the given file, or to standard output).
    #[arg(long, num_args = 0..=1, default_missing_value = "-")]
    pub compare: Option<PathBuf>,
    /// SVG plot of the loss and the invariant drift.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

pub fn run_flow(args: &FlowArgs) -> Result<Outcome> {
    if !(args.t_max > 0.0 && args.t_max.is_finite()) {
        return Err(CliError::Usage(format!("--t-max must be positive, got {}", args.t_max)));
    }
    let integrator = if args.adaptive {
        if args.tol.is_nan() || args.tol <= 0.0 {
            return Err(CliError::Usage(format!("--tol must be positive, got {}", args.tol)));
        }
        Integrator::Dp45 {
            atol: args.tol,
            rtol: args.tol,
        }
    } else {
        if !(args.step > 0.0 && args.step <= args.t_max) {
            return Err(CliError::Usage(format!("--step must lie in (0, t_max], got {}", args.step)));
        }
        Integrator::Rk4 { h: args.step }
    };
    let arch = read_arch(&args.arch)?;
    let theta: ParamTuple<f64> = read_params(&arch, &args.init)?;
    let loss = read_loss(&arch, &args.loss)?;

    let traj = integrate_param_flow(&arch, &theta, &loss, args.t_max, integrator)?;
    if let Some(path) = &args.out {
        write_text(path, &trajectory_to_csv(&traj))?;
    }
    if let Some(path) = &args.plot {
        write_text(path, &trajectory_to_svg(&traj))?;
    }
    let last = traj.len() - 1;
    let mut json = json!({
        "integrator": integrator,
        "t_max": args.t_max,
        "final_time": traj.times[last],
        "steps": traj.len(),
        "initial_loss": traj.losses[0],
        "final_loss": traj.losses[last],
        "final_grad_norm": traj.grad_norms[last],
        "converged": traj.converged,
        "delta": traj.deltas[0],
        "max_delta_drift": traj.max_delta_drift,
        "drift_flagged": traj.drift_flagged,
        "final_function": traj.functions[last],
    });
    let mut summary = format!(
        "t = {:.4} after {} steps ({}), loss {:.6e} -> {:.6e}, |grad| {:.3e}\ninvariant drift {:.3e}{}\n",
        traj.times[last],
        traj.len(),
        if traj.converged { "converged" } else { "reached t_max" },
        traj.losses[0],
        traj.losses[last],
        traj.grad_norms[last],
        traj.max_delta_drift,
        if traj.drift_flagged { " (FLAGGED)" } else { "" },
    );

    if let Some(target) = &args.compare {
        let cmp = compare_flows(&arch, &theta, &loss, args.t_max, integrator)?;
        let report = json!({
            "max_deviation": cmp.max_deviation,
            "compared_points": cmp.compared_points,
            "delta": cmp.delta,
            "t_max": args.t_max,
            "integrator": integrator,
            "final_loss_param": cmp.param.losses.last(),
            "final_loss_function": cmp.function.losses.last(),
        });
        summary.push_str(&format!(
            "function-space flow: max deviation {:.3e} over {} common times\n",
            cmp.max_deviation, cmp.compared_points
        ));
        if target.as_os_str() == "-" {
            summary.push_str(&pretty(&report));
        } else {
            write_text(target, &pretty(&report))?;
        }
        json["comparison"] = report;
    }
    Ok(Outcome {
        summary,
        json,
        passed: !traj.drift_flagged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FcCheck {
    Counterexample,
    BalancedFlow,
    OrthogonalFiber,
}

#[derive(Args, Debug)]
pub struct FcArgs {
    #[arg(long, value_enum)]
    pub check: FcCheck,
    /// Random instances for the randomized checks.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_fc(args: &FcArgs, seed: u64) -> Result<ExperimentReport> {
    use crate::experiments::{fc_check_balanced_flow, fc_check_counterexample, fc_check_orthogonal_fiber};
    match args.check {
        FcCheck::Counterexample => fc_check_counterexample(seed),
        FcCheck::BalancedFlow => fc_check_balanced_flow(seed, args.runs),
        FcCheck::OrthogonalFiber => fc_check_orthogonal_fiber(seed, args.runs),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VerifyCheck {
    DeltaConservation,
    Submersion,
    Pushforward,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub check: VerifyCheck,
    /// Architecture JSON; defaults to the two-layer example with sizes (3, 2) and strides (2, 1).
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Parameter tuple JSON; drawn at random from the seed when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Loss JSON for delta-conservation; drawn at random when absent.
    #[arg(long)]
    pub loss: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub t_max: f64,
    /// Random tangent vectors for the pushforward check.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_verify(args: &VerifyArgs, seed: u64) -> Result<ExperimentReport> {
    let arch = match &args.arch {
        Some(path) => read_arch(path)?,
        None => running(),
    };
    let mut rng = rng_for(seed);
    let theta: ParamTuple<f64> = match &args.params {
        Some(path) => read_params(&arch, path)?,
        None => normal_tuple(&arch, &mut rng),
    };
    let id = match args.check {
        VerifyCheck::DeltaConservation => "verify-delta-conservation",
        VerifyCheck::Submersion => "verify-submersion",
        VerifyCheck::Pushforward => "verify-pushforward",
    };
    let mut rep = ReportBuilder::new(id, seed);
    rep.input("architecture", architecture_to_json(&arch));
    rep.input("params", params_to_json(&arch, &theta));
    match args.check {
        VerifyCheck::DeltaConservation => {
            let loss = match &args.loss {
                Some(path) => read_loss(&arch, path)?,
                None => QuadraticLoss::random(&arch.end_to_end_shape(), &mut rng)?,
            };
            rep.input("t_max", args.t_max);
            let traj = integrate_param_flow(&arch, &theta, &loss, args.t_max, Integrator::default())?;
            let start = &traj.deltas[0];
            let drifts: Vec<f64> = (0..start.len())
                .map(|i| traj.deltas.iter().map(|d| (d[i] - start[i]).abs()).fold(0.0, f64::max))
                .collect();
            for (i, d) in drifts.iter().enumerate() {
                let bound = 1e-6 * (1.0 + start[i].abs());
                rep.check(&format!("delta_{} conserved", i + 1), *d <= bound, format!("drift {d:.3e}, bound {bound:.1e}"));
                rep.residual(&format!("delta_{}_drift", i + 1), *d);
            }
            rep.artifact("delta", json!(start));
            rep.artifact("final_loss", json!(traj.losses.last()));
        }
        VerifyCheck::Submersion => {
            let r = submersion_check(&arch, &theta)?;
            rep.check(
                "d mu on the level set is a bijection onto the tangent space",
                r.bijective,
                format!(
                    "restricted rank {}, level-set dimension {}, neuromanifold dimension {}",
                    r.restricted_rank,
                    r.tangent_dim,
                    arch.neuromanifold_dim()
                ),
            );
            rep.artifact("jacobian_rank", r.jacobian_rank);
            rep.artifact("restricted_rank", r.restricted_rank);
            rep.artifact("tangent_dim", r.tangent_dim);
            rep.artifact("neuromanifold_dim", arch.neuromanifold_dim());
        }
        VerifyCheck::Pushforward => {
            let v = compose(&arch, &theta)?;
            let delta = delta_invariants(&theta);
            let basis = tangent_basis_theta_delta(&theta)?;
            let jac = jacobian_f64(&arch, &theta)?;
            let frame = &jac * basis.matrix(jac.ncols());
            let kernel = ntk(&arch, &theta)?.matrix;
            let (mut worst, mut positive) = (0f64, true);
            for _ in 0..args.samples {
                let c = nalgebra::DVector::from_fn(basis.dim(), |_, _| StandardNormal.sample(&mut rng));
                let v_dot = Tensor::new(arch.end_to_end_shape(), (&frame * &c).as_slice().to_vec())?;
                let via_function = pushforward_metric(&arch, &v, &delta, &v_dot, &v_dot)?;
                let via_kernel = kernel_metric(&kernel, &v_dot, &v_dot)?;
                let via_fiber = pushforward_norm_sq_via_fiber(&arch, &theta, &v_dot)?;
                let scale = c.norm_squared().max(1e-300);
                worst = worst
                    .max((via_function - via_fiber).abs() / scale)
                    .max((via_kernel - via_fiber).abs() / scale)
                    .max((via_fiber - c.norm_squared()).abs() / scale);
                positive &= via_function > 0.0;
            }
            rep.check(
                "kernel metric equals the level-set length",
                worst <= 1e-6,
                format!("{} tangent vectors, max relative error {worst:.3e}", args.samples),
            );
            rep.check("metric is positive on tangent vectors", positive, format!("{} samples", args.samples));
            rep.residual("max_relative_error", worst);
            rep.artifact("delta", json!(delta));
        }
    }
    Ok(rep.finish())
}
