//! JSON, CSV and SVG formats.
//!
//! An architecture is `{"signal_dim": D, "layers": [{"shape": [..], "stride": [..]}, ..]}`;
//! a parameter file may repeat those keys and adds `"filters": [[..], ..]`, one
//! row-major list (or nested array) per layer. Exact values are written as
//! `"p/q"` strings; both those and plain JSON numbers are accepted on input.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conv::{Architecture, LayerSpec, ParamTuple};
use crate::error::{Error, Result};
use crate::flow::{dataset_to_quadratic, Dataset, QuadraticLoss, Trajectory};
use crate::linalg::Matrix;
use crate::ntk::NtkMatrix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerJson {
    shape: Vec<usize>,
    #[serde(default)]
    stride: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArchJson {
    #[serde(default)]
    signal_dim: Option<usize>,
    layers: Vec<LayerJson>,
}

pub fn parse_json(text: &str) -> Result<Value> {
    Ok(serde_json::from_str(text)?)
}

pub fn architecture_from_json(v: &Value) -> Result<Architecture> {
    let spec: ArchJson = serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("architecture: {e}")))?;
    let layers = spec
        .layers
        .into_iter()
        .map(|l| {
            let d = l.shape.len();
            LayerSpec::new(l.shape, l.stride.unwrap_or_else(|| vec![1; d]))
        })
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture::new(layers)?;
    if let Some(d) = spec.signal_dim {
        if d != arch.signal_dim() {
            return Err(Error::Parse(format!(
                "signal_dim is {d} but the layers are {}-dimensional",
                arch.signal_dim()
            )));
        }
    }
    Ok(arch)
}

pub fn architecture_to_json(arch: &Architecture) -> Value {
    let layers: Vec<Value> = arch
        .layers()
        .iter()
        .zip(arch.application_strides())
        .map(|(l, s)| json!({"shape": l.shape, "stride": s.components()}))
        .collect();
    json!({"signal_dim": arch.signal_dim(), "layers": layers})
}

fn flatten_values<'a>(v: &'a Value, out: &mut Vec<&'a Value>) {
    match v {
        Value::Array(items) => items.iter().for_each(|x| flatten_values(x, out)),
        other => out.push(other),
    }
}

/// Scalars of a (possibly nested) JSON array, in row-major order.
pub fn scalars_from_json<T: Scalar>(v: &Value) -> Result<Vec<T>> {
    if !v.is_array() {
        return Err(Error::Parse(format!("expected an array, found {v}")));
    }
    let mut leaves = Vec::new();
    flatten_values(v, &mut leaves);
    leaves.into_iter().map(T::from_json).collect()
}

pub fn params_from_json<T: Scalar>(arch: &Architecture, v: &Value) -> Result<ParamTuple<T>> {
    let filters = v
        .get("filters")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("missing \"filters\" array".into()))?;
    let filters = filters.iter().map(scalars_from_json).collect::<Result<Vec<Vec<T>>>>()?;
    ParamTuple::from_vecs(arch, filters)
}

pub fn params_to_json<T: Scalar>(arch: &Architecture, theta: &ParamTuple<T>) -> Value {
    let mut out = architecture_to_json(arch);
    out["filters"] = Value::Array(
        theta
            .filters()
            .iter()
            .map(|w| Value::Array(w.data().iter().map(Scalar::to_json).collect()))
            .collect(),
    );
    out
}

/// An end-to-end filter: a plain array (reshaped to the architecture) or
/// `{"shape": [..], "data": [..]}`.
pub fn filter_from_json<T: Scalar>(arch: &Architecture, v: &Value) -> Result<Tensor<T>> {
    let (shape, data) = match v {
        Value::Object(map) => {
            let data = map.get("data").ok_or_else(|| Error::Parse("missing \"data\"".into()))?;
            let shape = match map.get("shape") {
                Some(s) => serde_json::from_value(s.clone()).map_err(|e| Error::Parse(format!("shape: {e}")))?,
                None => arch.end_to_end_shape(),
            };
            (shape, scalars_from_json(data)?)
        }
        other => (arch.end_to_end_shape(), scalars_from_json(other)?),
    };
    Tensor::new(shape, data)
}

pub fn filter_to_json<T: Scalar>(v: &Tensor<T>) -> Value {
    json!({"shape": v.shape(), "data": v.data().iter().map(Scalar::to_json).collect::<Vec<_>>()})
}

pub fn matrix_from_json<T: Scalar>(v: &Value) -> Result<Matrix<T>> {
    let rows = v.as_array().ok_or_else(|| Error::Parse("expected an array of rows".into()))?;
    Matrix::from_rows(rows.iter().map(scalars_from_json).collect::<Result<_>>()?)
}

pub fn matrix_to_json<T: Scalar>(m: &Matrix<T>) -> Value {
    Value::Array(
        m.to_rows()
            .iter()
            .map(|r| Value::Array(r.iter().map(Scalar::to_json).collect()))
            .collect(),
    )
}

pub fn ntk_to_json<T: Scalar>(k: &NtkMatrix<T>) -> Value {
    json!({
        "matrix": matrix_to_json(&k.matrix),
        "layer_terms": k.layer_terms.iter().map(matrix_to_json).collect::<Vec<_>>(),
    })
}

pub fn matrix_to_csv<T: Scalar>(m: &Matrix<T>) -> String {
    let mut out = String::new();
    for r in m.to_rows() {
        let cells: Vec<String> = r.iter().map(ToString::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// A quadratic loss `{"A": [[..]], "u": [..], "c": x}` or a dataset
/// `{"inputs": [..], "outputs": [..]}` reduced to one.
pub fn loss_from_json(arch: &Architecture, v: &Value) -> Result<QuadraticLoss> {
    if let Some(a) = v.get("A") {
        let a = matrix_from_json(a)?;
        let u = filter_from_json(arch, v.get("u").ok_or_else(|| Error::Parse("missing \"u\"".into()))?)?;
        let c = match v.get("c") {
            Some(c) => f64::from_json(c)?,
            None => 0.0,
        };
        return QuadraticLoss::new(a, u, c);
    }
    let (Some(xs), Some(ys)) = (
        v.get("inputs").and_then(Value::as_array),
        v.get("outputs").and_then(Value::as_array),
    ) else {
        return Err(Error::Parse("a loss needs \"A\" and \"u\", or \"inputs\" and \"outputs\"".into()));
    };
    let out_shape: Option<Vec<usize>> = v
        .get("output_shape")
        .map(|s| serde_json::from_value(s.clone()).map_err(|e| Error::Parse(format!("output_shape: {e}"))))
        .transpose()?;
    let mut outputs = Vec::with_capacity(ys.len());
    for y in ys {
        let data: Vec<f64> = scalars_from_json(y)?;
        let shape = out_shape.clone().unwrap_or_else(|| vec![data.len()]);
        outputs.push(Tensor::new(shape, data)?);
    }
    let in_shape = match outputs.first() {
        Some(y) => arch.input_shape_for_output(y.shape()),
        None => return Err(Error::Parse("empty dataset".into())),
    };
    let inputs = xs
        .iter()
        .map(|x| Tensor::new(in_shape.clone(), scalars_from_json(x)?))
        .collect::<Result<Vec<_>>>()?;
    dataset_to_quadratic(arch, &Dataset::new(arch, inputs, outputs)?)
}

pub fn loss_to_json(loss: &QuadraticLoss) -> Value {
    json!({"A": matrix_to_json(loss.a()), "u": loss.u().data(), "c": loss.c()})
}

/// Columns `t, loss, grad_norm, delta_1.., v_0..`.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let h1 = traj.deltas.first().map_or(0, Vec::len);
    let k = traj.functions.first().map_or(0, Vec::len);
    let mut out = String::from("t,loss,grad_norm");
    for i in 1..=h1 {
        let _ = write!(out, ",delta_{i}");
    }
    for i in 0..k {
        let _ = write!(out, ",v_{i}");
    }
    out.push('\n');
    for n in 0..traj.len() {
        let _ = write!(out, "{:e},{:e},{:e}", traj.times[n], traj.losses[n], traj.grad_norms[n]);
        for d in &traj.deltas[n] {
            let _ = write!(out, ",{d:e}");
        }
        for v in &traj.functions[n] {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

const PANEL_W: f64 = 560.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 60.0;

fn polyline(xs: &[f64], ys: &[f64], x0: f64, y0: f64, color: &str) -> String {
    let (xmin, xmax) = bounds(xs);
    let (ymin, ymax) = bounds(ys);
    let px = |x: f64| x0 + (x - xmin) / (xmax - xmin) * PANEL_W;
    let py = |y: f64| y0 + PANEL_H - (y - ymin) / (ymax - ymin) * PANEL_H;
    let points: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    )
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn panel(title: &str, y0: f64, xs: &[f64], ys: &[f64], ylabel: (f64, f64)) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#888\"/>"
    );
    let _ = writeln!(s, "<text x=\"{MARGIN}\" y=\"{}\" font-size=\"13\">{title}</text>", y0 - 6.0);
    let _ = writeln!(
        s,
        "<text x=\"4\" y=\"{}\" font-size=\"10\">{:.3e}</text>",
        y0 + 10.0,
        ylabel.1
    );
    let _ = writeln!(
        s,
        "<text x=\"4\" y=\"{}\" font-size=\"10\">{:.3e}</text>",
        y0 + PANEL_H,
        ylabel.0
    );
    s.push_str(&polyline(xs, ys, MARGIN, y0, "#1f5fa8"));
    s
}

/// Self-contained SVG with the loss and the invariant drift against time.
pub fn trajectory_to_svg(traj: &Trajectory) -> String {
    let t = &traj.times;
    let log_loss: Vec<f64> = traj.losses.iter().map(|l| l.abs().max(1e-300).log10()).collect();
    let drift: Vec<f64> = match traj.deltas.first() {
        Some(first) => traj
            .deltas
            .iter()
            .map(|d| d.iter().zip(first).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .collect(),
        None => vec![0.0; t.len()],
    };
    let height = 2.0 * PANEL_H + 3.0 * MARGIN;
    let width = PANEL_W + 2.0 * MARGIN;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    s.push_str(&panel("log10 loss", MARGIN, t, &log_loss, bounds(&log_loss)));
    s.push_str(&panel("max |delta(t) - delta(0)|", 2.0 * MARGIN + PANEL_H, t, &drift, bounds(&drift)));
    let (t0, t1) = bounds(t);
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{}\" font-size=\"10\">t = {t0:.3}</text>\n<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">t = {t1:.3}</text>",
        height - 12.0,
        MARGIN + PANEL_W,
        height - 12.0
    );
    s.push_str("</svg>\n");
    s
}
