use ntk_geom::io::{
    architecture_from_json, architecture_to_json, filter_from_json, filter_to_json, loss_from_json, loss_to_json,
    matrix_from_json, matrix_to_csv, matrix_to_json, ntk_to_json, params_from_json, params_to_json, parse_json,
    trajectory_to_csv, trajectory_to_svg,
};
use ntk_geom::scalar::rat;
use ntk_geom::{
    compose, integrate_param_flow, ntk, Architecture, Error, Integrator, LayerSpec, Matrix, ParamTuple,
    QuadraticLoss, Rational, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn running() -> Architecture {
    Architecture::one_dim(&[(3, 2), (2, 1)]).unwrap()
}

fn rational() -> impl Strategy<Value = Rational> {
    (-1000i64..=1000, 1i64..=97).prop_map(|(p, q)| rat(p, q))
}

fn flow_trajectory() -> ntk_geom::Trajectory {
    let arch = running();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = ParamTuple::from_vecs(&arch, vec![vec![0.4, -1.1, 0.7], vec![1.2, 0.3]]).unwrap();
    let loss = QuadraticLoss::random(&arch.end_to_end_shape(), &mut rng).unwrap();
    integrate_param_flow(&arch, &theta, &loss, 2.0, Integrator::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_parameters_round_trip(flat in prop::collection::vec(rational(), 5)) {
        let arch = running();
        let theta = ParamTuple::from_flat(&arch, &flat).unwrap();
        let text = params_to_json(&arch, &theta).to_string();
        let v = parse_json(&text).unwrap();
        prop_assert_eq!(architecture_from_json(&v).unwrap(), arch.clone());
        let back: ParamTuple<Rational> = params_from_json(&arch, &v).unwrap();
        prop_assert_eq!(back, theta);
    }

    #[test]
    fn float_parameters_round_trip(flat in prop::collection::vec(-1e6f64..1e6, 5)) {
        let arch = running();
        let theta = ParamTuple::from_flat(&arch, &flat).unwrap();
        let v = parse_json(&params_to_json(&arch, &theta).to_string()).unwrap();
        let back: ParamTuple<f64> = params_from_json(&arch, &v).unwrap();
        prop_assert_eq!(back, theta);
    }

    #[test]
    fn exact_matrices_round_trip(entries in prop::collection::vec(rational(), 6)) {
        let m = Matrix::from_fn(2, 3, |i, j| entries[3 * i + j].clone());
        let back: Matrix<Rational> = matrix_from_json(&matrix_to_json(&m)).unwrap();
        prop_assert_eq!(back, m);
    }
}

#[test]
fn two_dimensional_architecture_round_trips() {
    let arch = Architecture::new(vec![
        LayerSpec::new(vec![2, 3], vec![2, 1]).unwrap(),
        LayerSpec::new(vec![3, 2], vec![1, 1]).unwrap(),
    ])
    .unwrap();
    let v = architecture_to_json(&arch);
    assert_eq!(v["signal_dim"], 2);
    assert_eq!(architecture_from_json(&v).unwrap(), arch);
}

#[test]
fn strides_default_to_one_and_signal_dim_is_checked() {
    let v = parse_json(r#"{"layers":[{"shape":[3]},{"shape":[2]}]}"#).unwrap();
    assert_eq!(architecture_from_json(&v).unwrap(), Architecture::one_dim(&[(3, 1), (2, 1)]).unwrap());
    let v = parse_json(r#"{"signal_dim":2,"layers":[{"shape":[3]},{"shape":[2]}]}"#).unwrap();
    assert!(matches!(architecture_from_json(&v), Err(Error::Parse(_))));
}

#[test]
fn nested_filters_are_read_in_row_major_order() {
    let arch = Architecture::new(vec![LayerSpec::new(vec![2, 2], vec![1, 1]).unwrap()]).unwrap();
    let v = parse_json(r#"{"filters":[[[1, 2], [3, "1/2"]]]}"#).unwrap();
    let theta: ParamTuple<Rational> = params_from_json(&arch, &v).unwrap();
    assert_eq!(theta.filter(0).data(), &[rat(1, 1), rat(2, 1), rat(3, 1), rat(1, 2)]);
}

#[test]
fn filters_accept_plain_arrays_and_shaped_objects() {
    let arch = running();
    let plain: Tensor<f64> = filter_from_json(&arch, &parse_json("[1, 2, 3, 4, 5]").unwrap()).unwrap();
    let shaped: Tensor<f64> = filter_from_json(&arch, &filter_to_json(&plain)).unwrap();
    assert_eq!(plain, shaped);
    let short = filter_from_json::<f64>(&arch, &parse_json("[1, 2]").unwrap());
    assert!(short.is_err());
}

#[test]
fn quadratic_and_dataset_losses_parse() {
    let arch = running();
    let quad = parse_json(
        r#"{"A": [[2,0,0,0,0],[0,2,0,0,0],[0,0,2,0,0],[0,0,0,2,0],[0,0,0,0,2]], "u": [1, 0, 0, 0, -1], "c": 0.5}"#,
    )
    .unwrap();
    let loss = loss_from_json(&arch, &quad).unwrap();
    let v = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 1.0]);
    // (v - u)^T A (v - u) + c with v - u = (0, 0, 0, 0, 2)
    assert!((loss.value(&v).unwrap() - 8.5).abs() < 1e-12);
    let again = loss_from_json(&arch, &loss_to_json(&loss)).unwrap();
    assert_eq!(again.value(&v).unwrap(), loss.value(&v).unwrap());

    let data = parse_json(
        r#"{"inputs": [[1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 1, 0, 0], [0, 0, 0, 1, 0], [0, 0, 0, 0, 1]],
            "outputs": [[1], [0], [0], [0], [-1]]}"#,
    )
    .unwrap();
    let from_data = loss_from_json(&arch, &data).unwrap();
    assert_eq!(from_data.a().shape(), (5, 5));
    // With unit inputs the loss is ||v - y||^2 and vanishes at v = y.
    let y = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, -1.0]);
    assert!(from_data.value(&y).unwrap().abs() < 1e-12);

    let one_sample = parse_json(r#"{"inputs": [[1, 0, 2, -1, 0.5]], "outputs": [[0.3]]}"#).unwrap();
    assert!(matches!(loss_from_json(&arch, &one_sample), Err(Error::DegenerateData(_))));

    let neither = parse_json(r#"{"u": [1, 2, 3, 4, 5]}"#).unwrap();
    assert!(matches!(loss_from_json(&arch, &neither), Err(Error::Parse(_))));
}

#[test]
fn kernel_serializes_as_nested_arrays_and_csv() {
    let arch = running();
    let theta: ParamTuple<Rational> =
        ParamTuple::from_vecs(&arch, vec![vec![rat(1, 2), rat(1, 1), rat(0, 1)], vec![rat(2, 1), rat(-1, 3)]]).unwrap();
    let k = ntk(&arch, &theta).unwrap();
    let v = ntk_to_json(&k);
    let back: Matrix<Rational> = matrix_from_json(&v["matrix"]).unwrap();
    assert_eq!(back, k.matrix);
    assert_eq!(v["layer_terms"].as_array().unwrap().len(), 2);

    let csv_text = matrix_to_csv(&k.matrix.to_f64());
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows, k.matrix.to_f64().to_rows());
}

#[test]
fn trajectory_csv_has_one_row_per_time() {
    let traj = flow_trajectory();
    let text = trajectory_to_csv(&traj);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["t", "loss", "grad_norm", "delta_1", "v_0", "v_1", "v_2", "v_3", "v_4"]);
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), traj.len());
    for (n, row) in rows.iter().enumerate() {
        assert_eq!(row[0], traj.times[n]);
        assert_eq!(row[1], traj.losses[n]);
        assert_eq!(row[3], traj.deltas[n][0]);
        assert_eq!(&row[4..], traj.functions[n].as_slice());
    }
}

#[test]
fn trajectory_svg_is_well_formed() {
    let traj = flow_trajectory();
    let svg = trajectory_to_svg(&traj);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    assert_eq!(root.tag_name().namespace(), Some("http://www.w3.org/2000/svg"));
    let lines: Vec<_> = root.children().filter(|n| n.has_tag_name("polyline")).collect();
    assert_eq!(lines.len(), 2);
    for line in lines {
        let points = line.attribute("points").unwrap().split(' ').count();
        assert_eq!(points, traj.len());
    }
}

#[test]
fn parse_errors_report_line_and_column() {
    let err = parse_json("{\n  \"layers\": [\n    {\"shape\": [3],}\n  ]\n}").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 3") && msg.contains("column"), "{msg}");
}

#[test]
fn compose_of_parsed_exact_params_is_exact() {
    let arch = running();
    let v = parse_json(r#"{"filters":[["1/3", "-2/7", 1], ["3/2", "0.25"]]}"#).unwrap();
    let theta: ParamTuple<Rational> = params_from_json(&arch, &v).unwrap();
    let out = compose(&arch, &theta).unwrap();
    // (a0 x^2 + a1 xy + a2 y^2)(b0 x^2 + b1 y^2)
    let expect = [rat(1, 2), rat(-3, 7), rat(19, 12), rat(-1, 14), rat(1, 4)];
    assert_eq!(out.data(), &expect);
}
