use std::str::FromStr;

use ntk_geom::fiber::canonical_representative;
use ntk_geom::{
    compose, invert_numeric, projective_roots, recover_fiber, Architecture, Error, FiberMethod, FiberOptions,
    LayerSpec, ParamTuple, Tensor,
};
use num_complex::Complex64;
use proptest::prelude::*;

fn close(a: &ParamTuple<f64>, b: &ParamTuple<f64>, tol: f64) -> bool {
    let (x, y) = (a.flatten(), b.flatten());
    let scale = x.iter().chain(&y).fold(1.0f64, |m, z| m.max(z.abs()));
    x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= tol * scale)
}

fn signed(mag: &[f64], sign: &[bool]) -> Vec<f64> {
    mag.iter().zip(sign).map(|(m, s)| if *s { *m } else { -m }).collect()
}

fn point(layers: Vec<(usize, usize)>) -> impl Strategy<Value = (Architecture, ParamTuple<f64>)> {
    let arch = Architecture::one_dim(&layers).unwrap();
    let n = arch.param_count();
    (prop::collection::vec(0.2f64..2.0, n), prop::collection::vec(any::<bool>(), n))
        .prop_map(move |(m, s)| (arch.clone(), ParamTuple::from_flat(&arch, &signed(&m, &s)).unwrap()))
}

fn strided_point() -> impl Strategy<Value = (Architecture, ParamTuple<f64>)> {
    prop::collection::vec((2usize..=3, 2usize..=3), 2..=3).prop_flat_map(point)
}

fn stride_one_point() -> impl Strategy<Value = (Architecture, ParamTuple<f64>)> {
    prop::collection::vec((2usize..=3, Just(1usize)), 2..=3).prop_flat_map(point)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn strided_fibers_are_single_classes((arch, theta) in strided_point()) {
        let v = compose(&arch, &theta).unwrap();
        let fiber = recover_fiber(&v, &arch, FiberMethod::Auto, &FiberOptions::default()).unwrap();
        prop_assert_eq!(fiber.class_count(), 1);
        prop_assert!(fiber.residuals[0] <= 1e-8);
        prop_assert!(close(&fiber.representatives[0], &canonical_representative(&theta), 1e-6));
    }

    #[test]
    fn stride_one_fibers_contain_the_generating_tuple((arch, theta) in stride_one_point()) {
        let v = compose(&arch, &theta).unwrap();
        let fiber = recover_fiber(&v, &arch, FiberMethod::RootGroup, &FiberOptions::default()).unwrap();
        let own = canonical_representative(&theta);
        prop_assert!(fiber.representatives.iter().any(|r| close(r, &own, 1e-6)));
        for (rep, res) in fiber.representatives.iter().zip(&fiber.residuals) {
            prop_assert!(*res <= 1e-8);
            prop_assert!(compose(&arch, rep).unwrap().max_abs_diff(&v) <= 1e-8 * v.norm());
        }
    }

    #[test]
    fn roots_rebuild_the_polynomial(roots in prop::collection::vec(-3.0f64..3.0, 1..=6), lead in 0.5f64..2.0) {
        // Coefficients of lead * prod (y - r) in the basis x^(n-i) y^i.
        let mut coeffs = vec![lead];
        for r in &roots {
            let mut next = vec![0.0; coeffs.len() + 1];
            for (i, c) in coeffs.iter().enumerate() {
                next[i] -= r * c;
                next[i + 1] += c;
            }
            coeffs = next;
        }
        let set = projective_roots(&coeffs).unwrap();
        prop_assert_eq!(set.degree(), roots.len());
        let value = |y: Complex64| coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| acc * y + c);
        for (z, _) in &set.finite {
            let scale = coeffs.iter().map(|c| c.abs()).sum::<f64>() * (1.0 + z.norm()).powi(roots.len() as i32);
            prop_assert!(value(*z).norm() <= 1e-6 * scale, "p({}) = {}", z, value(*z));
        }
    }
}

#[test]
fn two_dimensional_fibers_by_numeric_inversion() {
    let arch = Architecture::new(vec![
        LayerSpec::new(vec![2, 2], vec![2, 1]).unwrap(),
        LayerSpec::new(vec![2, 2], vec![1, 1]).unwrap(),
    ])
    .unwrap();
    let theta = ParamTuple::from_vecs(&arch, vec![vec![1.0, -0.5, 0.3, 0.8], vec![0.6, 1.2, -0.9, 0.4]]).unwrap();
    let v = compose(&arch, &theta).unwrap();
    let fiber = recover_fiber(&v, &arch, FiberMethod::Auto, &FiberOptions::default()).unwrap();
    assert_eq!(fiber.method, FiberMethod::Numeric);
    assert_eq!(fiber.class_count(), 1);
    assert!(close(&fiber.representatives[0], &canonical_representative(&theta), 1e-6));
}

#[test]
fn swapped_layers_count_once_in_two_dimensions() {
    let arch = Architecture::new(vec![
        LayerSpec::new(vec![2, 2], vec![1, 1]).unwrap(),
        LayerSpec::new(vec![2, 2], vec![1, 1]).unwrap(),
    ])
    .unwrap();
    let theta = ParamTuple::from_vecs(&arch, vec![vec![1.0, -0.5, 0.3, 0.8], vec![0.6, 1.2, -0.9, 0.4]]).unwrap();
    let v = compose(&arch, &theta).unwrap();
    let fiber = invert_numeric(&v, &arch, 64, 7).unwrap();
    assert_eq!(fiber.class_count(), 1);
}

#[test]
fn numeric_inversion_is_deterministic() {
    let arch = Architecture::one_dim(&[(3, 1), (2, 1)]).unwrap();
    let v = Tensor::vector(vec![0.0, 1.0, 1.0, 0.0]);
    let a = invert_numeric(&v, &arch, 32, 11).unwrap();
    let b = invert_numeric(&v, &arch, 32, 11).unwrap();
    assert_eq!(a.representatives, b.representatives);
    assert_eq!(a.class_count(), 3);
}

#[test]
fn zero_filter_has_no_finite_fiber() {
    let arch = Architecture::one_dim(&[(3, 2), (2, 1)]).unwrap();
    let zero = Tensor::vector(vec![0.0; 5]);
    for method in [FiberMethod::Auto, FiberMethod::RootGroup, FiberMethod::Numeric] {
        let res = recover_fiber(&zero, &arch, method, &FiberOptions::default());
        assert!(matches!(res, Err(Error::NoFactorization(_))), "{method}: {res:?}");
    }
}

#[test]
fn method_names_round_trip() {
    for m in [FiberMethod::ClosedForm, FiberMethod::RootGroup, FiberMethod::Numeric, FiberMethod::Auto] {
        assert_eq!(FiberMethod::from_str(&m.to_string()).unwrap(), m);
    }
    assert!(FiberMethod::from_str("guess").is_err());
}
