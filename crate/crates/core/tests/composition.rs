use ntk_geom::scalar::rat;
use ntk_geom::{
    apply_layers, compose, poly_multiply, to_poly, Architecture, LayerSpec, ParamTuple, Rational, SparsePoly, Tensor,
};
use proptest::prelude::*;

fn rational() -> impl Strategy<Value = Rational> {
    (-12i64..=12, 1i64..=6).prop_map(|(p, q)| rat(p, q))
}

fn layer_1d() -> impl Strategy<Value = (usize, usize)> {
    (2usize..=4, 1usize..=3)
}

/// A 1-D or 2-D architecture with two or three layers.
fn architecture() -> impl Strategy<Value = Architecture> {
    let one_dim = prop::collection::vec(layer_1d(), 1..=3).prop_map(|l| Architecture::one_dim(&l).unwrap());
    let layer_2d = ((1usize..=3, 1usize..=3), (1usize..=2, 1usize..=2))
        .prop_filter("not a 1x1 filter", |((a, b), _)| *a > 1 || *b > 1)
        .prop_map(|((a, b), (s, t))| LayerSpec::new(vec![a, b], vec![s, t]).unwrap());
    let two_dim = prop::collection::vec(layer_2d, 1..=3).prop_map(|l| Architecture::new(l).unwrap());
    prop_oneof![one_dim, two_dim]
}

fn tuple_for(arch: &Architecture) -> impl Strategy<Value = ParamTuple<Rational>> {
    let arch = arch.clone();
    prop::collection::vec(rational(), arch.param_count()).prop_map(move |flat| ParamTuple::from_flat(&arch, &flat).unwrap())
}

fn arch_and_tuple() -> impl Strategy<Value = (Architecture, ParamTuple<Rational>)> {
    architecture().prop_flat_map(|arch| (Just(arch.clone()), tuple_for(&arch)))
}

/// Convolution of `v` with overall stride `s` applied directly to `x`.
fn apply_end_to_end(arch: &Architecture, v: &Tensor<Rational>, x: &Tensor<Rational>) -> Tensor<Rational> {
    let s = arch.overall_stride();
    ntk_geom::apply_convolution(v, &s, x).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_matches_sequential_application(
        (arch, theta) in arch_and_tuple(),
        out in prop::collection::vec(1usize..=3, 2),
        seed in prop::collection::vec(rational(), 200),
    ) {
        let out = &out[..arch.signal_dim()];
        let in_shape = arch.input_shape_for_output(out);
        let len: usize = in_shape.iter().product();
        let x = Tensor::new(in_shape, seed.iter().cycle().take(len).cloned().collect()).unwrap();
        let v = compose(&arch, &theta).unwrap();
        prop_assert_eq!(apply_layers(&arch, &theta, &x).unwrap(), apply_end_to_end(&arch, &v, &x));
    }

    #[test]
    fn composition_is_linear_in_each_layer(
        (arch, theta) in arch_and_tuple(),
        layer in 0usize..3,
        c in rational(),
        extra in prop::collection::vec(rational(), 12),
    ) {
        let l = layer % arch.depth();
        let w = theta.filter(l);
        let other = Tensor::new(w.shape().to_vec(), extra.iter().cycle().take(w.len()).cloned().collect()).unwrap();
        let combined = w.scaled(&c).add(&other).unwrap();
        let lhs = compose(&arch, &theta.with_layer(l, combined)).unwrap();
        let rhs = compose(&arch, &theta).unwrap().scaled(&c)
            .add(&compose(&arch, &theta.with_layer(l, other)).unwrap()).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn end_to_end_shape_follows_the_size_formula(arch in architecture()) {
        let t = arch.sparse_exponents();
        for m in 0..arch.signal_dim() {
            let expect = 1 + arch.layers().iter().zip(&t).map(|(l, t)| (l.shape[m] - 1) * t[m]).sum::<usize>();
            prop_assert_eq!(arch.end_to_end_shape()[m], expect);
        }
    }

    #[test]
    fn poly_product_matches_term_expansion(
        (kp, kq) in ((1usize..=3, 1usize..=3), (1usize..=3, 1usize..=3)),
        (tp, tq) in ((1usize..=3, 1usize..=2), (1usize..=3, 1usize..=2)),
        coeffs in prop::collection::vec(rational(), 18),
    ) {
        let p_shape = vec![kp.0, kp.1];
        let q_shape = vec![kq.0, kq.1];
        let np: usize = p_shape.iter().product();
        let nq: usize = q_shape.iter().product();
        let p = to_poly(&Tensor::new(p_shape, coeffs[..np].to_vec()).unwrap(), &[tp.0, tp.1]).unwrap();
        let q = to_poly(&Tensor::new(q_shape, coeffs[9..9 + nq].to_vec()).unwrap(), &[tq.0, tq.1]).unwrap();
        let product = poly_multiply(&p, &q).unwrap();
        prop_assert_eq!(dense_terms(&product), brute_force_product(&p, &q));
    }
}

type Monomial = Vec<(usize, usize)>;

/// Terms as a sorted list with zero coefficients dropped.
fn dense_terms(p: &SparsePoly<Rational>) -> Vec<(Monomial, Rational)> {
    let mut terms = p.terms();
    terms.sort_by(|a, b| a.0.cmp(&b.0));
    terms
}

fn brute_force_product(p: &SparsePoly<Rational>, q: &SparsePoly<Rational>) -> Vec<(Monomial, Rational)> {
    let mut acc: std::collections::BTreeMap<Monomial, Rational> = Default::default();
    for (mp, cp) in p.terms() {
        for (mq, cq) in q.terms() {
            let mono: Monomial = mp.iter().zip(&mq).map(|(a, b)| (a.0 + b.0, a.1 + b.1)).collect();
            *acc.entry(mono).or_insert_with(|| rat(0, 1)) += cp.clone() * cq;
        }
    }
    acc.into_iter().filter(|(_, c)| *c != rat(0, 1)).collect()
}

#[test]
fn product_lives_on_the_coarsest_common_lattice() {
    let p = to_poly(&Tensor::<Rational>::from_i64(&[3], &[1, 2, 3]).unwrap(), &[2]).unwrap();
    let q = to_poly(&Tensor::from_i64(&[2], &[4, 5]).unwrap(), &[4]).unwrap();
    let r = poly_multiply(&p, &q).unwrap();
    assert_eq!(r.exponent(), &[2]);
    assert_eq!(r.degree(), vec![8]);
    // (1 + 2y^2 + 3y^4)(4 + 5y^4) = 4 + 8y^2 + 17y^4 + 10y^6 + 15y^8
    let expect: Vec<Rational> = [4, 8, 17, 10, 15].iter().map(|&c| rat(c, 1)).collect();
    assert_eq!(r.coeffs().data(), expect.as_slice());
}

#[test]
fn float_and_exact_compositions_agree() {
    let arch = Architecture::one_dim(&[(3, 2), (2, 3), (4, 1)]).unwrap();
    let flat: Vec<Rational> = (0..arch.param_count()).map(|i| rat(i as i64 * 7 % 11 - 5, 3)).collect();
    let exact = ParamTuple::from_flat(&arch, &flat).unwrap();
    let v = compose(&arch, &exact).unwrap().to_f64();
    let w = compose(&arch, &exact.to_f64()).unwrap();
    assert!(v.max_abs_diff(&w) < 1e-12);
    let single = compose(&arch, &exact.map(|x| num_traits::ToPrimitive::to_f32(x).unwrap())).unwrap();
    for (a, b) in single.data().iter().zip(v.data()) {
        assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()));
    }
}
