use additive_lab::hermite::{
    expand_function, factorial, gauss_quadrature, he_eval, he_table, relu_shifted_coeffs, HermiteSeries, QuadratureRule,
};
use additive_lab::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn orthogonality_table_to_degree_ten() {
    let rule = gauss_quadrature(32).unwrap();
    for k in 0..=10 {
        for l in 0..=10 {
            let m = rule.integrate(|x| he_eval(k, x) * he_eval(l, x));
            let normalized = m / (factorial(k) * factorial(l)).sqrt();
            let want = if k == l { 1.0 } else { 0.0 };
            assert!((normalized - want).abs() <= 1e-8, "k={k} l={l}: {normalized}");
        }
    }
}

#[test]
fn derivative_identity_at_random_points() {
    let mut rng = seeded(11);
    let h = 1e-5;
    for _ in 0..100 {
        let x: f64 = rng.random_range(-4.0..4.0);
        for k in 1..=8 {
            let analytic = HermiteSeries::basis(k).derivative().eval(x);
            let rule = k as f64 * he_eval(k - 1, x);
            assert!((analytic - rule).abs() <= 1e-8);
            let fd = (he_eval(k, x + h) - he_eval(k, x - h)) / (2.0 * h);
            assert!((fd - rule).abs() <= 1e-4, "k={k} x={x}: fd {fd} vs {rule}");
        }
    }
}

#[test]
fn shifted_relu_matches_kinked_quadrature() {
    for b in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let rule = QuadratureRule::with_kink(-b).unwrap();
        let numeric = expand_function(|z: f64| (z + b).max(0.0), 10, &rule);
        let closed = relu_shifted_coeffs(b, 10);
        for k in 0..=10 {
            assert!(
                (numeric.coeff(k) - closed.coeff(k)).abs() <= 1e-8,
                "b={b} k={k}: {} vs {}",
                numeric.coeff(k),
                closed.coeff(k)
            );
        }
    }
}

#[test]
fn table_agrees_with_single_evaluation() {
    for &x in &[-3.3, -0.5, 0.0, 1.7, 5.0] {
        let t = he_table(12, x);
        for (k, v) in t.iter().enumerate() {
            assert!((v - he_eval(k, x)).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}

fn small_series() -> impl Strategy<Value = HermiteSeries> {
    prop::collection::vec(-2.0f64..2.0, 1..6).prop_map(HermiteSeries::new)
}

proptest! {
    #[test]
    fn product_matches_pointwise(a in small_series(), b in small_series(), x in -3.0f64..3.0) {
        let p = a.mul(&b).eval(x);
        let want = a.eval(x) * b.eval(x);
        prop_assert!((p - want).abs() <= 1e-8 * want.abs().max(1.0));
    }

    #[test]
    fn shift_matches_pointwise(a in small_series(), b in -2.0f64..2.0, x in -3.0f64..3.0) {
        let s = a.shifted(b).eval(x);
        let want = a.eval(x + b);
        prop_assert!((s - want).abs() <= 1e-8 * want.abs().max(1.0));
    }

    #[test]
    fn inner_product_matches_quadrature(a in small_series(), b in small_series()) {
        let rule = gauss_quadrature(16).unwrap();
        let q = rule.integrate(|x| a.eval(x) * b.eval(x));
        prop_assert!((a.inner_product(&b) - q).abs() <= 1e-9 * q.abs().max(1.0));
    }

    #[test]
    fn normalized_round_trip(a in small_series()) {
        let back = HermiteSeries::from_normalized(&a.to_normalized());
        for k in 0..=a.degree() {
            prop_assert!((back.coeff(k) - a.coeff(k)).abs() <= 1e-12 * a.coeff(k).abs().max(1.0));
        }
    }
}
