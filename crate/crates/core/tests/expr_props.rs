mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybridcat::expr::{parse_expr, parse_predicate, Expr, Predicate, Rel};

fn expr_strategy(smooth: bool) -> impl Strategy<Value = Expr> {
    any::<u64>().prop_map(move |seed| common::random_expr(&mut ChaCha8Rng::seed_from_u64(seed), 3, 4, smooth))
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0..2.0f64, 3)
}

fn no_params() -> BTreeMap<String, f64> {
    BTreeMap::new()
}

proptest! {
    #[test]
    fn printing_is_a_fixed_point_of_parsing(e in expr_strategy(false)) {
        let once = parse_expr(&e.to_string(), 3).unwrap();
        let twice = parse_expr(&once.to_string(), 3).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.to_string(), twice.to_string());
    }

    #[test]
    fn parsed_print_evaluates_like_the_original(e in expr_strategy(false), x in point()) {
        let p = parse_expr(&e.to_string(), 3).unwrap();
        match (e.eval(&x, &no_params()), p.eval(&x, &no_params())) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn symbolic_and_forward_derivatives_agree(e in expr_strategy(true), x in point()) {
        let Ok(grad) = e.gradient(&x, &no_params()) else { return Ok(()) };
        for (i, g) in grad.iter().enumerate() {
            let d = e.diff(i).unwrap().eval(&x, &no_params()).unwrap();
            prop_assert!((d - g).abs() <= 1e-9 * g.abs().max(1.0), "d/dx{}: {} vs {}", i, d, g);
        }
    }

    #[test]
    fn dual_value_matches_eval(e in expr_strategy(false), x in point()) {
        if let (Ok(v), Ok((dv, _))) = (e.eval(&x, &no_params()), e.eval_dual(&x, &no_params(), 0)) {
            prop_assert_eq!(v.to_bits(), dv.to_bits());
        }
    }

    #[test]
    fn substitution_commutes_with_evaluation(e in expr_strategy(false), x in point(), shift in -1.0..1.0f64) {
        // e(x0 + s, x1, x2) via substitution and via a shifted point
        let vars = vec![Expr::add(Expr::var(0), Expr::num(shift)), Expr::var(1), Expr::var(2)];
        let sub = e.substitute(&vars);
        let y = vec![x[0] + shift, x[1], x[2]];
        if let (Ok(a), Ok(b)) = (sub.eval(&x, &no_params()), e.eval(&y, &no_params())) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn robustness_sign_decides_strict_atoms(e in expr_strategy(true), x in point()) {
        let p = Predicate::cmp(e, Rel::Gt, Expr::num(0.0));
        if let Ok(r) = p.robustness(&x, &no_params()) {
            if r != 0.0 {
                prop_assert_eq!(p.holds(&x, &no_params(), 0.0).unwrap(), r > 0.0);
            }
        }
    }

    #[test]
    fn negation_flips_membership(c in -2.0..2.0f64, x in point()) {
        let p = parse_predicate(&format!("x0 + x1 <= {c} or x2 > 1"), 3).unwrap();
        let q = Predicate::negate(p.clone());
        prop_assert_ne!(p.holds(&x, &no_params(), 0.0).unwrap(), q.holds(&x, &no_params(), 0.0).unwrap());
    }

    #[test]
    fn equality_uses_the_tolerance(d in -1e-6..1e-6f64) {
        let p = parse_predicate("x0 == 1", 1).unwrap();
        prop_assert_eq!(p.holds(&[1.0 + d], &no_params(), 1e-6).unwrap(), d.abs() <= 1e-6);
    }
}

#[test]
fn parameters_are_bound_by_name() {
    let e = parse_expr("k_t*x0/(2*beta)", 1).unwrap();
    let params: BTreeMap<String, f64> = [("k_t".to_string(), 2.0), ("beta".to_string(), 0.5)].into();
    assert_eq!(e.eval(&[3.0], &params).unwrap(), 6.0);
    assert!(e.eval(&[3.0], &no_params()).is_err());
    assert_eq!(e.bind(&params).eval(&[3.0], &no_params()).unwrap(), 6.0);
}

#[test]
fn malformed_input_is_rejected() {
    for bad in ["x0 +", "sin(x0", "x3", "x0^x1^2", "foo(x0)", "1 2", ""] {
        assert!(parse_expr(bad, 3).is_err(), "{bad}");
    }
    for bad in ["x0 <", "x0 == 1 and", "(x0 > 1"] {
        assert!(parse_predicate(bad, 3).is_err(), "{bad}");
    }
}

#[test]
fn non_differentiable_points_are_reported() {
    let e = parse_expr("abs(x0)", 1).unwrap();
    assert!(e.gradient(&[0.0], &no_params()).is_err());
    assert_eq!(e.gradient(&[-2.0], &no_params()).unwrap(), vec![-1.0]);
    let m = parse_expr("min(x0, x1)", 2).unwrap();
    assert!(m.gradient(&[1.0, 1.0], &no_params()).is_err());
    assert_eq!(m.gradient(&[1.0, 2.0], &no_params()).unwrap(), vec![1.0, 0.0]);
}
