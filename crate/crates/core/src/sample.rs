//! Seeded sampling of predicate-defined sets.
//!
//! Points are drawn uniformly from a bounding box and kept when the
//! predicate holds. Sets cut out by `==` atoms have measure zero, so every
//! draw is first pushed onto the top-level equality constraints with a
//! minimum-norm Gauss–Newton iteration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::expr::{Expr, Params, Predicate, Rel};

pub static NO_PARAMS: Params = Params::new();

pub const DEFAULT_HALF_WIDTH: f64 = 10.0;

/// Deterministic generator for a (seed, purpose) pair.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn default_bounds(dim: usize) -> Vec<(f64, f64)> {
    vec![(-DEFAULT_HALF_WIDTH, DEFAULT_HALF_WIDTH); dim]
}

#[derive(Clone, Debug, Default)]
pub struct SampleOutcome {
    pub points: Vec<Vec<f64>>,
    pub tries: usize,
}

impl SampleOutcome {
    pub fn starved(&self) -> bool {
        self.points.is_empty()
    }
}

/// Equality atoms of the form `x_i == c` (either side), with `c` constant.
fn coordinate_pins(pred: &Predicate, params: &Params) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    collect_pins(pred, params, &mut out);
    out
}

fn collect_pins(pred: &Predicate, params: &Params, out: &mut Vec<(usize, f64)>) {
    match pred {
        Predicate::Cmp(a, Rel::Eq, b) => {
            let pin = match (a, b) {
                (Expr::Var(i), c) | (c, Expr::Var(i)) if c.max_var().is_none() => {
                    c.eval(&[], params).ok().map(|v| (*i, v))
                }
                _ => None,
            };
            out.extend(pin);
        }
        Predicate::And(ps) => ps.iter().for_each(|p| collect_pins(p, params, out)),
        _ => {}
    }
}

/// Project `x` onto `{c(x) = 0}` for the top-level equalities of `pred`.
pub struct Projector<'a> {
    constraints: Vec<Expr>,
    pins: Vec<(usize, f64)>,
    params: &'a Params,
}

impl<'a> Projector<'a> {
    pub fn new(pred: &Predicate, params: &'a Params) -> Self {
        Projector { constraints: pred.equality_constraints(), pins: coordinate_pins(pred, params), params }
    }

    pub fn from_constraints(constraints: Vec<Expr>, params: &'a Params) -> Self {
        Projector { constraints, pins: Vec::new(), params }
    }

    pub fn is_trivial(&self) -> bool {
        self.constraints.is_empty()
    }

    fn residual(&self, x: &[f64]) -> Option<DVector<f64>> {
        let vals: Option<Vec<f64>> = self.constraints.iter().map(|c| c.eval(x, self.params).ok()).collect();
        vals.map(DVector::from_vec)
    }

    fn snap(&self, x: &mut [f64]) {
        for &(i, v) in &self.pins {
            if i < x.len() {
                x[i] = v;
            }
        }
    }

    /// Gauss–Newton with minimum-norm steps; `None` if it does not converge.
    pub fn project(&self, x: &[f64], tol: f64) -> Option<Vec<f64>> {
        let mut y = x.to_vec();
        if self.constraints.is_empty() {
            return Some(y);
        }
        self.snap(&mut y);
        let n = y.len();
        let m = self.constraints.len();
        for _ in 0..60 {
            let r = self.residual(&y)?;
            if r.amax() <= tol {
                self.snap(&mut y);
                return Some(y);
            }
            let mut jac = DMatrix::zeros(m, n);
            for (i, c) in self.constraints.iter().enumerate() {
                for k in 0..n {
                    jac[(i, k)] = c.eval_dual(&y, self.params, k).ok()?.1;
                }
            }
            let svd = jac.svd(true, true);
            let step = svd.solve(&r, 1e-12).ok()?;
            if !step.iter().all(|s| s.is_finite()) {
                return None;
            }
            for k in 0..n {
                y[k] -= step[k];
            }
        }
        let r = self.residual(&y)?;
        if r.amax() <= tol {
            self.snap(&mut y);
            Some(y)
        } else {
            None
        }
    }
}

/// Rejection sampler over a box with projection onto equality atoms.
pub fn sample_set(
    pred: &Predicate,
    dim: usize,
    bounds: &[(f64, f64)],
    params: &Params,
    eq_tol: f64,
    n: usize,
    max_tries: usize,
    rng: &mut impl Rng,
) -> SampleOutcome {
    let mut out = SampleOutcome::default();
    if dim == 0 {
        out.tries = 1;
        if pred.contains(&[], params, eq_tol) {
            out.points.push(Vec::new());
        }
        return out;
    }
    let projector = Projector::new(pred, params);
    let proj_tol = (eq_tol * 1e-3).max(1e-14);
    while out.points.len() < n && out.tries < max_tries {
        out.tries += 1;
        let raw: Vec<f64> = bounds.iter().map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect();
        let Some(x) = projector.project(&raw, proj_tol) else { continue };
        if pred.contains(&x, params, eq_tol) {
            out.points.push(x);
        }
    }
    out
}

/// Default try budget for `n` requested samples.
pub fn try_budget(n: usize) -> usize {
    (n * 2000).max(20_000)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_predicate;

    #[test]
    fn samples_circle_and_guard() {
        let circle = parse_predicate("x0^2+x1^2 == 1 and x0 <= 0", 2).unwrap();
        let mut rng = rng_for(7, "circle");
        let s = sample_set(&circle, 2, &default_bounds(2), &NO_PARAMS, 1e-9, 100, 10_000, &mut rng);
        assert_eq!(s.points.len(), 100);
        for p in &s.points {
            assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-9);
            assert!(p[0] <= 0.0);
        }
        let guard = parse_predicate("x0 == 0 and x1 >= 0", 2).unwrap();
        let s = sample_set(&guard, 2, &default_bounds(2), &NO_PARAMS, 1e-9, 50, 10_000, &mut rng);
        assert_eq!(s.points.len(), 50);
        assert!(s.points.iter().all(|p| p[0] == 0.0 && p[1] >= 0.0));
    }

    #[test]
    fn pins_are_exact() {
        let guard = parse_predicate("x0 == 0.1", 1).unwrap();
        let mut rng = rng_for(1, "pin");
        let s = sample_set(&guard, 1, &default_bounds(1), &NO_PARAMS, 1e-9, 20, 1000, &mut rng);
        assert!(s.points.iter().all(|p| p[0] == 0.1));
    }

    #[test]
    fn empty_set_starves() {
        let p = parse_predicate("x0 > 1 and x0 < 0", 1).unwrap();
        let mut rng = rng_for(1, "empty");
        let s = sample_set(&p, 1, &default_bounds(1), &NO_PARAMS, 1e-9, 5, 500, &mut rng);
        assert!(s.starved());
        assert_eq!(s.tries, 500);
    }

    #[test]
    fn same_seed_same_points() {
        let p = parse_predicate("x0 + x1 > 0", 2).unwrap();
        let a = sample_set(&p, 2, &default_bounds(2), &NO_PARAMS, 1e-9, 10, 1000, &mut rng_for(3, "t"));
        let b = sample_set(&p, 2, &default_bounds(2), &NO_PARAMS, 1e-9, 10, 1000, &mut rng_for(3, "t"));
        assert_eq!(a.points, b.points);
    }
}
