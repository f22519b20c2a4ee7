use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use hybridcat::exec::{
    is_prefix, push_trace, refine_trajectory, refined_interval_image, simulate, trace_distance, Endpoint,
    ExecutionTrace, Integrator, JumpKind, SimConfig, TimeTrajectory,
};
use hybridcat::gallery;
use hybridcat::graph::{EdgeId, VertexId};
use hybridcat::morphism::Semiconjugacy;
use hybridcat::system::{HybridPoint, HybridSystem, Mode, ResetEdge};

const G: f64 = 9.81;

fn ball(restitution: f64) -> HybridSystem {
    let m = Mode::parse(2, &["x1", "-9.81"], "x0 >= 0", "x0 >= 0 and not (x0 == 0 and x1 <= 0)")
        .unwrap()
        .with_bounds(vec![(0.0, 3.0), (-5.0, 5.0)]);
    let reset = format!("-{restitution}*x1");
    let e = ResetEdge::parse("air", "air", 2, "x0 == 0 and x1 <= 0", "x0", &["0", &reset]).unwrap();
    HybridSystem::from_parts([(VertexId::new("air"), m)], [(EdgeId::new("bounce"), e)], BTreeMap::new()).unwrap()
}

fn decay(a: f64) -> HybridSystem {
    let m = Mode::parse(1, &[&format!("{a}*x0")], "true", "true").unwrap().with_bounds(vec![(-2.0, 2.0)]);
    HybridSystem::from_parts([(VertexId::new("v"), m)], [], BTreeMap::new()).unwrap()
}

#[test]
fn bouncing_ball_impact_times() {
    let h = ball(0.5);
    let tr = simulate(&h, &HybridPoint::new("air", vec![1.0, 0.0]), &SimConfig { horizon: 2.0, ..Default::default() })
        .unwrap();
    // free fall from rest, then flights of length 2v/g with v halved at each bounce
    let mut t = (2.0 / G).sqrt();
    let mut v = G * t;
    for j in tr.jumps.iter().take(4) {
        assert!((j.time - t).abs() <= 1e-8, "{} vs {t}", j.time);
        assert!((j.pre.x[1] + v).abs() <= 1e-7);
        assert_eq!(j.kind, JumpKind::Edge(EdgeId::new("bounce")));
        v *= 0.5;
        t += 2.0 * v / G;
    }
    assert!(tr.jumps.len() >= 4);
}

#[test]
fn linear_flow_matches_closed_form() {
    for a in [-1.3, -0.2, 0.4] {
        let tr = simulate(&decay(a), &HybridPoint::new("v", vec![1.5]), &SimConfig { horizon: 3.0, ..Default::default() })
            .unwrap();
        let end = tr.final_point().x[0];
        assert!((end - 1.5 * (3.0 * a).exp()).abs() <= 1e-8, "a={a}: {end}");
        assert!(tr.classification.horizon_truncated);
        for s in &tr.segments[0].samples {
            assert!((s.x[0] - 1.5 * (a * s.t).exp()).abs() <= 1e-8);
        }
    }
}

#[test]
fn fixed_step_and_adaptive_agree() {
    let h = ball(0.7);
    let start = HybridPoint::new("air", vec![0.5, 1.0]);
    let adaptive = simulate(&h, &start, &SimConfig { horizon: 1.5, ..Default::default() }).unwrap();
    let fixed =
        simulate(&h, &start, &SimConfig { horizon: 1.5, integrator: Integrator::Rk4, dt_max: 1e-3, ..Default::default() })
            .unwrap();
    assert_eq!(adaptive.jumps.len(), fixed.jumps.len());
    for (a, b) in adaptive.jumps.iter().zip(&fixed.jumps) {
        assert!((a.time - b.time).abs() <= 1e-8);
    }
}

#[test]
fn shorter_horizon_gives_a_prefix() {
    let h = ball(0.6);
    let start = HybridPoint::new("air", vec![1.0, 0.0]);
    let short = simulate(&h, &start, &SimConfig { horizon: 1.0, ..Default::default() }).unwrap();
    let long = simulate(&h, &start, &SimConfig { horizon: 2.0, ..Default::default() }).unwrap();
    assert!(is_prefix(&short, &long, 1e-9));
    assert!(!is_prefix(&long, &short, 1e-9));
}

#[test]
fn zeno_is_detected() {
    let tr = simulate(&ball(0.5), &HybridPoint::new("air", vec![1.0, 0.0]), &SimConfig { horizon: 10.0, ..Default::default() })
        .unwrap();
    // the geometric series of flight times sums to 3·sqrt(2/g)
    let zeno_time = 3.0 * (2.0 / G).sqrt();
    assert!(tr.classification.zeno_detected);
    assert!(tr.stop_time() < zeno_time + 0.1 && tr.stop_time() > zeno_time - 0.1);
}

#[test]
fn start_outside_active_set_is_an_error() {
    assert!(simulate(&ball(0.5), &HybridPoint::new("air", vec![-1.0, 0.0]), &SimConfig::default()).is_err());
    assert!(simulate(&ball(0.5), &HybridPoint::new("ground", vec![1.0, 0.0]), &SimConfig::default()).is_err());
}

#[test]
fn traces_round_trip_through_json_and_csv() {
    let tr = simulate(&ball(0.5), &HybridPoint::new("air", vec![1.0, 0.3]), &SimConfig { horizon: 1.5, ..Default::default() })
        .unwrap();
    let json = ExecutionTrace::from_json(&tr.to_json()).unwrap();
    assert_eq!(json, tr);
    let csv = ExecutionTrace::from_csv(&tr.to_csv()).unwrap();
    assert_eq!(csv.segments, tr.segments);
    assert_eq!(csv.trajectory, tr.trajectory);
    assert!(csv.jumps.iter().all(|j| j.kind == JumpKind::Unlabeled));
    assert_eq!(trace_distance(&csv, &tr), 0.0);
}

#[test]
fn identity_push_is_the_same_trace() {
    let h = Arc::new(gallery::circle_flow());
    let tr = simulate(&h, &HybridPoint::new("c", vec![0.0, 1.0]), &SimConfig { horizon: 4.0, ..Default::default() }).unwrap();
    let pushed = push_trace(&Semiconjugacy::identity(h), &tr).unwrap();
    assert_eq!(trace_distance(&tr, &pushed), 0.0);
}

#[test]
fn trajectory_constraints() {
    assert!(TimeTrajectory::new(vec![0.0], Endpoint::Open).is_err());
    assert!(TimeTrajectory::new(vec![0.0, 1.0, 0.5], Endpoint::Open).is_err());
    assert!(TimeTrajectory::new(vec![0.0, f64::INFINITY], Endpoint::Closed).is_err());
    assert!(TimeTrajectory::new(vec![0.0, f64::INFINITY, 1.0], Endpoint::Open).is_err());
    let t = TimeTrajectory::new(vec![0.0, 1.0, 1.0], Endpoint::Open).unwrap();
    assert_eq!(t.endpoint(), Endpoint::Closed);
    assert_eq!(t.point_set(1.0).len(), 2);
}

fn trajectory() -> impl Strategy<Value = TimeTrajectory> {
    (proptest::collection::vec(prop_oneof![Just(0.0), 0.1..2.0f64], 1..6), any::<bool>(), any::<bool>()).prop_map(
        |(steps, open, infinite)| {
            let mut times = vec![0.0];
            for s in steps {
                times.push(times.last().unwrap() + s);
            }
            if infinite {
                times.push(f64::INFINITY);
            }
            TimeTrajectory::new(times, if open || infinite { Endpoint::Open } else { Endpoint::Closed }).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn refinement_preserves_point_sets(tau in trajectory(), fracs in proptest::collection::vec(0.0..=1.0f64, 0..5), probes in proptest::collection::vec(-1.0..15.0f64, 20)) {
        let hi = tau.times().iter().copied().filter(|t| t.is_finite()).fold(0.0, f64::max) + 1.0;
        let extra: Vec<f64> = fracs.iter().map(|f| f * hi).filter(|&t| t <= tau.stop()).collect();
        let (fine, k) = refine_trajectory(&tau, &extra).unwrap();
        prop_assert_eq!(k.len(), tau.times().len());
        prop_assert!(k.windows(2).all(|w| w[0] < w[1]));
        for (j, &kj) in k.iter().enumerate() {
            prop_assert_eq!(fine.times()[kj], tau.times()[j]);
        }
        for t in probes.into_iter().chain(fine.times().iter().copied().filter(|t| t.is_finite())) {
            let image: std::collections::BTreeSet<usize> =
                fine.point_set(t).into_iter().map(|i| refined_interval_image(&k, i)).collect();
            prop_assert_eq!(image, tau.point_set(t));
        }
    }

    #[test]
    fn ball_energy_decreases_across_bounces(h0 in 0.2..2.0f64, v0 in -2.0..2.0f64) {
        let tr = simulate(&ball(0.8), &HybridPoint::new("air", vec![h0, v0]), &SimConfig { horizon: 3.0, ..Default::default() }).unwrap();
        let energy = |x: &[f64]| G * x[0] + 0.5 * x[1] * x[1];
        for j in &tr.jumps {
            prop_assert!(j.pre.x[0].abs() <= 1e-9);
            prop_assert!(energy(&j.post.x) < energy(&j.pre.x));
        }
        for s in &tr.segments {
            let e0 = energy(&s.start().x);
            for p in &s.samples {
                prop_assert!((energy(&p.x) - e0).abs() <= 1e-7 * e0.max(1.0));
            }
        }
    }
}
