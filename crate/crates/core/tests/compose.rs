use std::sync::Arc;

use hybridcat::analysis::{
    ball_design, check_trapping_region, estimate_attracting_set, pull_back_isolating_neighborhood, validate_chain,
    Chain, Region, TrappingOptions,
};
use hybridcat::compose::{
    compose_template_anchor, coproduct, factor_reset, product, slice_mode, CheckOptions, FactorOptions,
    TemplateAnchorPair,
};
use hybridcat::exec::{simulate, SimConfig};
use hybridcat::expr::{parse_expr, parse_predicate, parse_vector};
use hybridcat::gallery::{self, HopperParams};
use hybridcat::graph::{EdgeId, VertexId};
use hybridcat::morphism::{check_subdivision_necessary, validate_semiconjugacy};
use hybridcat::system::{check_determinism, validate_system, HybridPoint};

fn hopper() -> gallery::HopperSuite {
    gallery::vertical_hopper_suite(HopperParams::default()).unwrap()
}

#[test]
fn product_projections_are_semiconjugacies() {
    let line = Arc::new(gallery::line_flow());
    let circle = Arc::new(gallery::circle_flow());
    let (p, pi1, pi2) = product(&line, &circle).unwrap();
    assert_eq!(p.dim(&VertexId::new("(v,c)")), Some(3));
    assert!(validate_system(&p, 200, 0).ok);
    for pi in [&pi1, &pi2] {
        assert!(validate_semiconjugacy(pi, 200, 1e-8, 0).ok);
    }
}

#[test]
fn product_of_hopper_and_rocking_block_is_deterministic() {
    let hop = hopper().h_hop;
    let rb = Arc::new(gallery::rocking_block(0.3, 0.5).unwrap());
    let (p, pi1, pi2) = product(&hop, &rb).unwrap();
    assert_eq!(p.modes().len(), 2);
    // (e,e'), (e,w), (v,e') for each block edge
    assert_eq!(p.edges().len(), 2 * 3);
    assert!(check_determinism(&p, 500, 0).ok);
    assert!(validate_semiconjugacy(&pi1, 100, 1e-8, 0).ok);
    assert!(validate_semiconjugacy(&pi2, 100, 1e-8, 0).ok);
}

#[test]
fn coproduct_prefixes_clashing_names() {
    let a = Arc::new(gallery::line_flow());
    let (s, i1, i2) = coproduct(&a, &a).unwrap();
    let names: Vec<&str> = s.modes().keys().map(|v| v.as_str()).collect();
    assert_eq!(names, vec!["1:v", "2:v"]);
    assert!(validate_semiconjugacy(&i1, 100, 1e-9, 0).ok);
    assert!(validate_semiconjugacy(&i2, 100, 1e-9, 0).ok);
}

#[test]
fn slice_is_a_subdivision() {
    let circle = Arc::new(gallery::circle_flow());
    let sub = slice_mode(&circle, &VertexId::new("c"), &parse_expr("x0", 2).unwrap(), 0).unwrap();
    let s = sub.system();
    assert_eq!(s.modes().len(), 2);
    assert_eq!(s.edges().len(), 2);
    assert!(validate_system(s, 300, 0).ok);
    assert!(validate_semiconjugacy(&sub.map, 200, 1e-8, 0).ok);
    assert!(check_subdivision_necessary(&sub.map, 200, 1e-6, 0).verdict);
}

#[test]
fn slice_rejects_kinked_cuts() {
    let circle = Arc::new(gallery::circle_flow());
    assert!(slice_mode(&circle, &VertexId::new("c"), &parse_expr("abs(x0)", 2).unwrap(), 0).is_err());
    assert!(slice_mode(&circle, &VertexId::new("nope"), &parse_expr("x0", 2).unwrap(), 0).is_err());
}

#[test]
fn factored_reset_reproduces_the_jump() {
    let hop = hopper().h_hop;
    let f = parse_vector(&["-x1"], 2).unwrap();
    let g = parse_vector(&["0", "x0"], 1).unwrap();
    let sub = factor_reset(&hop, &EdgeId::new("e"), &f, &g, &parse_predicate("true", 1).unwrap(), 1, FactorOptions::default())
        .unwrap();
    assert!(validate_semiconjugacy(&sub.map, 200, 1e-8, 0).ok);
    let s = sub.system();
    assert_eq!(s.modes().len(), 2);
    let start = HybridPoint::new("v", vec![-1.0, 0.5]);
    let cfg = SimConfig { horizon: 8.0, ..Default::default() };
    let fine = simulate(s, &start, &cfg).unwrap();
    let coarse = simulate(&hop, &start, &cfg).unwrap();
    // every original jump becomes two jumps through the intermediate mode
    assert_eq!(fine.jumps.len(), 2 * coarse.jumps.len());
    let (a, b) = (fine.final_point(), coarse.final_point());
    assert!((a.x[0] - b.x[0]).abs() < 1e-8 && (a.x[1] - b.x[1]).abs() < 1e-8);
}

#[test]
fn wrong_factorisation_is_rejected() {
    let hop = hopper().h_hop;
    let f = parse_vector(&["x1"], 2).unwrap();
    let g = parse_vector(&["0", "x0"], 1).unwrap();
    let r = factor_reset(&hop, &EdgeId::new("e"), &f, &g, &parse_predicate("true", 1).unwrap(), 1, FactorOptions::default());
    assert!(r.is_err());
}

#[test]
fn hopper_pairs_pass_their_checks() {
    let suite = hopper();
    for mut pair in [suite.pair_hop(), suite.pair_k()] {
        let c = pair.check(CheckOptions::default());
        assert!(c.subdivision.verdict, "{:?}", c.subdivision);
        assert!(c.embedding.verdict, "{:?}", c.embedding);
    }
}

#[test]
fn composing_with_the_identity_pair() {
    let suite = hopper();
    let pair = suite.pair_hop();
    let id = TemplateAnchorPair::identity(pair.anchor().clone());
    let composed = compose_template_anchor(&pair, &id, 1e-9, Some(CheckOptions::default())).unwrap();
    assert!(validate_semiconjugacy(&composed.p, 200, 1e-8, 0).ok);
    assert!(validate_semiconjugacy(&composed.i, 200, 1e-8, 0).ok);
    assert!(composed.checks.as_ref().unwrap().embedding.verdict);
}

#[test]
fn trapping_region_of_the_smooth_hopper_pulls_back() {
    let suite = hopper();
    let w = suite.annulus(0.5, 4.0);
    let opts = TrappingOptions { samples: 100, horizon: 30.0, t_bound: 15.0, ..Default::default() };
    assert!(check_trapping_region(&suite.l, &w, &opts).ok);
    let est = estimate_attracting_set(&suite.l, &w, 40.0, 7, &SimConfig::default(), None);
    assert_eq!(est.failed, 0);
    for p in &est.points {
        let r = (p.x[0] * p.x[0] + p.x[1] * p.x[1]).sqrt();
        assert!((r - 2.0).abs() < 1e-3, "{r}");
    }
    // pulled back along the double cover of the cut circle it is still a region on each mode
    let pulled = pull_back_isolating_neighborhood(&suite.p, &w);
    assert_eq!(pulled.margins.len(), suite.k.modes().len());
}

#[test]
fn shrunken_annulus_is_not_trapping() {
    let suite = hopper();
    let w = Region::parse(&suite.l, &[("v", "min(x0^2 + x1^2 - 6.25, 16 - x0^2 - x1^2)")]).unwrap();
    let r = check_trapping_region(&suite.l, &w, &TrappingOptions { samples: 50, ..Default::default() });
    assert!(!r.ok);
    assert!(r.invariance.failures > 0);
}

#[test]
fn ball_design_sizes() {
    assert_eq!(ball_design(1, 0.1, 2).len(), 4);
    assert_eq!(ball_design(2, 0.1, 2).len(), 16);
    for v in ball_design(3, 0.2, 3) {
        assert!(v.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.2 + 1e-12);
    }
}

#[test]
fn chains_round_trip_and_tampering_is_caught() {
    let h = gallery::rocking_block(0.3, 0.5).unwrap();
    let tr = simulate(&h, &HybridPoint::new("L", vec![0.5, 0.0]), &SimConfig { horizon: 2.0, ..Default::default() }).unwrap();
    let chain = Chain::from_trace(&tr, 0.01, 1.0).unwrap();
    let back = Chain::from_json(&chain.to_json()).unwrap();
    assert_eq!(back.to_json(), chain.to_json());
    assert!(validate_chain(&h, &back, 1e-6, &SimConfig::default()).valid);
    let mut bad = back.clone();
    bad.links[0].post.x[1] += 0.5;
    let report = validate_chain(&h, &bad, 1e-6, &SimConfig::default());
    assert!(!report.valid);
    assert!(!report.violations.is_empty());
}
