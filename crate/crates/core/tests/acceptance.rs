mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybridcat::analysis::{chain_search, check_trapping_region, validate_chain, SearchOptions, Target, TrappingOptions};
use hybridcat::compose::{product, sequential_compose, slice_mode};
use hybridcat::exec::{
    fundamentalize, pullback_execution, push_trace, refine_trajectory, refined_interval_image, simulate, trace_distance,
    Endpoint, SimConfig, TimeTrajectory,
};
use hybridcat::expr::{parse_expr, Expr, ExprError};
use hybridcat::gallery::{self, HopperParams};
use hybridcat::graph::{enumerate_morphisms, graph_product, graph_pushout, Graph, GraphMorphism};
use hybridcat::morphism::{compose_semiconjugacies, validate_semiconjugacy};
use hybridcat::system::{check_determinism, HybridPoint};

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// 1 ------------------------------------------------------------------------

fn hopper_limit_cycle() -> Verdict {
    let clock = Instant::now();
    let suite = gallery::vertical_hopper_suite(HopperParams { k_t: 2.0, beta: 0.5, omega: 1.0 }).map_err(|e| e.to_string())?;
    let radius = suite.params.radius();
    let cfg = SimConfig { horizon: 100.0, ..Default::default() };
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        // half annulus x0 <= 0, radii spread over [0.5, 4]
        let theta = std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * (i as f64 + 0.5) / 10.0;
        let r = 0.5 + 3.5 * i as f64 / 9.0;
        let start = HybridPoint::new("v", vec![r * theta.cos(), r * theta.sin()]);
        let tr = simulate(&suite.h_hop, &start, &cfg).map_err(|e| format!("ic {i}: {e}"))?;
        if tr.stop_time() < 100.0 {
            return Err(format!("ic {i} stopped at t={} ({:?})", tr.stop_time(), tr.classification));
        }
        worst = worst.max((norm(&tr.final_point().x) - radius).abs());
    }
    let secs = clock.elapsed().as_secs_f64();
    ensure(worst <= 1e-2 && secs < 10.0, format!("max | |x| - {radius} | = {worst:.2e}, {secs:.2} s"))
}

// 2 ------------------------------------------------------------------------

fn hopper_diagram() -> Verdict {
    let suite = gallery::vertical_hopper_suite(HopperParams::default()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (name, m) in suite.maps() {
        let r = validate_semiconjugacy(m, 200, 1e-8, 0);
        if !r.ok || r.any_starved() {
            return Err(format!("{name}: ok={} starved={} residual {:e}", r.ok, r.any_starved(), r.max_residual));
        }
        worst = worst.max(r.max_residual);
    }
    let c = suite.c.bound();
    let mut gap: f64 = 0.0;
    let mut points = 0;
    for ([a1, a0], [b1, b0]) in suite.squares() {
        let upper = compose_semiconjugacies(a1, a0).map_err(|e| e.to_string())?;
        let lower = compose_semiconjugacies(b1, b0).map_err(|e| e.to_string())?;
        if upper.graph_map() != lower.graph_map() {
            return Err("square graph maps differ".into());
        }
        for (v, m) in c.modes() {
            for x in c.sample(v, &m.active, 200, 0, "square").points {
                let p = HybridPoint { mode: v.clone(), x };
                let (u, l) = (upper.apply(&p).map_err(|e| e.to_string())?, lower.apply(&p).map_err(|e| e.to_string())?);
                if u.mode != l.mode {
                    return Err(format!("square modes differ at {p:?}"));
                }
                gap = u.x.iter().zip(&l.x).fold(gap, |g, (a, b)| g.max((a - b).abs()));
                points += 1;
            }
        }
    }
    ensure(
        worst <= 1e-8 && gap <= 1e-8 && points > 0,
        format!("8 maps, max residual {worst:.2e}; squares agree within {gap:.2e} on {points} points"),
    )
}

// 3 ------------------------------------------------------------------------

fn rocking_block_resets() -> Verdict {
    let event_tol = SimConfig::default().event_tol;
    let (mut jumps, mut worst_x, mut worst_ratio) = (0, 0.0f64, 0.0f64);
    for alpha in [0.1, 0.3, 0.6] {
        for r in [0.3, 0.5, 0.9] {
            let h = gallery::rocking_block(alpha, r).map_err(|e| e.to_string())?;
            // half of the largest speed that keeps (x0, v) active
            let speed = |x0: f64| 0.5 * (2.0 * (1.0 - (alpha * (1.0 - x0)).cos())).sqrt() / alpha;
            let starts = [("L", 0.5, 0.0), ("L", 0.9, -speed(0.9)), ("R", 0.2, speed(0.2))];
            for (mode, x0, x1) in starts {
                if !h.in_active(&mode.into(), &[x0, x1]) {
                    return Err(format!("alpha={alpha}: start ({x0}, {x1}) not active in {mode}"));
                }
                let tr = simulate(&h, &HybridPoint::new(mode, vec![x0, x1]), &SimConfig::default())
                    .map_err(|e| format!("alpha={alpha} r={r}: {e}"))?;
                for j in &tr.jumps {
                    let v = j.pre.x[1];
                    worst_x = worst_x.max(j.pre.x[0].abs()).max(j.post.x[0].abs());
                    if v != 0.0 {
                        worst_ratio = worst_ratio.max((j.post.x[1] / v + r).abs());
                    } else if j.post.x[1] != 0.0 {
                        worst_ratio = f64::INFINITY;
                    }
                    jumps += 1;
                }
            }
        }
    }
    ensure(
        jumps > 0 && worst_x <= event_tol && worst_ratio <= 1e-9,
        format!("{jumps} jumps, max |x0| {worst_x:.2e}, max ratio error {worst_ratio:.2e}"),
    )
}

// 4 ------------------------------------------------------------------------

fn sequential_split() -> Verdict {
    let clock = Instant::now();
    let (h, k) = gallery::sequential_example_pair();
    let hk = sequential_compose(&h, &k).map_err(|e| e.to_string())?;
    let sys = hk.carrier.clone();
    let z = hybridcat::graph::VertexId::new("z");
    let start = HybridPoint::new("v", vec![1.0]);
    let tr = simulate(&sys, &start, &SimConfig { horizon: 50.0, ..Default::default() }).map_err(|e| e.to_string())?;
    let entered = tr.segments.iter().any(|s| s.mode == z);
    let target = Target::modes([z]);
    let opts = SearchOptions { budget: 10_000, ..Default::default() };
    let found = chain_search(&sys, &start, &target, 0.05, 1.0, &opts).map_err(|e| e.to_string())?;
    let chain_ok = match found.chain() {
        Some(c) => {
            let rep = validate_chain(&sys, c, opts.tol, &opts.sim);
            rep.valid && c.end().mode.as_str() == "z" && found.stats().expanded <= 10_000
        }
        None => false,
    };
    let exact = chain_search(&sys, &start, &target, 0.0, 1.0, &opts).map_err(|e| e.to_string())?;
    let secs = clock.elapsed().as_secs_f64();
    ensure(
        !entered && chain_ok && exact.chain().is_none() && secs < 5.0,
        format!(
            "simulation enters z: {entered}; eps=0.05 chain validated: {chain_ok} ({} expansions); eps=0 not found: {}; {secs:.2} s",
            found.stats().expanded,
            exact.chain().is_none()
        ),
    )
}

// 5 ------------------------------------------------------------------------

type HomKey = (BTreeMap<hybridcat::graph::VertexId, hybridcat::graph::VertexId>, BTreeMap<hybridcat::graph::EdgeId, hybridcat::graph::GenEdge>);

fn key(f: &GraphMorphism) -> HomKey {
    (f.vertex_map().clone(), f.edge_map().clone())
}

fn then(f: &GraphMorphism, g: &GraphMorphism) -> GraphMorphism {
    f.then(g).expect("composable")
}

struct Homs {
    graphs: Vec<Arc<Graph>>,
    cache: HashMap<(usize, usize), Arc<Vec<GraphMorphism>>>,
}

impl Homs {
    fn get(&mut self, a: usize, b: usize) -> Arc<Vec<GraphMorphism>> {
        let g = &self.graphs;
        self.cache.entry((a, b)).or_insert_with(|| Arc::new(enumerate_morphisms(&g[a], &g[b]))).clone()
    }
}

fn category_laws() -> Verdict {
    let clock = Instant::now();
    let c3 = common::graph_catalog(3, 3);
    let c2 = common::graph_catalog(2, 2);

    // unit laws, exhaustive over C3
    let mut units = 0usize;
    for g in &c3 {
        for h in &c3 {
            let (ig, ih) = (GraphMorphism::identity(g.clone()), GraphMorphism::identity(h.clone()));
            for f in enumerate_morphisms(g, h) {
                if then(&ig, &f) != f || then(&f, &ih) != f {
                    return Err(format!("unit law fails for {f:?}"));
                }
                units += 1;
            }
        }
    }

    // associativity: exhaustive over C2, seeded random triples over C3
    let mut assoc = 0usize;
    let mut homs2 = Homs { graphs: c2.clone(), cache: HashMap::new() };
    let n2 = c2.len();
    for a in 0..n2 {
        for b in 0..n2 {
            let fs = homs2.get(a, b);
            if fs.is_empty() {
                continue;
            }
            for c in 0..n2 {
                let gs = homs2.get(b, c);
                if gs.is_empty() {
                    continue;
                }
                let fg: Vec<GraphMorphism> = fs.iter().flat_map(|f| gs.iter().map(move |g| then(f, g))).collect();
                for d in 0..n2 {
                    let hs = homs2.get(c, d);
                    for (i, f) in fs.iter().enumerate() {
                        for (j, g) in gs.iter().enumerate() {
                            let gh: Vec<GraphMorphism> = hs.iter().map(|h| then(g, h)).collect();
                            for (h, gh) in hs.iter().zip(&gh) {
                                if then(&fg[i * gs.len() + j], h) != then(f, gh) {
                                    return Err("associativity fails".into());
                                }
                                assoc += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut homs3 = Homs { graphs: c3.clone(), cache: HashMap::new() };
    let mut random_assoc = 0usize;
    while random_assoc < 20_000 {
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..c3.len())).collect();
        let (fs, gs, hs) = (homs3.get(idx[0], idx[1]), homs3.get(idx[1], idx[2]), homs3.get(idx[2], idx[3]));
        if fs.is_empty() || gs.is_empty() || hs.is_empty() {
            continue;
        }
        let f = &fs[rng.gen_range(0..fs.len())];
        let g = &gs[rng.gen_range(0..gs.len())];
        let h = &hs[rng.gen_range(0..hs.len())];
        if then(&then(f, g), h) != then(f, &then(g, h)) {
            return Err("associativity fails on a random C3 triple".into());
        }
        random_assoc += 1;
    }

    // product: Hom(K, G⊠H) -> Hom(K, G) × Hom(K, H) is a bijection
    let mut cones = 0usize;
    for g in &c2 {
        for h in &c2 {
            let (p, pi1, pi2) = graph_product(g, h);
            for k in &c3 {
                let to_g = enumerate_morphisms(k, g).len();
                let to_h = enumerate_morphisms(k, h).len();
                let mut images = BTreeSet::new();
                for u in enumerate_morphisms(k, &p) {
                    if !images.insert((key(&then(&u, &pi1)), key(&then(&u, &pi2)))) {
                        return Err("product: two mediating maps for one cone".into());
                    }
                }
                if images.len() != to_g * to_h {
                    return Err(format!("product: {} mediating maps for {} cones", images.len(), to_g * to_h));
                }
                cones += images.len();
            }
        }
    }

    // pushout of monic spans: each commuting cocone has exactly one mediating map
    let mut spans = Vec::new();
    for a in &c2 {
        for b in &c2 {
            let fs: Vec<GraphMorphism> = enumerate_morphisms(a, b).into_iter().filter(|f| f.classify().monic).collect();
            for c in &c2 {
                for g in enumerate_morphisms(a, c).into_iter().filter(|g| g.classify().monic) {
                    for f in &fs {
                        spans.push((f.clone(), g.clone()));
                    }
                }
            }
        }
    }
    let check_pushout = |f: &GraphMorphism, g: &GraphMorphism, q: &Arc<Graph>| -> Result<usize, String> {
        let (p, i1, i2) = graph_pushout(f, g).map_err(|e| e.to_string())?;
        if then(f, &i1) != then(g, &i2) {
            return Err("pushout square does not commute".into());
        }
        let mut mediating: BTreeMap<(HomKey, HomKey), usize> = BTreeMap::new();
        for w in enumerate_morphisms(&p, q) {
            *mediating.entry((key(&then(&i1, &w)), key(&then(&i2, &w)))).or_default() += 1;
        }
        let mut cocones = 0;
        let vs = enumerate_morphisms(g.cod(), q);
        for u in enumerate_morphisms(f.cod(), q) {
            let fu = then(f, &u);
            for v in &vs {
                if then(g, v) == fu {
                    cocones += 1;
                    if mediating.get(&(key(&u), key(v))) != Some(&1) {
                        return Err("pushout: cocone without a unique mediating map".into());
                    }
                }
            }
        }
        if cocones != mediating.len() {
            return Err("pushout: mediating maps outside the commuting cocones".into());
        }
        Ok(cocones)
    };
    let mut cocones = 0usize;
    for (f, g) in &spans {
        for q in &c2 {
            cocones += check_pushout(f, g, q)?;
        }
    }
    for _ in 0..300 {
        let (f, g) = &spans[rng.gen_range(0..spans.len())];
        cocones += check_pushout(f, g, &c3[rng.gen_range(0..c3.len())])?;
    }

    let secs = clock.elapsed().as_secs_f64();
    ensure(
        secs < 60.0,
        format!(
            "{units} unit checks (C3), {assoc} + {random_assoc} associativity triples, {cones} product cones, {} monic spans / {cocones} cocones; {secs:.1} s",
            spans.len()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn determinism_preserved() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    let mut tested = 0;
    for i in 0..50 {
        let h1 = Arc::new(common::random_deterministic_system(&mut rng, "a"));
        let h2 = Arc::new(common::random_deterministic_system(&mut rng, "b"));
        for (n, h) in [("first", &h1), ("second", &h2)] {
            if !check_determinism(h, 1000, i).ok {
                return Err(format!("pair {i}: {n} factor is not deterministic"));
            }
        }
        let (p, _, _) = product(&h1, &h2).map_err(|e| format!("pair {i}: {e}"))?;
        let r = check_determinism(&p, 1000, i);
        violations += r.violations;
        tested += r.tested;
    }
    ensure(violations == 0, format!("50 products, {tested} samples, {violations} violations"))
}

// 7 ------------------------------------------------------------------------

fn subdivision_round_trip() -> Verdict {
    let circle = Arc::new(gallery::circle_flow());
    let cut = parse_expr("x0", 2).map_err(|e| e.to_string())?;
    let sub = slice_mode(&circle, &"c".into(), &cut, 0).map_err(|e| e.to_string())?;
    let cfg = SimConfig { horizon: 20.0, ..Default::default() };
    let tr = simulate(&circle, &HybridPoint::new("c", vec![1.0, 0.0]), &cfg).map_err(|e| e.to_string())?;
    let up = pullback_execution(&sub, &tr).map_err(|e| e.to_string())?;
    let back = fundamentalize(&push_trace(&sub.map, &up).map_err(|e| e.to_string())?);
    let d = trace_distance(&tr, &back);
    let tol = 10.0 * cfg.event_tol;
    ensure(
        d <= tol && back.jumps.is_empty() && up.jumps.len() >= 6,
        format!("{} jumps in the slice, sup distance {d:.2e} (tol {tol:.0e})", up.jumps.len()),
    )
}

// 8 ------------------------------------------------------------------------

fn has_kinks(e: &Expr) -> bool {
    let s = e.to_string();
    s.contains("abs") || s.contains("min") || s.contains("max")
}

fn expression_layer() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let no_params = BTreeMap::new();
    let corpus: Vec<String> = (0..200).map(|i| common::random_expr(&mut rng, 3, 4, i % 5 != 0).to_string()).collect();
    let mut round_trip = 0;
    let mut parsed = Vec::new();
    for s in &corpus {
        let e1 = parse_expr(s, 3).map_err(|e| format!("{s}: {e}"))?;
        let e2 = parse_expr(&e1.to_string(), 3).map_err(|e| format!("{e1}: {e}"))?;
        if e1 != e2 {
            return Err(format!("round trip differs for {s}"));
        }
        round_trip += 1;
        parsed.push(e1);
    }
    let h = 1e-4;
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    for e in &parsed {
        let kinks = has_kinks(e);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let grad = match e.gradient(&x, &no_params) {
                Ok(g) => g,
                Err(ExprError::Domain { .. } | ExprError::NonDifferentiable(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(err) => return Err(format!("{e}: {err}")),
            };
            for (i, ad) in grad.iter().enumerate() {
                let at = |d: f64| {
                    let mut y = x.clone();
                    y[i] += d;
                    e.eval(&y, &no_params).unwrap_or(f64::NAN)
                };
                let f0 = at(0.0);
                let (fp, fm, fp2, fm2) = (at(h), at(-h), at(h / 2.0), at(-h / 2.0));
                // a kink within the stencil shows up as disagreeing one-sided slopes
                if kinks && ((fp - f0) / h - (f0 - fm) / h).abs() > 1e-2 * ad.abs().max(1.0) {
                    skipped += 1;
                    continue;
                }
                let (d1, d2) = ((fp - fm) / (2.0 * h), (fp2 - fm2) / h);
                let fd = (4.0 * d2 - d1) / 3.0;
                let err = (ad - fd).abs() / ad.abs().max(1.0);
                if !(err <= 1e-6) {
                    return Err(format!("{e} at {x:?}, d/dx{i}: ad {ad} fd {fd}"));
                }
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    ensure(
        round_trip == 200,
        format!("{round_trip} round trips; {checked} partials within {worst:.1e} relative, {skipped} skipped at kinks or domain edges"),
    )
}

// 9 ------------------------------------------------------------------------

fn refinements_preserve_time() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut probes = 0usize;
    for case in 0..100 {
        let n = rng.gen_range(1..=6);
        let mut times = vec![rng.gen_range(-5.0..5.0f64).round()];
        for _ in 0..n {
            let step = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.1..3.0) };
            times.push(times.last().unwrap() + step);
        }
        let infinite = rng.gen_bool(0.2);
        let finite_stop = *times.last().unwrap();
        if infinite {
            times.push(f64::INFINITY);
        }
        let endpoint = if infinite || rng.gen_bool(0.5) { Endpoint::Open } else { Endpoint::Closed };
        let coarse = TimeTrajectory::new(times.clone(), endpoint).map_err(|e| e.to_string())?;
        let hi = if infinite { finite_stop + 5.0 } else { finite_stop };
        let extra: Vec<f64> = (0..rng.gen_range(1..=5))
            .map(|_| if rng.gen_bool(0.3) { times[rng.gen_range(0..times.len() - 1)] } else { rng.gen_range(times[0]..=hi) })
            .collect();
        let (fine, k) = refine_trajectory(&coarse, &extra).map_err(|e| e.to_string())?;
        let ft: Vec<f64> = fine.times().iter().copied().filter(|t| t.is_finite()).collect();
        let mut probe_times = ft.clone();
        probe_times.extend(ft.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        probe_times.extend((0..10).map(|_| rng.gen_range(times[0] - 1.0..hi + 1.0)));
        for t in probe_times {
            let image: BTreeSet<usize> = fine.point_set(t).into_iter().map(|i| refined_interval_image(&k, i)).collect();
            if image != coarse.point_set(t) {
                return Err(format!("case {case}: t={t}: {image:?} vs {:?} ({times:?} + {extra:?})", coarse.point_set(t)));
            }
            probes += 1;
        }
    }
    ensure(true, format!("100 refinements, {probes} probe times"))
}

// 10 -----------------------------------------------------------------------

fn trapping_on_l() -> Verdict {
    let suite = gallery::vertical_hopper_suite(HopperParams::default()).map_err(|e| e.to_string())?;
    let w = suite.annulus(0.5, 4.0);
    let r = check_trapping_region(&suite.l, &w, &TrappingOptions { samples: 500, horizon: 50.0, ..Default::default() });
    ensure(
        r.ok && r.nonblocking.failures == 0 && r.invariance.failures == 0 && r.interior.failures == 0 && r.worst_interior_margin > 0.0,
        format!(
            "nonblocking {}/{}, invariance {}/{}, interior {}/{} failures; worst interior margin {:.3}",
            r.nonblocking.failures,
            r.nonblocking.tested,
            r.invariance.failures,
            r.invariance.tested,
            r.interior.failures,
            r.interior.tested,
            r.worst_interior_margin
        ),
    )
}

// 11 -----------------------------------------------------------------------

fn nondeterminism_detected() -> Verdict {
    let (s, _, _) = gallery::nondeterministic_subdivision();
    let r = check_determinism(&s, 1000, 0);
    let best = r.witnesses.iter().map(|w| norm(&w.point)).fold(f64::INFINITY, f64::min);
    ensure(!r.ok && best <= s.eq_tol(), format!("{} violations, closest witness |x| = {best:.1e}", r.violations))
}

// 12 -----------------------------------------------------------------------

const MARGIN: &str = "v=min(x0^2 + x1^2 - 0.25, 16 - x0^2 - x1^2)";

fn invocations() -> Vec<Vec<&'static str>> {
    let lines: &[&str] = &[
        // 1
        "gallery export hopper -o hop.json",
        "simulate hop.json --mode v --init -1,0.5 --horizon 100 --out hop_trace.json",
        // 2
        "gallery export hopper_maps -o maps.json",
        "check semiconjugacy maps.json --samples 200 --tol 1e-8 --seed 7",
        // 3
        "gallery export rocking_block --alpha 0.3 --r 0.5 -o rb.json",
        "simulate rb.json --mode L --init 0.5,0 --out rb.csv",
        // 4
        "gallery export directed_h.directed -o h.directed",
        "gallery export directed_h -o h.json",
        "gallery export directed_k -o k.json",
        "gallery export directed_overlap -o overlap.json",
        "compose sequential --first h.json --second k.json --overlap overlap.json -o hk.json --directed-out hk.directed",
        "simulate hk.json --mode v --init 1 --horizon 50 --out hk_trace.json",
        "chain hk.json --mode v --init 1 --target z --eps 0.05 --t 1 -o chain.json",
        "chain hk.json --mode v --init 1 --target z --check chain.json",
        "chain hk.json --mode v --init 1 --target z --eps 0 --t 1",
        "check directed h.directed --seed 3",
        // 6
        "compose product rb.json hop.json -o prod.json --maps-out prod_maps.json",
        "check determinism prod.json --samples 1000 --seed 5",
        // 7
        "gallery export circle_flow -o circle.json",
        "compose slice circle.json --mode c --cut x0 -o sliced.json --map-out slice_map.json",
        "check subdivision slice_map.json --seed 2",
        "simulate circle.json --mode c --init 1,0 --horizon 20 --out circle_trace.csv",
        // 10
        "gallery export hopper_smooth -o l.json",
        "check trapping l.json --margin MARGIN --samples 500 --horizon 50 --seed 11",
        // 11
        "gallery export nondeterministic_subdivision -o nd.json",
        "check determinism nd.json --samples 1000 --seed 0",
    ];
    lines
        .iter()
        .map(|l| l.split_whitespace().map(|w| if w == "MARGIN" { MARGIN } else { w }).collect())
        .collect()
}

fn run_all(dir: &Path) -> Result<Vec<(i32, Vec<u8>, Vec<u8>)>, String> {
    let exe = env!("CARGO_BIN_EXE_hybridcat");
    invocations()
        .iter()
        .map(|args| {
            let out = Command::new(exe)
                .args(args)
                .current_dir(dir)
                .env("HYBRIDCAT_THREADS", "2")
                .output()
                .map_err(|e| e.to_string())?;
            let code = out.status.code().unwrap_or(-1);
            if code == 2 {
                return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
            }
            Ok((code, out.stdout, out.stderr))
        })
        .collect()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn cli_reproducible() -> Verdict {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (ra, rb) = (run_all(a.path())?, run_all(b.path())?);
    let cmds = invocations();
    for (i, (x, y)) in ra.iter().zip(&rb).enumerate() {
        if x != y {
            return Err(format!("`{}` differs between runs", cmds[i].join(" ")));
        }
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    if fa != fb {
        let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
        return Err(format!("output files differ: {differing:?}"));
    }
    ensure(true, format!("{} invocations, {} files byte-identical across two runs", cmds.len(), fa.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Verdict); 12] = [
        (1, "hopper limit cycle", hopper_limit_cycle),
        (2, "hopper diagram", hopper_diagram),
        (3, "rocking block reset law", rocking_block_resets),
        (4, "sequential composition split", sequential_split),
        (5, "category laws", category_laws),
        (6, "determinism of products", determinism_preserved),
        (7, "subdivision round trip", subdivision_round_trip),
        (8, "expression layer", expression_layer),
        (9, "refinement time preservation", refinements_preserve_time),
        (10, "trapping region on L", trapping_on_l),
        (11, "non-determinism witness", nondeterminism_detected),
        (12, "CLI reproducibility", cli_reproducible),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let clock = Instant::now();
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(format!("panic: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()))
        });
        let secs = clock.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("[PASS] {n:>2} {name}: {d} [{secs:.2} s]"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {n:>2} {name}: {d} [{secs:.2} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
