#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use hybridcat::graph::Graph;

/// Vertex count and edges as (src, tgt) index pairs.
pub type RawGraph = (usize, Vec<(usize, usize)>);

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn canonical(n: usize, edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    permutations(n)
        .into_iter()
        .map(|p| {
            let mut e: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (p[a], p[b])).collect();
            e.sort();
            e
        })
        .min()
        .unwrap_or_default()
}

/// All graphs with at most `max_v` vertices and `max_e` edges (loops and
/// parallel edges allowed), one per isomorphism class.
pub fn graph_catalog(max_v: usize, max_e: usize) -> Vec<Arc<Graph>> {
    let mut seen: BTreeSet<(usize, Vec<(usize, usize)>)> = BTreeSet::new();
    let mut out = Vec::new();
    for n in 0..=max_v {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(choice) = stack.pop() {
            let edges: Vec<(usize, usize)> = choice.iter().map(|&i| pairs[i]).collect();
            if seen.insert((n, canonical(n, &edges))) {
                out.push(Arc::new(build(n, &edges)));
            }
            if choice.len() < max_e {
                let start = choice.last().copied().unwrap_or(0);
                for i in start..pairs.len() {
                    let mut c = choice.clone();
                    c.push(i);
                    stack.push(c);
                }
            }
        }
    }
    out
}

pub fn build(n: usize, edges: &[(usize, usize)]) -> Graph {
    let names: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    let es: Vec<(String, String, String)> =
        edges.iter().enumerate().map(|(k, &(a, b))| (format!("e{k}"), names[a].clone(), names[b].clone())).collect();
    let vs: Vec<&str> = names.iter().map(String::as_str).collect();
    let es: Vec<(&str, &str, &str)> = es.iter().map(|(e, a, b)| (e.as_str(), a.as_str(), b.as_str())).collect();
    Graph::from_names(&vs, &es).unwrap()
}

use hybridcat::expr::{Expr, Func};
use hybridcat::graph::{EdgeId, VertexId};
use hybridcat::system::{HybridSystem, Mode, ResetEdge};
use rand::Rng;

/// Small deterministic system: linear fields on boxes, guards on distinct
/// hyperplanes `x0 == c`, flow sets that exclude every guard and constant
/// resets into the target box.
pub fn random_deterministic_system(rng: &mut impl Rng, tag: &str) -> HybridSystem {
    let n_modes = rng.gen_range(1..=2);
    let dims: Vec<usize> = (0..n_modes).map(|_| rng.gen_range(1..=2)).collect();
    let name = |i: usize| format!("{tag}{i}");
    let boxed = |d: usize| (0..d).map(|i| format!("x{i} >= -2 and x{i} <= 2")).collect::<Vec<_>>().join(" and ");
    let mut modes = Vec::new();
    let mut edges = Vec::new();
    for (i, &d) in dims.iter().enumerate() {
        let field: Vec<String> = (0..d)
            .map(|r| {
                let terms: Vec<String> = (0..d).map(|c| format!("{:.3}*x{c}", rng.gen_range(-1.0..1.0))).collect();
                format!("{} + {:.3}", terms.join(" + "), rng.gen_range(-1.0..1.0) + if r == 0 { 1.5 } else { 0.0 })
            })
            .collect();
        let n_out = rng.gen_range(0..=2);
        let cuts = [-1.0, 1.0];
        let mut flow = boxed(d);
        for (k, c) in cuts.iter().take(n_out).enumerate() {
            let tgt = rng.gen_range(0..n_modes);
            let reset: Vec<String> = (0..dims[tgt]).map(|_| format!("{:.3}", rng.gen_range(-1.5..1.5))).collect();
            let reset: Vec<&str> = reset.iter().map(String::as_str).collect();
            let guard = format!("{} and x0 == {c}", boxed(d));
            let r = ResetEdge::parse(&name(i), &name(tgt), d, &guard, &format!("{c} - x0"), &reset).unwrap();
            edges.push((EdgeId::new(format!("{tag}{i}_{k}")), r));
            flow = format!("{flow} and not x0 == {c}");
        }
        let field: Vec<&str> = field.iter().map(String::as_str).collect();
        let m = Mode::parse(d, &field, &boxed(d), &flow).unwrap().with_bounds(vec![(-2.0, 2.0); d]);
        modes.push((VertexId::new(name(i)), m));
    }
    HybridSystem::from_parts(modes, edges, Default::default()).unwrap()
}

/// Random expression over `dim` variables. `smooth` leaves out abs/min/max;
/// logs, roots and quotients are kept away from their singularities.
pub fn random_expr<R: Rng + ?Sized>(rng: &mut R, dim: usize, depth: usize, smooth: bool) -> Expr {
    if depth == 0 || rng.gen_bool(0.2) {
        return if rng.gen_bool(0.6) {
            Expr::var(rng.gen_range(0..dim))
        } else {
            Expr::num((rng.gen_range(-3.0..3.0f64) * 100.0).round() / 100.0)
        };
    }
    let d = depth - 1;
    let one_plus_sq = |e: Expr| Expr::add(Expr::num(1.0), Expr::pow(e, Expr::num(2.0)));
    let k = rng.gen_range(0..if smooth { 12 } else { 15 });
    let a = random_expr(rng, dim, d, smooth);
    let b = random_expr(rng, dim, d, smooth);
    match k {
        0 => Expr::add(a, b),
        1 => Expr::sub(a, b),
        2 | 3 => Expr::mul(a, b),
        4 => Expr::div(a, one_plus_sq(b)),
        5 => Expr::pow(a, Expr::num(rng.gen_range(2..=3) as f64)),
        6 => Expr::neg(a),
        7 => Expr::call(Func::Sin, vec![a]),
        8 => Expr::call(Func::Cos, vec![a]),
        9 => Expr::call(Func::Exp, vec![Expr::call(Func::Sin, vec![a])]),
        10 => Expr::call(Func::Sqrt, vec![one_plus_sq(a)]),
        11 if rng.gen_bool(0.5) => Expr::call(Func::Log, vec![one_plus_sq(a)]),
        11 => Expr::call(Func::Atan2, vec![a, Expr::add(Expr::num(2.0), Expr::call(Func::Cos, vec![b]))]),
        12 => Expr::call(Func::Abs, vec![a]),
        13 => Expr::min(a, b),
        _ => Expr::max(a, b),
    }
}
