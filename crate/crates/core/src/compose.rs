//! Composition of hybrid systems: products, coproducts, fiber products,
//! subdivisions, sequential composition of directed systems and
//! template-anchor spans.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, ExprError, Params, Predicate, Rel, VectorExpr};
use crate::graph::{
    compose_graph_morphisms, graph_coproduct, graph_fiber_product, graph_product, graph_pushout, EdgeId, GenEdge,
    Graph, GraphError, GraphMorphism, VertexId,
};
use crate::morphism::{
    check_subdivision_necessary, classify_embedding, classify_submersion, compose_semiconjugacies,
    ClassificationReport, MorphismError, Semiconjugacy,
};
use crate::sample::NO_PARAMS;
use crate::system::{euclid, prune, Emptiness, HybridSystem, Mode, ResetEdge, SystemError, MAX_WITNESSES};

/// Samples used by the transversality check of [`slice_mode`].
pub const SLICE_SAMPLES: usize = 200;
/// `|∇h·X|` below this counts as tangent.
pub const TRANSVERSE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Morphism(#[from] MorphismError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("slice of mode {mode} is not transverse to the flow at {witnesses:?}")]
    NotTransverse { mode: VertexId, witnesses: Vec<Vec<f64>> },
    #[error("reset factorization of {edge} has residual {residual:e} at {witness:?}")]
    Factorization { edge: EdgeId, residual: f64, witness: Vec<f64> },
    #[error("f(Z_{edge}) leaves the intermediate active set at {witness:?}")]
    FactorImage { edge: EdgeId, witness: Vec<f64> },
    #[error("{0} is not a submersion on samples")]
    NotSubmersion(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("final embedding has no inverse at {0}")]
    MissingInverse(VertexId),
    #[error("initial embedding of the second system has no inverse at {0}")]
    MissingInitInverse(VertexId),
    #[error("final subsystem is not a sink: edge {0} leaves it")]
    NotSink(EdgeId),
    #[error("{0} is empty")]
    Empty(String),
}

// ------------------------------------------------------------- params

/// Union of two parameter sets; names of `b` that clash with a different
/// value in `a` are renamed `name_2`, `name_3`, ...
pub fn merge_params(a: &Params, b: &Params) -> (Params, BTreeMap<String, String>) {
    let mut out = a.clone();
    let mut renames = BTreeMap::new();
    for (k, v) in b {
        match a.get(k) {
            None => {
                out.insert(k.clone(), *v);
            }
            Some(x) if x == v => {}
            Some(_) => {
                let mut n = 2;
                let fresh = loop {
                    let cand = format!("{k}_{n}");
                    if !a.contains_key(&cand) && !b.contains_key(&cand) && !out.contains_key(&cand) {
                        break cand;
                    }
                    n += 1;
                };
                out.insert(fresh.clone(), *v);
                renames.insert(k.clone(), fresh);
            }
        }
    }
    (out, renames)
}

fn renamed_parts(
    h: &HybridSystem,
    map: &BTreeMap<String, String>,
) -> (BTreeMap<VertexId, Mode>, BTreeMap<EdgeId, ResetEdge>) {
    let modes = h
        .modes()
        .iter()
        .map(|(v, m)| {
            let mut m = m.clone();
            if !map.is_empty() {
                m.field = m.field.rename_params(map);
                m.active = m.active.rename_params(map);
                m.flow = m.flow.rename_params(map);
            }
            (v.clone(), m)
        })
        .collect();
    let edges = h
        .edges()
        .iter()
        .map(|(e, r)| {
            let mut r = r.clone();
            if !map.is_empty() {
                r.guard = r.guard.rename_params(map);
                r.event = r.event.rename_params(map);
                r.reset = r.reset.rename_params(map);
            }
            (e.clone(), r)
        })
        .collect();
    (modes, edges)
}

fn merge_empty(a: Emptiness, b: Emptiness) -> Emptiness {
    let definite = |e: Emptiness| matches!(e, Emptiness::Declared | Emptiness::Sampled { confirmed: true });
    if definite(a) || definite(b) {
        Emptiness::Declared
    } else if a != Emptiness::Unknown || b != Emptiness::Unknown {
        Emptiness::Sampled { confirmed: false }
    } else {
        Emptiness::Unknown
    }
}

fn build(
    modes: BTreeMap<VertexId, Mode>,
    edges: BTreeMap<EdgeId, ResetEdge>,
    params: Params,
    eq_tol: f64,
    provenance: serde_json::Value,
) -> Result<HybridSystem, ComposeError> {
    Ok(HybridSystem::new(modes, edges, params)?.with_eq_tol(eq_tol).with_provenance(provenance))
}

/// Prune declared-empty parts when possible; unconfirmed sampled emptiness
/// leaves the system as is.
fn prune_if_possible(h: HybridSystem) -> HybridSystem {
    prune(&h).unwrap_or(h)
}

/// Restrict a full graph map to the (possibly pruned) domain graph `dom`.
fn restrict_graph_map(full: &GraphMorphism, dom: &Arc<Graph>, cod: &Arc<Graph>) -> Result<GraphMorphism, GraphError> {
    let vmap = dom.vertices().map(|v| (v.clone(), full.map_vertex(v).unwrap().clone())).collect();
    let emap = dom.edge_ids().map(|e| (e.clone(), full.map_edge(e).unwrap().clone())).collect();
    GraphMorphism::new(dom.clone(), cod.clone(), vmap, emap)
}

fn provenance(construction: &str, inputs: &[&HybridSystem]) -> serde_json::Value {
    let names: Vec<serde_json::Value> = inputs
        .iter()
        .map(|h| {
            h.provenance()
                .and_then(|p| p.get("name").cloned())
                .unwrap_or_else(|| serde_json::json!({"modes": h.modes().len(), "edges": h.edges().len()}))
        })
        .collect();
    serde_json::json!({"construction": construction, "inputs": names})
}

fn concat_bounds(a: &Mode, b: &Mode) -> Option<Vec<(f64, f64)>> {
    if a.bounds.is_none() && b.bounds.is_none() {
        return None;
    }
    let mut out = a.sampling_box();
    out.extend(b.sampling_box());
    Some(out)
}

fn block_map(left: &VectorExpr, right: &VectorExpr, d1: usize, d2: usize) -> VectorExpr {
    left.shift_vars(0, d1 + d2).concat(&right.shift_vars(d1, d1 + d2))
}

fn pair_vertex(a: &VertexId, b: &VertexId) -> VertexId {
    VertexId::new(format!("({a},{b})"))
}

// ------------------------------------------------------------ product

/// Mode and edge data of `H1 × H2` over a subgraph `g` of `G(H1) ⊠ G(H2)`
/// (the whole product, or a fiber product). `extra` adds a constraint to
/// every active, flow and guard predicate at a product vertex.
fn product_data(
    h1: &HybridSystem,
    h2: &HybridSystem,
    g: &Arc<Graph>,
    pi1: &GraphMorphism,
    pi2: &GraphMorphism,
    extra: &dyn Fn(&VertexId) -> Predicate,
) -> (BTreeMap<VertexId, Mode>, BTreeMap<EdgeId, ResetEdge>) {
    let mut modes = BTreeMap::new();
    for v in g.vertices() {
        let (m1, m2) = (&h1.modes()[pi1.map_vertex(v).unwrap()], &h2.modes()[pi2.map_vertex(v).unwrap()]);
        let (d1, d2) = (m1.dim, m2.dim);
        let c = extra(v);
        let mut m = Mode::new(
            d1 + d2,
            block_map(&m1.field, &m2.field, d1, d2),
            Predicate::and_all([m1.active.clone(), m2.active.shift_vars(d1), c.clone()]),
            Predicate::and_all([m1.flow.clone(), m2.flow.shift_vars(d1), c]),
        );
        m.bounds = concat_bounds(m1, m2);
        m.empty = merge_empty(m1.empty, m2.empty);
        modes.insert(v.clone(), m);
    }
    let mut edges = BTreeMap::new();
    for (e, s, t) in g.edges() {
        let (p, q) = (pi1.map_edge(e).unwrap(), pi2.map_edge(e).unwrap());
        let (s1, s2) = (&h1.modes()[pi1.map_vertex(s).unwrap()], &h2.modes()[pi2.map_vertex(s).unwrap()]);
        let (d1, d2) = (s1.dim, s2.dim);
        let c = extra(s);
        let (guard, event, reset, empty) = match (p, q) {
            (GenEdge::Edge(a), GenEdge::Edge(b)) => {
                let (ra, rb) = (&h1.edges()[a], &h2.edges()[b]);
                (
                    Predicate::and_all([ra.guard.clone(), rb.guard.shift_vars(d1), c]),
                    Expr::min(ra.event.clone(), rb.event.shift_vars(d1)),
                    block_map(&ra.reset, &rb.reset, d1, d2),
                    merge_empty(ra.empty, rb.empty),
                )
            }
            (GenEdge::Edge(a), GenEdge::Vertex(_)) => {
                let ra = &h1.edges()[a];
                (
                    Predicate::and_all([ra.guard.clone(), s2.flow.shift_vars(d1), c]),
                    ra.event.clone(),
                    block_map(&ra.reset, &VectorExpr::identity(d2), d1, d2),
                    merge_empty(ra.empty, s2.empty),
                )
            }
            (GenEdge::Vertex(_), GenEdge::Edge(b)) => {
                let rb = &h2.edges()[b];
                (
                    Predicate::and_all([s1.flow.clone(), rb.guard.shift_vars(d1), c]),
                    rb.event.shift_vars(d1),
                    block_map(&VectorExpr::identity(d1), &rb.reset, d1, d2),
                    merge_empty(s1.empty, rb.empty),
                )
            }
            (GenEdge::Vertex(_), GenEdge::Vertex(_)) => unreachable!("product edges are never vertex pairs"),
        };
        let mut r = ResetEdge::new(s.clone(), t.clone(), guard, event, reset);
        r.empty = empty;
        edges.insert(e.clone(), r);
    }
    (modes, edges)
}

/// Coordinate projections out of a product-shaped system.
fn projections(
    prod: &Arc<HybridSystem>,
    full1: &GraphMorphism,
    full2: &GraphMorphism,
    h1: &Arc<HybridSystem>,
    h2: &Arc<HybridSystem>,
) -> Result<(Semiconjugacy, Semiconjugacy), ComposeError> {
    let g1 = restrict_graph_map(full1, prod.graph(), h1.graph())?;
    let g2 = restrict_graph_map(full2, prod.graph(), h2.graph())?;
    let mut m1 = BTreeMap::new();
    let mut m2 = BTreeMap::new();
    for v in prod.graph().vertices() {
        let d1 = h1.dim(g1.map_vertex(v).unwrap()).unwrap();
        let d2 = h2.dim(g2.map_vertex(v).unwrap()).unwrap();
        let d = d1 + d2;
        m1.insert(v.clone(), VectorExpr::new(d, (0..d1).map(Expr::Var).collect()));
        m2.insert(v.clone(), VectorExpr::new(d, (d1..d).map(Expr::Var).collect()));
    }
    let p1 = Semiconjugacy::new(prod.clone(), h1.clone(), g1, m1, BTreeMap::new())?;
    let p2 = Semiconjugacy::new(prod.clone(), h2.clone(), g2, m2, BTreeMap::new())?;
    Ok((p1, p2))
}

/// Cartesian product with both projections. Parameters of `h2` that clash
/// with `h1` are renamed; declared-empty parts are pruned.
pub fn product(
    h1: &Arc<HybridSystem>,
    h2: &Arc<HybridSystem>,
) -> Result<(Arc<HybridSystem>, Semiconjugacy, Semiconjugacy), ComposeError> {
    let (params, renames) = merge_params(h1.params(), h2.params());
    let (m2, e2) = renamed_parts(h2, &renames);
    let h2r = HybridSystem::new(m2, e2, params.clone())?.with_eq_tol(h2.eq_tol());
    let (g, pi1, pi2) = graph_product(h1.graph(), h2.graph());
    let (modes, edges) = product_data(h1, &h2r, &g, &pi1, &pi2, &|_| Predicate::True);
    let full = build(modes, edges, params, h1.eq_tol().max(h2.eq_tol()), provenance("product", &[h1, h2]))?;
    let prod = Arc::new(prune_if_possible(full));
    let (p1, p2) = projections(&prod, &pi1, &pi2, h1, h2)?;
    Ok((prod, p1, p2))
}

/// Disjoint union with both injections.
pub fn coproduct(
    h1: &Arc<HybridSystem>,
    h2: &Arc<HybridSystem>,
) -> Result<(Arc<HybridSystem>, Semiconjugacy, Semiconjugacy), ComposeError> {
    let (params, renames) = merge_params(h1.params(), h2.params());
    let (g, i1, i2) = graph_coproduct(h1.graph(), h2.graph());
    let mut modes = BTreeMap::new();
    let mut edges = BTreeMap::new();
    for (h, inj, map) in [(h1, &i1, &BTreeMap::new()), (h2, &i2, &renames)] {
        let (hm, he) = renamed_parts(h, map);
        for (v, m) in hm {
            modes.insert(inj.map_vertex(&v).unwrap().clone(), m);
        }
        for (e, mut r) in he {
            let GenEdge::Edge(ne) = inj.map_edge(&e).unwrap().clone() else { unreachable!() };
            r.src = inj.map_vertex(&r.src).unwrap().clone();
            r.tgt = inj.map_vertex(&r.tgt).unwrap().clone();
            edges.insert(ne, r);
        }
    }
    let _ = &g;
    let sum = Arc::new(build(modes, edges, params, h1.eq_tol().max(h2.eq_tol()), provenance("coproduct", &[h1, h2]))?);
    let inj = |h: &Arc<HybridSystem>, gm: &GraphMorphism| -> Result<Semiconjugacy, ComposeError> {
        let maps: BTreeMap<_, _> = h.modes().iter().map(|(v, m)| (v.clone(), VectorExpr::identity(m.dim))).collect();
        Ok(Semiconjugacy::new(h.clone(), sum.clone(), gm.with_codomain(sum.graph().clone())?, maps.clone(), maps)?)
    };
    let j1 = inj(h1, &i1)?;
    let j2 = inj(h2, &i2)?;
    Ok((sum, j1, j2))
}

// ------------------------------------------------------- fiber product

#[derive(Clone, Copy, Debug)]
pub struct FiberOptions {
    /// Tolerance band of the equality constraint `p(x1) == f(x2)`.
    pub constraint_tol: f64,
    /// Run the sampled submersion test on `p` first: `(samples, seed)`.
    pub verify: Option<(usize, u64)>,
}

impl Default for FiberOptions {
    fn default() -> Self {
        FiberOptions { constraint_tol: 1e-9, verify: None }
    }
}

/// Fiber product of `K1 −p→ H ←f− K2` with its two projections.
///
/// Coordinates are `(x1, x2)`; every predicate gains the componentwise
/// constraint `p_v(x1) == f_w(x2)`, read with tolerance `constraint_tol`.
pub fn fiber_product(
    p: &Semiconjugacy,
    f: &Semiconjugacy,
    opts: FiberOptions,
) -> Result<(Arc<HybridSystem>, Semiconjugacy, Semiconjugacy), ComposeError> {
    if **p.cod() != **f.cod() {
        return Err(ComposeError::Mismatch("fiber product legs have different codomains".into()));
    }
    if let Some((samples, seed)) = opts.verify {
        let report = classify_submersion(p, samples, 1e-6, seed, false);
        if !report.verdict {
            return Err(ComposeError::NotSubmersion("first leg".into()));
        }
    }
    let (k1, k2) = (p.dom(), f.dom());
    let (params, renames) = merge_params(k1.params(), k2.params());
    let (m2, e2) = renamed_parts(k2, &renames);
    let k2r = HybridSystem::new(m2, e2, params.clone())?.with_eq_tol(k2.eq_tol());
    let (g, pi1, pi2) = graph_fiber_product(p.graph_map(), f.graph_map())?;
    let (pm, _) = p.bound_maps();
    let (fm, _) = f.bound_maps();
    let constraint = |v: &VertexId| {
        let (a, b) = (pi1.map_vertex(v).unwrap(), pi2.map_vertex(v).unwrap());
        let d1 = k1.dim(a).unwrap();
        let pa = &pm[a];
        let fb = fm[b].shift_vars(d1, d1 + k2.dim(b).unwrap());
        Predicate::and_all(
            pa.components.iter().zip(&fb.components).map(|(l, r)| Predicate::cmp(l.clone(), Rel::Eq, r.clone())),
        )
    };
    let (modes, edges) = product_data(k1, &k2r, &g, &pi1, &pi2, &constraint);
    let tol = opts.constraint_tol.max(k1.eq_tol()).max(k2.eq_tol());
    let prov = provenance("fiber_product", &[k1, k2]);
    let fib = Arc::new(prune_if_possible(build(modes, edges, params, tol, prov)?));
    if fib.modes().is_empty() && !g.vertices().next().is_none() {
        return Err(ComposeError::Empty("fiber product".into()));
    }
    let (q1, q2) = projections(&fib, &pi1, &pi2, k1, k2)?;
    Ok((fib, q1, q2))
}

// -------------------------------------------------------- subdivisions

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Side {
    Minus,
    Plus,
}

impl Side {
    fn sign(self) -> &'static str {
        match self {
            Side::Minus => "-",
            Side::Plus => "+",
        }
    }
}

/// How a subdivision was built; enough to lift executions back up.
#[derive(Clone, Debug)]
pub enum SubdivisionKind {
    Identity,
    Slice {
        mode: VertexId,
        /// Slice function with parameters bound.
        h: Expr,
        minus: VertexId,
        plus: VertexId,
        up: EdgeId,
        down: EdgeId,
        /// `(original edge, source side, target side)` to the split edge.
        renames: BTreeMap<(EdgeId, Option<Side>, Option<Side>), EdgeId>,
    },
    ResetFactor {
        edge: EdgeId,
        /// First factor with parameters bound.
        f: VectorExpr,
        u: VertexId,
        ef: EdgeId,
        eg: EdgeId,
    },
}

/// A subdivision `S → H` together with its construction.
#[derive(Clone, Debug)]
pub struct Subdivision {
    pub map: Semiconjugacy,
    pub kind: SubdivisionKind,
}

impl Subdivision {
    pub fn identity(h: Arc<HybridSystem>) -> Self {
        Subdivision { map: Semiconjugacy::identity(h), kind: SubdivisionKind::Identity }
    }

    pub fn system(&self) -> &Arc<HybridSystem> {
        self.map.dom()
    }
}

/// Cut mode `v` along `{h = 0}` into `v-` (`h ≤ 0`) and `v+` (`h ≥ 0`).
///
/// Crossing the cut is an identity jump (`v.up` or `v.down`, by the sign of
/// the Lie derivative of `h`); edges at `v` are split by side. Sides that
/// sample empty are dropped.
pub fn slice_mode(h: &Arc<HybridSystem>, v: &VertexId, cut: &Expr, seed: u64) -> Result<Subdivision, ComposeError> {
    let mode = h.mode(v).ok_or_else(|| ComposeError::Mismatch(format!("unknown mode {v}")))?;
    if let Some(i) = cut.max_var() {
        if i >= mode.dim {
            return Err(ExprError::DimOverflow { index: i, dim: mode.dim }.into());
        }
    }
    for name in cut.params() {
        if !h.params().contains_key(&name) {
            return Err(ExprError::UnboundParam(name).into());
        }
    }
    let lie = cut.lie_derivative(&mode.field)?;
    let b = h.bound();
    let (cut_b, lie_b) = (cut.bind(h.params()), lie.bind(h.params()));
    let zero = || Expr::Num(0.0);
    let on_cut = Predicate::and_all([b.modes()[v].active.clone(), Predicate::cmp(cut_b.clone(), Rel::Eq, zero())]);
    let crossing = b.sample(v, &on_cut, SLICE_SAMPLES, seed, "slice");
    let mut witnesses = Vec::new();
    let (mut ups, mut downs) = (0usize, 0usize);
    for x in &crossing.points {
        let d = lie_b.eval(x, &NO_PARAMS).unwrap_or(f64::NAN);
        if !(d.abs() > TRANSVERSE_TOL) {
            if witnesses.len() < MAX_WITNESSES {
                witnesses.push(x.clone());
            }
        } else if d > 0.0 {
            ups += 1;
        } else {
            downs += 1;
        }
    }
    if !witnesses.is_empty() {
        return Err(ComposeError::NotTransverse { mode: v.clone(), witnesses });
    }

    let le = |s: Side| match s {
        Side::Minus => Predicate::cmp(cut.clone(), Rel::Le, zero()),
        Side::Plus => Predicate::cmp(cut.clone(), Rel::Ge, zero()),
    };
    let on = Predicate::cmp(cut.clone(), Rel::Eq, zero());
    let leaving = |s: Side| {
        let rel = if s == Side::Minus { Rel::Gt } else { Rel::Lt };
        Predicate::and_all([on.clone(), Predicate::cmp(lie.clone(), rel, zero())])
    };
    let minus = VertexId::new(format!("{v}-"));
    let plus = VertexId::new(format!("{v}+"));
    let side_id = |s: Side| if s == Side::Minus { minus.clone() } else { plus.clone() };

    let mut modes = BTreeMap::new();
    for (w, m) in h.modes() {
        if w != v {
            modes.insert(w.clone(), m.clone());
        }
    }
    for s in [Side::Minus, Side::Plus] {
        let mut m = mode.clone();
        m.active = Predicate::and_all([mode.active.clone(), le(s)]);
        m.flow = Predicate::and_all([mode.flow.clone(), le(s), Predicate::negate(leaving(s))]);
        let probe = Predicate::and_all([b.modes()[v].active.clone(), le(s).bind(h.params())]);
        if b.sample(v, &probe, SLICE_SAMPLES, seed, &format!("slice/{}", s.sign())).starved() {
            m.empty = Emptiness::Declared;
        }
        modes.insert(side_id(s), m);
    }

    let up = EdgeId::new(format!("{v}.up"));
    let down = EdgeId::new(format!("{v}.down"));
    let mut edges = BTreeMap::new();
    for (s, id, event, seen) in [(Side::Minus, &up, Expr::neg(cut.clone()), ups), (Side::Plus, &down, cut.clone(), downs)] {
        let other = if s == Side::Minus { Side::Plus } else { Side::Minus };
        let mut r = ResetEdge::new(
            side_id(s),
            side_id(other),
            Predicate::and_all([mode.flow.clone(), leaving(s)]),
            event,
            VectorExpr::identity(mode.dim),
        );
        if seen == 0 {
            r.empty = Emptiness::Declared;
        }
        edges.insert(id.clone(), r);
    }

    let mut renames = BTreeMap::new();
    let mut emap: BTreeMap<EdgeId, GenEdge> = BTreeMap::new();
    for (e, r) in h.edges() {
        if &r.src != v && &r.tgt != v {
            edges.insert(e.clone(), r.clone());
            emap.insert(e.clone(), GenEdge::Edge(e.clone()));
            continue;
        }
        let src_sides: Vec<Option<Side>> =
            if &r.src == v { vec![Some(Side::Minus), Some(Side::Plus)] } else { vec![None] };
        let tgt_sides: Vec<Option<Side>> =
            if &r.tgt == v { vec![Some(Side::Minus), Some(Side::Plus)] } else { vec![None] };
        let after = cut.substitute(&r.reset.components);
        for ss in &src_sides {
            for ts in &tgt_sides {
                let mut parts = vec![r.guard.clone()];
                if let Some(s) = ss {
                    parts.push(le(*s));
                }
                if let Some(t) = ts {
                    let rel = if *t == Side::Minus { Rel::Le } else { Rel::Gt };
                    parts.push(Predicate::cmp(after.clone(), rel, zero()));
                }
                let tag: String = [ss, ts].iter().filter_map(|x| x.map(|s| s.sign())).collect();
                let id = EdgeId::new(format!("{e}.{tag}"));
                let mut nr = ResetEdge::new(
                    ss.map_or(r.src.clone(), side_id),
                    ts.map_or(r.tgt.clone(), side_id),
                    Predicate::and_all(parts),
                    r.event.clone(),
                    r.reset.clone(),
                );
                nr.empty = r.empty;
                renames.insert((e.clone(), *ss, *ts), id.clone());
                emap.insert(id.clone(), GenEdge::Edge(e.clone()));
                edges.insert(id, nr);
            }
        }
    }
    let prov = provenance("slice", &[h]);
    let full = build(modes, edges, h.params().clone(), h.eq_tol(), prov)?;
    let s = Arc::new(prune(&full).unwrap_or(full));
    renames.retain(|_, id| s.graph().has_edge(id));

    let mut vmap = BTreeMap::new();
    let mut maps = BTreeMap::new();
    for (w, m) in s.modes() {
        let image = if *w == minus || *w == plus { v.clone() } else { w.clone() };
        vmap.insert(w.clone(), image);
        maps.insert(w.clone(), VectorExpr::identity(m.dim));
    }
    emap.insert(up.clone(), GenEdge::Vertex(v.clone()));
    emap.insert(down.clone(), GenEdge::Vertex(v.clone()));
    emap.retain(|e, _| s.graph().has_edge(e));
    let gm = GraphMorphism::new(s.graph().clone(), h.graph().clone(), vmap, emap)?;
    let map = Semiconjugacy::new(s.clone(), h.clone(), gm, maps.clone(), maps)?;
    Ok(Subdivision {
        map,
        kind: SubdivisionKind::Slice { mode: v.clone(), h: cut_b, minus, plus, up, down, renames },
    })
}

/// Options for the sampled preconditions of [`factor_reset`].
#[derive(Clone, Copy, Debug)]
pub struct FactorOptions {
    pub tol: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for FactorOptions {
    fn default() -> Self {
        FactorOptions { tol: 1e-8, samples: 200, seed: 0 }
    }
}

/// Replace edge `e: v → w` by `v −e.f→ e.u −e.g→ w` where `r_e = g ∘ f`.
/// The new mode has ambient dimension `a_dim`, active set `a_active`, no
/// flow, and leaves through `e.g` at once.
pub fn factor_reset(
    h: &Arc<HybridSystem>,
    e: &EdgeId,
    f: &VectorExpr,
    g: &VectorExpr,
    a_active: &Predicate,
    a_dim: usize,
    opts: FactorOptions,
) -> Result<Subdivision, ComposeError> {
    let r = h.edge(e).ok_or_else(|| ComposeError::Mismatch(format!("unknown edge {e}")))?;
    let (ds, dt) = (h.dim(&r.src).unwrap(), h.dim(&r.tgt).unwrap());
    if f.dim_in != ds || f.dim_out() != a_dim || g.dim_in != a_dim || g.dim_out() != dt {
        return Err(ComposeError::Mismatch(format!(
            "factors must map {ds} -> {a_dim} -> {dt}, got {} -> {} and {} -> {}",
            f.dim_in,
            f.dim_out(),
            g.dim_in,
            g.dim_out()
        )));
    }
    if a_active.max_var().is_some_and(|i| i >= a_dim) {
        return Err(ExprError::DimOverflow { index: a_active.max_var().unwrap(), dim: a_dim }.into());
    }
    let params = h.params();
    for name in f.params().into_iter().chain(g.params()).chain(a_active.params()) {
        if !params.contains_key(&name) {
            return Err(ExprError::UnboundParam(name).into());
        }
    }
    let b = h.bound();
    let (fb, gb, ab) = (f.bind(params), g.bind(params), a_active.bind(params));
    let rb = &b.edges()[e];
    let guard = b.sample(&r.src, &rb.guard, opts.samples, opts.seed, &format!("factor/{e}"));
    for x in &guard.points {
        let y = fb.eval(x, &NO_PARAMS)?;
        if !ab.contains(&y, &NO_PARAMS, h.eq_tol().max(opts.tol)) {
            return Err(ComposeError::FactorImage { edge: e.clone(), witness: x.clone() });
        }
        let res = euclid(&gb.eval(&y, &NO_PARAMS)?, &rb.reset.eval(x, &NO_PARAMS)?);
        if !(res <= opts.tol) {
            return Err(ComposeError::Factorization { edge: e.clone(), residual: res, witness: x.clone() });
        }
    }

    let u = VertexId::new(format!("{e}.u"));
    let ef = EdgeId::new(format!("{e}.f"));
    let eg = EdgeId::new(format!("{e}.g"));
    let mut modes = h.modes().clone();
    modes.insert(u.clone(), Mode::new(a_dim, VectorExpr::zero(a_dim, a_dim), a_active.clone(), Predicate::False));
    let mut edges = h.edges().clone();
    edges.remove(e);
    let mut first = ResetEdge::new(r.src.clone(), u.clone(), r.guard.clone(), r.event.clone(), f.clone());
    first.empty = r.empty;
    edges.insert(ef.clone(), first);
    edges.insert(eg.clone(), ResetEdge::new(u.clone(), r.tgt.clone(), a_active.clone(), Expr::Num(0.0), g.clone()));
    let s = Arc::new(build(modes, edges, params.clone(), h.eq_tol(), provenance("factor_reset", &[h]))?);

    let mut vmap = BTreeMap::new();
    let mut maps = BTreeMap::new();
    let mut inverses = BTreeMap::new();
    for (w, m) in h.modes() {
        vmap.insert(w.clone(), w.clone());
        maps.insert(w.clone(), VectorExpr::identity(m.dim));
        inverses.insert(w.clone(), VectorExpr::identity(m.dim));
    }
    vmap.insert(u.clone(), r.tgt.clone());
    maps.insert(u.clone(), g.clone());
    let mut emap: BTreeMap<EdgeId, GenEdge> =
        h.edges().keys().filter(|x| *x != e).map(|x| (x.clone(), GenEdge::Edge(x.clone()))).collect();
    emap.insert(ef.clone(), GenEdge::Edge(e.clone()));
    emap.insert(eg.clone(), GenEdge::Vertex(r.tgt.clone()));
    let gm = GraphMorphism::new(s.graph().clone(), h.graph().clone(), vmap, emap)?;
    let map = Semiconjugacy::new(s, h.clone(), gm, maps, inverses)?;
    Ok(Subdivision { map, kind: SubdivisionKind::ResetFactor { edge: e.clone(), f: fb, u, ef, eg } })
}

// ---------------------------------------------------- directed systems

/// Sampled evidence of the chain condition, produced by the analysis module.
#[derive(Clone, Debug, Serialize)]
pub struct Certification {
    pub eps: f64,
    pub t: f64,
    pub samples: usize,
    pub coverage: f64,
    pub seed: u64,
}

/// `H: H_init ⇝ H_fin`: a carrier with initial and final embeddings.
#[derive(Clone, Debug)]
pub struct DirectedSystem {
    pub carrier: Arc<HybridSystem>,
    pub init: Semiconjugacy,
    pub fin: Semiconjugacy,
    pub certified: Option<Certification>,
}

impl DirectedSystem {
    /// Structural checks only: codomains, final inverses and the sink condition.
    pub fn new(init: Semiconjugacy, fin: Semiconjugacy) -> Result<Self, ComposeError> {
        if **init.cod() != **fin.cod() {
            return Err(ComposeError::Mismatch("initial and final maps have different codomains".into()));
        }
        let carrier = fin.cod().clone();
        let init = init.retarget(carrier.clone())?;
        for v in fin.dom().modes().keys() {
            if fin.inverse(v).is_none() {
                return Err(ComposeError::MissingInverse(v.clone()));
            }
        }
        if !fin.graph_map().classify().monic || !init.graph_map().classify().monic {
            return Err(ComposeError::Mismatch("initial and final graph maps must be monic".into()));
        }
        let image = fin.graph_map().image_vertices();
        for (e, r) in carrier.edges() {
            if image.contains(&r.src) && !image.contains(&r.tgt) {
                return Err(ComposeError::NotSink(e.clone()));
            }
        }
        Ok(DirectedSystem { carrier, init, fin, certified: None })
    }

    /// `U(H) = (H, id, id)`.
    pub fn identity(h: Arc<HybridSystem>) -> Self {
        let id = Semiconjugacy::identity(h.clone());
        DirectedSystem { carrier: h, init: id.clone(), fin: id, certified: None }
    }

    pub fn source(&self) -> &Arc<HybridSystem> {
        self.init.dom()
    }

    pub fn target(&self) -> &Arc<HybridSystem> {
        self.fin.dom()
    }
}

fn reverse_vertex_map(g: &GraphMorphism) -> BTreeMap<VertexId, VertexId> {
    g.vertex_map().iter().map(|(a, b)| (b.clone(), a.clone())).collect()
}

/// `Hp ⊙ H`: glue `H: X ⇝ K` and `Hp: K ⇝ Z` along `K`, giving `Hp`
/// priority on the overlap.
///
/// Data of `H` that touches the overlap is transported into `Hp`
/// coordinates by `β_w = init′_w ∘ fin_w⁻¹`; guards of `H` leaving an
/// overlap mode lose the points where an `Hp` guard is enabled.
pub fn sequential_compose(h: &DirectedSystem, hp: &DirectedSystem) -> Result<DirectedSystem, ComposeError> {
    if **h.target() != **hp.source() {
        return Err(ComposeError::Mismatch("target of the first system differs from source of the second".into()));
    }
    let k = h.target().clone();
    for w in k.modes().keys() {
        if h.fin.inverse(w).is_none() {
            return Err(ComposeError::MissingInverse(w.clone()));
        }
    }
    let big = h.carrier.bound();
    let (fin_maps, fin_inv) = h.fin.bound_maps();
    let (init_maps, init_inv) = hp.init.bound_maps();
    let fin_graph = h.fin.graph_map().with_domain(k.graph().clone())?;
    let init_graph = hp.init.graph_map().with_domain(k.graph().clone())?;
    let (pg, leg_h, leg_hp) = graph_pushout(&fin_graph, &init_graph)?;

    // overlap vertex of H -> its K preimage
    let overlap = reverse_vertex_map(h.fin.graph_map());
    let beta = |w: &VertexId| init_maps[w].compose(&fin_inv[w]);
    let beta_inv = |w: &VertexId| -> Result<VectorExpr, ComposeError> {
        let inv = init_inv.get(w).ok_or_else(|| ComposeError::MissingInitInverse(w.clone()))?;
        Ok(fin_maps[w].compose(inv))
    };

    let mut modes = BTreeMap::new();
    let mut edges = BTreeMap::new();
    for (v, m) in hp.carrier.modes() {
        modes.insert(leg_hp.map_vertex(v).unwrap().clone(), m.clone());
    }
    for (e, r) in hp.carrier.edges() {
        let mut r = r.clone();
        r.src = leg_hp.map_vertex(&r.src).unwrap().clone();
        r.tgt = leg_hp.map_vertex(&r.tgt).unwrap().clone();
        edges.insert(e.clone(), r);
    }
    for (v, m) in big.modes() {
        if !overlap.contains_key(v) {
            modes.insert(leg_h.map_vertex(v).unwrap().clone(), m.clone());
        }
    }
    for (e, r) in big.edges() {
        let GenEdge::Edge(ne) = leg_h.map_edge(e).unwrap().clone() else { unreachable!("pushout legs are monic") };
        if edges.contains_key(&ne) {
            continue;
        }
        let mut nr = r.clone();
        nr.src = leg_h.map_vertex(&r.src).unwrap().clone();
        nr.tgt = leg_h.map_vertex(&r.tgt).unwrap().clone();
        if let Some(w) = overlap.get(&r.src) {
            let bi = beta_inv(w)?;
            let at = hp.init.vertex_image(w);
            let taken = Predicate::or_all(hp.carrier.out_edges(at).map(|(_, x)| x.guard.bind(hp.carrier.params())));
            nr.guard = Predicate::and_all([r.guard.substitute(&bi.components), Predicate::negate(taken)]);
            nr.event = r.event.substitute(&bi.components);
            nr.reset = nr.reset.compose(&bi);
        }
        if let Some(w) = overlap.get(&r.tgt) {
            nr.reset = beta(w).compose(&nr.reset);
        }
        edges.insert(ne, nr);
    }
    let eq_tol = h.carrier.eq_tol().max(hp.carrier.eq_tol());
    let prov = provenance("sequential", &[&h.carrier, &hp.carrier]);
    let carrier = Arc::new(build(modes, edges, hp.carrier.params().clone(), eq_tol, prov)?);
    if **carrier.graph() != *pg {
        return Err(ComposeError::Mismatch("composite graph differs from the pushout".into()));
    }

    // initial map: H.init followed by the H leg, transported on the overlap
    let (hi_maps, hi_inv) = h.init.bound_maps();
    let gi = compose_graph_morphisms(&leg_h, h.init.graph_map())?.with_codomain(carrier.graph().clone())?;
    let mut maps = BTreeMap::new();
    let mut inverses = BTreeMap::new();
    for (x, m) in &hi_maps {
        let b = h.init.vertex_image(x);
        match overlap.get(b) {
            Some(w) => {
                maps.insert(x.clone(), beta(w).compose(m));
                if let (Some(mi), Ok(bi)) = (hi_inv.get(x), beta_inv(w)) {
                    inverses.insert(x.clone(), mi.compose(&bi));
                }
            }
            None => {
                maps.insert(x.clone(), m.clone());
                if let Some(mi) = hi_inv.get(x) {
                    inverses.insert(x.clone(), mi.clone());
                }
            }
        }
    }
    let init = Semiconjugacy::new(h.source().clone(), carrier.clone(), gi, maps, inverses)?;
    let gf = compose_graph_morphisms(&leg_hp, hp.fin.graph_map())?.with_codomain(carrier.graph().clone())?;
    let (ff_maps, ff_inv) = hp.fin.bound_maps();
    let fin = Semiconjugacy::new(hp.target().clone(), carrier.clone(), gf, ff_maps, ff_inv)?;
    Ok(DirectedSystem { carrier, init, fin, certified: None })
}

/// `α1 × α2` between product systems whose vertices are named `(a,b)`.
fn product_map(
    a1: &Semiconjugacy,
    a2: &Semiconjugacy,
    dom: &Arc<HybridSystem>,
    cod: &Arc<HybridSystem>,
    dom_proj: (&GraphMorphism, &GraphMorphism),
) -> Result<Semiconjugacy, ComposeError> {
    let (m1, i1) = a1.bound_maps();
    let (m2, i2) = a2.bound_maps();
    let mut vmap = BTreeMap::new();
    let mut emap = BTreeMap::new();
    let mut maps = BTreeMap::new();
    let mut inverses = BTreeMap::new();
    for v in dom.graph().vertices() {
        let (x, y) = (dom_proj.0.map_vertex(v).unwrap(), dom_proj.1.map_vertex(v).unwrap());
        vmap.insert(v.clone(), pair_vertex(a1.vertex_image(x), a2.vertex_image(y)));
        let (d1, d2) = (a1.dom().dim(x).unwrap(), a2.dom().dim(y).unwrap());
        maps.insert(v.clone(), block_map(&m1[x], &m2[y], d1, d2));
        if let (Some(j1), Some(j2)) = (i1.get(x), i2.get(y)) {
            inverses.insert(v.clone(), block_map(j1, j2, j1.dim_in, j2.dim_in));
        }
    }
    for e in dom.graph().edge_ids() {
        let p = a1.graph_map().map_gen(dom_proj.0.map_edge(e).unwrap()).unwrap();
        let q = a2.graph_map().map_gen(dom_proj.1.map_edge(e).unwrap()).unwrap();
        let image = match (&p, &q) {
            (GenEdge::Vertex(a), GenEdge::Vertex(b)) => GenEdge::Vertex(pair_vertex(a, b)),
            _ => GenEdge::Edge(EdgeId::new(format!("({},{})", p.name(), q.name()))),
        };
        emap.insert(e.clone(), image);
    }
    let gm = GraphMorphism::new(dom.graph().clone(), cod.graph().clone(), vmap, emap)?;
    Ok(Semiconjugacy::new(dom.clone(), cod.clone(), gm, maps, inverses)?)
}

/// Componentwise product of directed systems.
pub fn directed_product(h1: &DirectedSystem, h2: &DirectedSystem) -> Result<DirectedSystem, ComposeError> {
    let (carrier, _, _) = product(&h1.carrier, &h2.carrier)?;
    let (x, x1, x2) = product(h1.source(), h2.source())?;
    let (z, z1, z2) = product(h1.target(), h2.target())?;
    let init = product_map(&h1.init, &h2.init, &x, &carrier, (x1.graph_map(), x2.graph_map()))?;
    let fin = product_map(&h1.fin, &h2.fin, &z, &carrier, (z1.graph_map(), z2.graph_map()))?;
    DirectedSystem::new(init, fin)
}

/// `α1 ⊔ α2` between coproducts.
fn coproduct_map(
    a1: &Semiconjugacy,
    a2: &Semiconjugacy,
    dom: (&Semiconjugacy, &Semiconjugacy),
    cod: (&Semiconjugacy, &Semiconjugacy),
) -> Result<Semiconjugacy, ComposeError> {
    let mut vmap = BTreeMap::new();
    let mut emap = BTreeMap::new();
    let mut maps = BTreeMap::new();
    let mut inverses = BTreeMap::new();
    for (a, (di, ci)) in [(a1, (dom.0, cod.0)), (a2, (dom.1, cod.1))] {
        let (m, inv) = a.bound_maps();
        for (v, mv) in m {
            let nv = di.vertex_image(&v).clone();
            vmap.insert(nv.clone(), ci.vertex_image(a.vertex_image(&v)).clone());
            maps.insert(nv.clone(), mv);
            if let Some(i) = inv.get(&v) {
                inverses.insert(nv, i.clone());
            }
        }
        for (e, p) in a.graph_map().edge_map() {
            let GenEdge::Edge(ne) = di.graph_map().map_edge(e).unwrap().clone() else { unreachable!() };
            emap.insert(ne, ci.graph_map().map_gen(p).unwrap());
        }
    }
    let (d, c) = (dom.0.cod(), cod.0.cod());
    let gm = GraphMorphism::new(d.graph().clone(), c.graph().clone(), vmap, emap)?;
    Ok(Semiconjugacy::new(d.clone(), c.clone(), gm, maps, inverses)?)
}

/// Disjoint union of directed systems.
pub fn directed_coproduct(h1: &DirectedSystem, h2: &DirectedSystem) -> Result<DirectedSystem, ComposeError> {
    let (_, c1, c2) = coproduct(&h1.carrier, &h2.carrier)?;
    let (_, x1, x2) = coproduct(h1.source(), h2.source())?;
    let (_, z1, z2) = coproduct(h1.target(), h2.target())?;
    let init = coproduct_map(&h1.init, &h2.init, (&x1, &x2), (&c1, &c2))?;
    let fin = coproduct_map(&h1.fin, &h2.fin, (&z1, &z2), (&c1, &c2))?;
    DirectedSystem::new(init, fin)
}

// ---------------------------------------------------- template-anchor

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub samples: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { samples: 200, tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PairChecks {
    pub subdivision: ClassificationReport,
    pub embedding: ClassificationReport,
}

/// A span `T ←p− S −i→ A`.
#[derive(Clone, Debug)]
pub struct TemplateAnchorPair {
    pub p: Semiconjugacy,
    pub i: Semiconjugacy,
    pub checks: Option<PairChecks>,
    pub attracting_evidence: Option<serde_json::Value>,
}

impl TemplateAnchorPair {
    pub fn new(p: Semiconjugacy, i: Semiconjugacy) -> Result<Self, ComposeError> {
        if **p.dom() != **i.dom() {
            return Err(ComposeError::Mismatch("span legs have different domains".into()));
        }
        Ok(TemplateAnchorPair { p, i, checks: None, attracting_evidence: None })
    }

    /// `A ←id− A −id→ A`.
    pub fn identity(a: Arc<HybridSystem>) -> Self {
        let id = Semiconjugacy::identity(a);
        TemplateAnchorPair { p: id.clone(), i: id, checks: None, attracting_evidence: None }
    }

    pub fn template(&self) -> &Arc<HybridSystem> {
        self.p.cod()
    }

    pub fn roof(&self) -> &Arc<HybridSystem> {
        self.p.dom()
    }

    pub fn anchor(&self) -> &Arc<HybridSystem> {
        self.i.cod()
    }

    /// Run the sampled necessary conditions on both legs.
    pub fn check(&mut self, opts: CheckOptions) -> &PairChecks {
        let subdivision = check_subdivision_necessary(&self.p, opts.samples, opts.tol, opts.seed);
        let embedding = classify_embedding(&self.i, opts.samples, opts.tol, opts.seed);
        self.checks.insert(PairChecks { subdivision, embedding })
    }
}

/// Compose `T1 ← S1 → A1` with `A1 ← S2 → A2` through the fiber product
/// `S2 ×_{A1} S1`. Attracting evidence is not carried over.
pub fn compose_template_anchor(
    p1: &TemplateAnchorPair,
    p2: &TemplateAnchorPair,
    constraint_tol: f64,
    checks: Option<CheckOptions>,
) -> Result<TemplateAnchorPair, ComposeError> {
    if **p1.anchor() != **p2.template() {
        return Err(ComposeError::Mismatch("anchor of the first pair differs from template of the second".into()));
    }
    let i1 = p1.i.retarget(p2.template().clone())?;
    let (roof, to_s2, to_s1) = fiber_product(&p2.p, &i1, FiberOptions { constraint_tol, verify: None })?;
    if roof.modes().is_empty() {
        return Err(ComposeError::Empty("composed roof".into()));
    }
    let p = compose_semiconjugacies(&p1.p, &to_s1)?;
    let i = compose_semiconjugacies(&p2.i, &to_s2)?;
    let mut out = TemplateAnchorPair { p, i, checks: None, attracting_evidence: None };
    if let Some(opts) = checks {
        out.check(opts);
    }
    let _ = roof;
    Ok(out)
}

/// Names present in both graphs; used by callers reporting id collisions.
pub fn shared_names(a: &Graph, b: &Graph) -> BTreeSet<String> {
    let names = |g: &Graph| -> BTreeSet<String> {
        g.vertices().map(|v| v.to_string()).chain(g.edge_ids().map(|e| e.to_string())).collect()
    };
    names(a).intersection(&names(b)).cloned().collect()
}
