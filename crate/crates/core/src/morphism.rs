//! Hybrid semiconjugacies: data, sampled validation, classification and
//! composition.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::expr::{parse_vector, ExprError, Params, Predicate, VectorExpr};
use crate::graph::{compose_graph_morphisms, EdgeId, GenEdge, GraphError, GraphMorphism, VertexId};
use crate::sample::Projector;
use crate::system::{euclid, HybridPoint, HybridSystem, Mode, SystemError, MAX_WITNESSES};

#[derive(Debug, Error)]
pub enum MorphismError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{location}: {source}")]
    Expr { location: String, source: ExprError },
    #[error("{0}")]
    Structure(String),
    #[error("system: {0}")]
    System(String),
}

impl From<SystemError> for MorphismError {
    fn from(e: SystemError) -> Self {
        MorphismError::System(e.to_string())
    }
}

/// A graph morphism plus one smooth map per domain vertex.
#[derive(Clone, Debug)]
pub struct Semiconjugacy {
    dom: Arc<HybridSystem>,
    cod: Arc<HybridSystem>,
    graph_map: GraphMorphism,
    maps: BTreeMap<VertexId, VectorExpr>,
    inverses: BTreeMap<VertexId, VectorExpr>,
    params: Params,
}

impl Semiconjugacy {
    pub fn new(
        dom: Arc<HybridSystem>,
        cod: Arc<HybridSystem>,
        graph_map: GraphMorphism,
        maps: BTreeMap<VertexId, VectorExpr>,
        inverses: BTreeMap<VertexId, VectorExpr>,
    ) -> Result<Self, MorphismError> {
        Semiconjugacy::with_params(dom, cod, graph_map, maps, inverses, Params::new())
    }

    /// `params` extends (and overrides) the parameters of both systems.
    pub fn with_params(
        dom: Arc<HybridSystem>,
        cod: Arc<HybridSystem>,
        graph_map: GraphMorphism,
        maps: BTreeMap<VertexId, VectorExpr>,
        inverses: BTreeMap<VertexId, VectorExpr>,
        params: Params,
    ) -> Result<Self, MorphismError> {
        if **graph_map.dom() != **dom.graph() || **graph_map.cod() != **cod.graph() {
            return Err(MorphismError::Graph(GraphError::Mismatch));
        }
        let graph_map = graph_map.with_domain(dom.graph().clone())?.with_codomain(cod.graph().clone())?;
        let mut all = dom.params().clone();
        all.extend(cod.params().iter().map(|(k, v)| (k.clone(), *v)));
        all.extend(params.iter().map(|(k, v)| (k.clone(), *v)));
        for v in dom.graph().vertices() {
            let m = maps.get(v).ok_or_else(|| MorphismError::Structure(format!("no map for vertex {v}")))?;
            let w = graph_map.map_vertex(v).unwrap();
            let (dd, cd) = (dom.dim(v).unwrap(), cod.dim(w).unwrap());
            if m.dim_in != dd || m.dim_out() != cd || m.max_var().is_some_and(|i| i >= dd) {
                return Err(MorphismError::Structure(format!("map at {v} must send dimension {dd} to {cd}")));
            }
            for p in m.params() {
                if !all.contains_key(&p) {
                    return Err(MorphismError::Structure(format!("map at {v}: unbound parameter {p}")));
                }
            }
            if let Some(inv) = inverses.get(v) {
                if inv.dim_in != cd || inv.dim_out() != dd || inv.max_var().is_some_and(|i| i >= cd) {
                    return Err(MorphismError::Structure(format!("inverse at {v} must send dimension {cd} to {dd}")));
                }
                for p in inv.params() {
                    if !all.contains_key(&p) {
                        return Err(MorphismError::Structure(format!("inverse at {v}: unbound parameter {p}")));
                    }
                }
            }
        }
        if maps.len() != dom.graph().vertex_count() || inverses.keys().any(|v| !dom.graph().has_vertex(v)) {
            return Err(MorphismError::Structure("maps keyed by unknown vertices".into()));
        }
        Ok(Semiconjugacy { dom, cod, graph_map, maps, inverses, params: all })
    }

    pub fn identity(h: Arc<HybridSystem>) -> Self {
        let maps: BTreeMap<_, _> =
            h.modes().iter().map(|(v, m)| (v.clone(), VectorExpr::identity(m.dim))).collect();
        let g = GraphMorphism::identity(h.graph().clone());
        Semiconjugacy::new(h.clone(), h, g, maps.clone(), maps).expect("identity is well formed")
    }

    /// The semiconjugacy from the one-point system picking out `p`.
    pub fn point(h: Arc<HybridSystem>, p: &HybridPoint) -> Result<Self, MorphismError> {
        let n = Arc::new(HybridSystem::representing_point());
        let star = VertexId::new("*");
        let g = GraphMorphism::new(
            n.graph().clone(),
            h.graph().clone(),
            [(star.clone(), p.mode.clone())].into(),
            BTreeMap::new(),
        )?;
        let map = VectorExpr::new(0, p.x.iter().map(|&c| crate::expr::Expr::Num(c)).collect());
        Semiconjugacy::new(n, h, g, [(star, map)].into(), BTreeMap::new())
    }

    pub fn dom(&self) -> &Arc<HybridSystem> {
        &self.dom
    }

    pub fn cod(&self) -> &Arc<HybridSystem> {
        &self.cod
    }

    pub fn graph_map(&self) -> &GraphMorphism {
        &self.graph_map
    }

    pub fn maps(&self) -> &BTreeMap<VertexId, VectorExpr> {
        &self.maps
    }

    pub fn map(&self, v: &VertexId) -> Option<&VectorExpr> {
        self.maps.get(v)
    }

    pub fn inverses(&self) -> &BTreeMap<VertexId, VectorExpr> {
        &self.inverses
    }

    pub fn inverse(&self, v: &VertexId) -> Option<&VectorExpr> {
        self.inverses.get(v)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn vertex_image(&self, v: &VertexId) -> &VertexId {
        self.graph_map.map_vertex(v).expect("vertex in domain")
    }

    /// Maps and inverses with parameters substituted.
    pub fn bound_maps(&self) -> (BTreeMap<VertexId, VectorExpr>, BTreeMap<VertexId, VectorExpr>) {
        (
            self.maps.iter().map(|(v, m)| (v.clone(), m.bind(&self.params))).collect(),
            self.inverses.iter().map(|(v, m)| (v.clone(), m.bind(&self.params))).collect(),
        )
    }

    pub fn apply(&self, p: &HybridPoint) -> Result<HybridPoint, ExprError> {
        let y = self.maps[&p.mode].eval(&p.x, &self.params)?;
        Ok(HybridPoint { mode: self.vertex_image(&p.mode).clone(), x: y })
    }

    /// Replace the codomain by a structurally equal system.
    pub fn retarget(&self, cod: Arc<HybridSystem>) -> Result<Self, MorphismError> {
        Semiconjugacy::with_params(
            self.dom.clone(),
            cod,
            self.graph_map.clone(),
            self.maps.clone(),
            self.inverses.clone(),
            self.params.clone(),
        )
    }

    pub fn to_value(&self) -> serde_json::Value {
        let vertices: BTreeMap<String, String> =
            self.graph_map.vertex_map().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let edges: BTreeMap<String, String> =
            self.graph_map.edge_map().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let maps: BTreeMap<String, Vec<String>> =
            self.maps.iter().map(|(k, v)| (k.to_string(), v.to_strings())).collect();
        let inverses: BTreeMap<String, Vec<String>> =
            self.inverses.iter().map(|(k, v)| (k.to_string(), v.to_strings())).collect();
        serde_json::json!({
            "dom": self.dom.to_value(),
            "cod": self.cod.to_value(),
            "graph_map": {"vertices": vertices, "edges": edges},
            "maps": maps,
            "inverses": inverses,
            "params": self.params,
        })
    }

    /// Parse the semiconjugacy format. `dom`/`cod` may be inline system
    /// objects or strings handed to `resolve` (typically file paths).
    pub fn from_value(
        value: &serde_json::Value,
        resolve: &dyn Fn(&str) -> Result<HybridSystem, SystemError>,
    ) -> Result<Self, MorphismError> {
        let obj = value.as_object().ok_or_else(|| MorphismError::Structure("expected a JSON object".into()))?;
        let system = |key: &str| -> Result<Arc<HybridSystem>, MorphismError> {
            match obj.get(key) {
                Some(serde_json::Value::String(s)) => Ok(Arc::new(resolve(s)?)),
                Some(v @ serde_json::Value::Object(_)) => Ok(Arc::new(HybridSystem::from_value(v)?)),
                _ => Err(MorphismError::Structure(format!("missing {key}"))),
            }
        };
        let dom = system("dom")?;
        let cod = system("cod")?;
        let str_map = |v: Option<&serde_json::Value>| -> Result<BTreeMap<String, String>, MorphismError> {
            match v {
                None => Ok(BTreeMap::new()),
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| MorphismError::Structure(e.to_string())),
            }
        };
        let gm = obj.get("graph_map").and_then(|g| g.as_object());
        let vmap = str_map(gm.and_then(|g| g.get("vertices")))?;
        let emap = str_map(gm.and_then(|g| g.get("edges")))?;
        let vmap: BTreeMap<VertexId, VertexId> =
            vmap.into_iter().map(|(k, v)| (VertexId::new(k), VertexId::new(v))).collect();
        let emap: BTreeMap<EdgeId, GenEdge> = emap
            .into_iter()
            .map(|(k, v)| {
                let target = if cod.graph().has_edge(&EdgeId::new(&v)) {
                    GenEdge::Edge(EdgeId::new(v))
                } else {
                    GenEdge::Vertex(VertexId::new(v))
                };
                (EdgeId::new(k), target)
            })
            .collect();
        let graph_map = GraphMorphism::new(dom.graph().clone(), cod.graph().clone(), vmap, emap)?;
        let vec_map = |key: &str, inverse: bool| -> Result<BTreeMap<VertexId, VectorExpr>, MorphismError> {
            let raw: BTreeMap<String, Vec<String>> = match obj.get(key) {
                None => BTreeMap::new(),
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| MorphismError::Structure(e.to_string()))?,
            };
            let mut out = BTreeMap::new();
            for (k, comps) in raw {
                let v = VertexId::new(&k);
                let w = graph_map
                    .map_vertex(&v)
                    .ok_or_else(|| MorphismError::Structure(format!("{key}: unknown vertex {k}")))?;
                let dim = if inverse { cod.dim(w).unwrap() } else { dom.dim(&v).unwrap() };
                let parsed = parse_vector(&comps, dim)
                    .map_err(|source| MorphismError::Expr { location: format!("{key} at {k}"), source })?;
                out.insert(v, parsed);
            }
            Ok(out)
        };
        let maps = vec_map("maps", false)?;
        let inverses = vec_map("inverses", true)?;
        let params: Params = match obj.get("params") {
            None => Params::new(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| MorphismError::Structure(e.to_string()))?,
        };
        Semiconjugacy::with_params(dom, cod, graph_map, maps, inverses, params)
    }
}

/// `β ∘ α`: graph composition plus substitution of the vertex maps.
pub fn compose_semiconjugacies(beta: &Semiconjugacy, alpha: &Semiconjugacy) -> Result<Semiconjugacy, MorphismError> {
    if *alpha.cod != *beta.dom {
        return Err(MorphismError::Graph(GraphError::Mismatch));
    }
    let g = compose_graph_morphisms(&beta.graph_map, &alpha.graph_map)?;
    let mut maps = BTreeMap::new();
    let mut inverses = BTreeMap::new();
    for (v, a) in &alpha.maps {
        let w = alpha.vertex_image(v);
        maps.insert(v.clone(), beta.maps[w].compose(a));
        if let (Some(ai), Some(bi)) = (alpha.inverses.get(v), beta.inverses.get(w)) {
            inverses.insert(v.clone(), ai.compose(bi));
        }
    }
    let mut params = alpha.params.clone();
    params.extend(beta.params.iter().map(|(k, v)| (k.clone(), *v)));
    Semiconjugacy::with_params(alpha.dom.clone(), beta.cod.clone(), g, maps, inverses, params)
}

// ------------------------------------------------------------ validation

#[derive(Clone, Debug, Serialize)]
pub struct ResidualCheck {
    pub check: String,
    pub location: String,
    pub tested: usize,
    pub violations: usize,
    pub max_residual: f64,
    pub starved: bool,
    /// Points (in the domain chart) with their residuals.
    pub witnesses: Vec<(Vec<f64>, f64)>,
}

impl ResidualCheck {
    fn new(check: &str, location: String) -> Self {
        ResidualCheck {
            check: check.to_string(),
            location,
            tested: 0,
            violations: 0,
            max_residual: 0.0,
            starved: false,
            witnesses: Vec::new(),
        }
    }

    fn record(&mut self, x: &[f64], residual: f64, tol: f64) {
        self.tested += 1;
        let residual = if residual.is_nan() { f64::INFINITY } else { residual };
        self.max_residual = self.max_residual.max(residual);
        if residual > tol {
            self.violations += 1;
            if self.witnesses.len() < MAX_WITNESSES {
                self.witnesses.push((x.to_vec(), residual));
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MorphismReport {
    pub ok: bool,
    pub seed: u64,
    pub samples: usize,
    pub tol: f64,
    pub max_residual: f64,
    pub checks: Vec<ResidualCheck>,
}

impl MorphismReport {
    fn from_checks(checks: Vec<ResidualCheck>, seed: u64, samples: usize, tol: f64) -> Self {
        let ok = checks.iter().all(|c| c.violations == 0);
        let max_residual = checks.iter().map(|c| c.max_residual).fold(0.0, f64::max);
        MorphismReport { ok, seed, samples, tol, max_residual, checks }
    }

    pub fn any_starved(&self) -> bool {
        self.checks.iter().any(|c| c.starved)
    }
}

/// Distance by which `x` misses the set (0 inside, within `slack`).
fn membership_residual(pred: &Predicate, x: &[f64], params: &Params, eq_tol: f64) -> f64 {
    if pred.contains(x, params, eq_tol) {
        return 0.0;
    }
    match pred.robustness(x, params) {
        Ok(r) => (-r).max(0.0).max(f64::MIN_POSITIVE),
        Err(_) => f64::INFINITY,
    }
}

struct Bound {
    dom: HybridSystem,
    cod: HybridSystem,
    maps: BTreeMap<VertexId, VectorExpr>,
    inverses: BTreeMap<VertexId, VectorExpr>,
}

fn bind_all(a: &Semiconjugacy) -> Bound {
    let (maps, inverses) = a.bound_maps();
    Bound { dom: a.dom.bound(), cod: a.cod.bound(), maps, inverses }
}

/// Sampled check of the semiconjugacy conditions: flow sets into flow sets,
/// field commutation `Y∘α = Jα·X`, guards into guards (or flow sets for
/// edges sent to vertices) and reset commutation.
pub fn validate_semiconjugacy(a: &Semiconjugacy, samples: usize, tol: f64, seed: u64) -> MorphismReport {
    let b = bind_all(a);
    let np = Params::new();
    let mut checks = Vec::new();
    for (v, m) in b.dom.modes() {
        let w = a.vertex_image(v);
        let cm = &b.cod.modes()[w];
        let map = &b.maps[v];
        let flow = b.dom.sample(v, &m.flow, samples, seed, "semiconjugacy/flow");
        let mut member = ResidualCheck::new("flow_into_flow", format!("mode {v}"));
        let mut field = ResidualCheck::new("field_commutes", format!("mode {v}"));
        member.starved = flow.starved();
        field.starved = flow.starved();
        for x in &flow.points {
            let Ok(y) = map.eval(x, &np) else {
                member.record(x, f64::INFINITY, tol);
                continue;
            };
            member.record(x, membership_residual(&cm.flow, &y, &np, b.cod.eq_tol()), tol);
            let r = (|| -> Result<f64, ExprError> {
                let fx = m.field.eval(x, &np)?;
                let jac = map.jacobian(x, &np)?;
                let fy = cm.field.eval(&y, &np)?;
                let pushed: Vec<f64> =
                    jac.iter().map(|row| row.iter().zip(&fx).map(|(j, f)| j * f).sum()).collect();
                Ok(euclid(&pushed, &fy))
            })()
            .unwrap_or(f64::INFINITY);
            field.record(x, r, tol);
        }
        checks.push(member);
        checks.push(field);
        if let Some(inv) = b.inverses.get(v) {
            let active = b.dom.sample(v, &m.active, samples, seed, "semiconjugacy/inverse");
            let mut c = ResidualCheck::new("inverse", format!("mode {v}"));
            c.starved = active.starved();
            for x in &active.points {
                let r = (|| -> Result<f64, ExprError> {
                    let y = map.eval(x, &np)?;
                    let back = inv.eval(&y, &np)?;
                    let again = map.eval(&back, &np)?;
                    Ok(euclid(&back, x).max(euclid(&again, &y)))
                })()
                .unwrap_or(f64::INFINITY);
                c.record(x, r, tol);
            }
            checks.push(c);
        }
    }
    for (e, r) in b.dom.edges() {
        let guard = b.dom.sample(&r.src, &r.guard, samples, seed, &format!("semiconjugacy/guard/{e}"));
        let mut member = ResidualCheck::new("guard_into_guard", format!("edge {e}"));
        let mut reset = ResidualCheck::new("reset_commutes", format!("edge {e}"));
        member.starved = guard.starved();
        reset.starved = guard.starved();
        let image = a.graph_map.map_edge(e).unwrap();
        let (ms, mt) = (&b.maps[&r.src], &b.maps[&r.tgt]);
        for x in &guard.points {
            let res = (|| -> Result<(f64, f64), ExprError> {
                let y = ms.eval(x, &np)?;
                let after = mt.eval(&r.reset.eval(x, &np)?, &np)?;
                Ok(match image {
                    GenEdge::Edge(ce) => {
                        let cr = &b.cod.edges()[ce];
                        (membership_residual(&cr.guard, &y, &np, b.cod.eq_tol()), euclid(&after, &cr.reset.eval(&y, &np)?))
                    }
                    GenEdge::Vertex(w) => {
                        let cm = &b.cod.modes()[w];
                        (membership_residual(&cm.flow, &y, &np, b.cod.eq_tol()), euclid(&after, &y))
                    }
                })
            })()
            .unwrap_or((f64::INFINITY, f64::INFINITY));
            member.record(x, res.0, tol);
            reset.record(x, res.1, tol);
        }
        checks.push(member);
        checks.push(reset);
    }
    MorphismReport::from_checks(checks, seed, samples, tol)
}

// -------------------------------------------------------- classification

const RANK_TOL: f64 = 1e-8;

/// Orthonormal basis (columns) of the tangent space of `{c = 0}` at `x`.
pub(crate) fn tangent_basis(constraints: &Projector<'_>, pred: &Predicate, x: &[f64], params: &Params) -> DMatrix<f64> {
    let n = x.len();
    let cs = pred.equality_constraints();
    if constraints.is_trivial() || cs.is_empty() {
        return DMatrix::identity(n, n);
    }
    let mut jac = DMatrix::zeros(cs.len(), n);
    for (i, c) in cs.iter().enumerate() {
        for k in 0..n {
            jac[(i, k)] = c.eval_dual(x, params, k).map(|d| d.1).unwrap_or(0.0);
        }
    }
    let gram = jac.transpose() * &jac;
    let eig = SymmetricEigen::new(gram);
    let scale = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1.0);
    let cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k].abs() <= RANK_TOL * scale).collect();
    DMatrix::from_fn(n, cols.len(), |r, c| eig.eigenvectors[(r, cols[c])])
}

fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|s| **s > RANK_TOL * top.max(1.0)).count()
}

#[derive(Clone, Debug, Serialize)]
pub struct RankStats {
    pub location: String,
    pub tested: usize,
    pub failures: usize,
    pub witnesses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassificationReport {
    pub verdict: bool,
    pub kind: &'static str,
    pub seed: u64,
    pub samples: usize,
    pub graph_ok: bool,
    pub rank: Vec<RankStats>,
    pub injectivity_failures: usize,
    /// Fraction of sampled codomain points with a located preimage.
    pub coverage: Option<f64>,
    pub fiber_failures: usize,
    pub notes: Vec<String>,
}

struct RankOutcome {
    stats: RankStats,
    images: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Per-vertex restricted Jacobian rank test. `want` receives
/// `(rank, dim T_dom, dim T_cod)` and decides success.
fn rank_test(
    b: &Bound,
    a: &Semiconjugacy,
    v: &VertexId,
    samples: usize,
    seed: u64,
    want: impl Fn(usize, usize, usize) -> bool,
) -> RankOutcome {
    let np = Params::new();
    let m = &b.dom.modes()[v];
    let w = a.vertex_image(v);
    let cm = &b.cod.modes()[w];
    let map = &b.maps[v];
    let pts = b.dom.sample(v, &m.active, samples, seed, "classify/active");
    let dproj = Projector::new(&m.active, &np);
    let cproj = Projector::new(&cm.active, &np);
    let mut stats = RankStats { location: format!("mode {v}"), tested: 0, failures: 0, witnesses: Vec::new() };
    let mut images = Vec::new();
    for x in pts.points {
        stats.tested += 1;
        let ok = (|| -> Option<(bool, Vec<f64>)> {
            let y = map.eval(&x, &np).ok()?;
            let jac = map.jacobian(&x, &np).ok()?;
            let j = DMatrix::from_fn(map.dim_out(), m.dim, |r, c| jac[r][c]);
            let nd = tangent_basis(&dproj, &m.active, &x, &np);
            let nc = tangent_basis(&cproj, &cm.active, &y, &np);
            let r = rank(&(j * &nd));
            Some((want(r, nd.ncols(), nc.ncols()), y))
        })();
        match ok {
            Some((true, y)) => images.push((x, y)),
            Some((false, y)) => {
                stats.failures += 1;
                if stats.witnesses.len() < MAX_WITNESSES {
                    stats.witnesses.push(x.clone());
                }
                images.push((x, y));
            }
            None => {
                stats.failures += 1;
                if stats.witnesses.len() < MAX_WITNESSES {
                    stats.witnesses.push(x);
                }
            }
        }
    }
    RankOutcome { stats, images }
}

/// Pairs mapping within `tol` of each other but more than `10·tol` apart.
fn injectivity_failures(images: &[(Vec<f64>, Vec<f64>)], tol: f64) -> usize {
    let mut count = 0;
    for i in 0..images.len() {
        for j in (i + 1)..images.len() {
            if euclid(&images[i].1, &images[j].1) <= tol && euclid(&images[i].0, &images[j].0) > 10.0 * tol {
                count += 1;
            }
        }
    }
    count
}

/// Sampled embedding test: monic graph map, immersion, injectivity.
pub fn classify_embedding(a: &Semiconjugacy, samples: usize, tol: f64, seed: u64) -> ClassificationReport {
    let b = bind_all(a);
    let graph_ok = a.graph_map.classify().monic;
    let mut rank_stats = Vec::new();
    let mut inj = 0;
    for v in b.dom.modes().keys() {
        let out = rank_test(&b, a, v, samples, seed, |r, td, _| r == td);
        inj += injectivity_failures(&out.images, tol);
        rank_stats.push(out.stats);
    }
    let verdict = graph_ok && inj == 0 && rank_stats.iter().all(|s| s.failures == 0);
    ClassificationReport {
        verdict,
        kind: "embedding",
        seed,
        samples,
        graph_ok,
        rank: rank_stats,
        injectivity_failures: inj,
        coverage: None,
        fiber_failures: 0,
        notes: vec!["sampled verdict: consistent with an embedding, not a proof".into()],
    }
}

/// Try to find `x ∈ I_v` with `α_v(x) = y`, starting from the given seeds.
fn find_preimage(
    map: &VectorExpr,
    dom_mode: &Mode,
    dom_eq_tol: f64,
    y: &[f64],
    starts: &[Vec<f64>],
    tol: f64,
) -> Option<Vec<f64>> {
    let np = Params::new();
    let mut constraints: Vec<crate::expr::Expr> = map
        .components
        .iter()
        .zip(y)
        .map(|(c, &yi)| crate::expr::Expr::sub(c.clone(), crate::expr::Expr::Num(yi)))
        .collect();
    constraints.extend(dom_mode.active.equality_constraints());
    let proj = Projector::from_constraints(constraints, &np);
    for s in starts {
        if let Some(x) = proj.project(s, tol * 1e-3) {
            let hit = map.eval(&x, &np).map(|fx| euclid(&fx, y) <= tol).unwrap_or(false);
            if hit && dom_mode.active.holds_within(&x, &np, dom_eq_tol.max(tol)) {
                return Some(x);
            }
        }
    }
    None
}

/// For each sampled `y ∈ I_u`, search a preimage over `α^{-1}(u)`.
fn coverage(b: &Bound, a: &Semiconjugacy, samples: usize, tol: f64, seed: u64) -> (f64, Vec<HybridPoint>) {
    let np = Params::new();
    let mut found = 0usize;
    let mut total = 0usize;
    let mut missing = Vec::new();
    let mut dom_pools: BTreeMap<&VertexId, Vec<(Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for (v, m) in b.dom.modes() {
        let pts = b.dom.sample(v, &m.active, samples, seed, "coverage/dom").points;
        let imgs = pts.into_iter().filter_map(|x| b.maps[v].eval(&x, &np).ok().map(|y| (x, y))).collect();
        dom_pools.insert(v, imgs);
    }
    for (u, cm) in b.cod.modes() {
        let ys = b.cod.sample(u, &cm.active, samples, seed, "coverage/cod").points;
        let pre: Vec<&VertexId> = b.dom.modes().keys().filter(|v| a.vertex_image(v) == u).collect();
        for y in ys {
            total += 1;
            let mut ok = false;
            for v in &pre {
                let pool = &dom_pools[v];
                let mut ranked: Vec<(f64, &Vec<f64>)> = pool.iter().map(|(x, fx)| (euclid(fx, &y), x)).collect();
                ranked.sort_by(|p, q| p.0.total_cmp(&q.0));
                let starts: Vec<Vec<f64>> = ranked.iter().take(6).map(|(_, x)| (*x).clone()).collect();
                if find_preimage(&b.maps[*v], &b.dom.modes()[*v], b.dom.eq_tol(), &y, &starts, tol.max(1e-9)).is_some() {
                    ok = true;
                    break;
                }
            }
            if ok {
                found += 1;
            } else if missing.len() < MAX_WITNESSES {
                missing.push(HybridPoint { mode: u.clone(), x: y });
            }
        }
    }
    let frac = if total == 0 { 1.0 } else { found as f64 / total as f64 };
    (frac, missing)
}

/// Sampled submersion test: full row rank on tangent spaces, plus the
/// surjectivity coverage statistic and epic graph map when `surjective`.
pub fn classify_submersion(a: &Semiconjugacy, samples: usize, tol: f64, seed: u64, surjective: bool) -> ClassificationReport {
    let b = bind_all(a);
    let mut rank_stats = Vec::new();
    for v in b.dom.modes().keys() {
        rank_stats.push(rank_test(&b, a, v, samples, seed, |r, _, tc| r == tc).stats);
    }
    let mut notes = vec!["sampled verdict: consistent with a submersion, not a proof".to_string()];
    let (graph_ok, cov) = if surjective {
        let (c, missing) = coverage(&b, a, samples, tol, seed);
        for m in missing {
            notes.push(format!("no preimage located for {} {:?}", m.mode, m.x));
        }
        (a.graph_map.classify().epic, Some(c))
    } else {
        (true, None)
    };
    let verdict = graph_ok && rank_stats.iter().all(|s| s.failures == 0) && cov.map_or(true, |c| c >= 1.0);
    ClassificationReport {
        verdict,
        kind: if surjective { "surjective_submersion" } else { "submersion" },
        seed,
        samples,
        graph_ok,
        rank: rank_stats,
        injectivity_failures: 0,
        coverage: cov,
        fiber_failures: 0,
        notes,
    }
}

/// Necessary conditions for a subdivision: epic graph map, sampled
/// surjectivity, per-vertex injective local diffeomorphisms, and sampled
/// fibers linked by resets.
pub fn check_subdivision_necessary(p: &Semiconjugacy, samples: usize, tol: f64, seed: u64) -> ClassificationReport {
    let b = bind_all(p);
    let np = Params::new();
    let graph_ok = p.graph_map.classify().epic;
    let mut rank_stats = Vec::new();
    let mut inj = 0;
    let mut notes = vec!["sampled necessary conditions only".to_string()];
    for (v, m) in b.dom.modes() {
        let w = p.vertex_image(v);
        if b.cod.modes()[w].dim != m.dim {
            notes.push(format!("mode {v}: dimension {} differs from image dimension", m.dim));
        }
        let out = rank_test(&b, p, v, samples, seed, |r, td, tc| r == td && td == tc);
        inj += injectivity_failures(&out.images, tol);
        rank_stats.push(out.stats);
    }
    let (cov, missing) = coverage(&b, p, samples, tol, seed);
    for m in missing {
        notes.push(format!("no preimage located for {} {:?}", m.mode, m.x));
    }

    // Pool of domain points: flow samples, guard samples and reset images.
    let mut pool: Vec<(HybridPoint, Vec<f64>)> = Vec::new();
    let mut links: Vec<(usize, usize)> = Vec::new();
    for (v, m) in b.dom.modes() {
        for x in b.dom.sample(v, &m.flow, samples, seed, "fiber/flow").points {
            if let Ok(y) = b.maps[v].eval(&x, &np) {
                pool.push((HybridPoint { mode: v.clone(), x }, y));
            }
        }
    }
    for (e, r) in b.dom.edges() {
        for x in b.dom.sample(&r.src, &r.guard, samples, seed, &format!("fiber/guard/{e}")).points {
            let Ok(after) = r.reset.eval(&x, &np) else { continue };
            let (Ok(y0), Ok(y1)) = (b.maps[&r.src].eval(&x, &np), b.maps[&r.tgt].eval(&after, &np)) else { continue };
            let i = pool.len();
            pool.push((HybridPoint { mode: r.src.clone(), x }, y0));
            pool.push((HybridPoint { mode: r.tgt.clone(), x: after }, y1));
            links.push((i, i + 1));
        }
    }
    // Link any two pool points related by a reset (within tol).
    let n = pool.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = i;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    for (i, j) in links {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        parent[ri] = rj;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b2) = (&pool[i].0, &pool[j].0);
            if a.mode == b2.mode && euclid(&a.x, &b2.x) <= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut fiber_failures = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let same_image = p.vertex_image(&pool[i].0.mode) == p.vertex_image(&pool[j].0.mode)
                && euclid(&pool[i].1, &pool[j].1) <= tol;
            if same_image && find(&mut parent, i) != find(&mut parent, j) {
                fiber_failures += 1;
                if fiber_failures <= MAX_WITNESSES {
                    notes.push(format!(
                        "unlinked fiber points {} {:?} and {} {:?}",
                        pool[i].0.mode, pool[i].0.x, pool[j].0.mode, pool[j].0.x
                    ));
                }
            }
        }
    }
    let verdict = graph_ok
        && cov >= 1.0
        && inj == 0
        && fiber_failures == 0
        && rank_stats.iter().all(|s| s.failures == 0);
    ClassificationReport {
        verdict,
        kind: "subdivision_necessary",
        seed,
        samples,
        graph_ok,
        rank: rank_stats,
        injectivity_failures: inj,
        coverage: Some(cov),
        fiber_failures,
        notes,
    }
}

/// Build a semiconjugacy from string data; convenience for fixtures.
pub fn semiconjugacy_from_strings(
    dom: Arc<HybridSystem>,
    cod: Arc<HybridSystem>,
    vertices: &[(&str, &str)],
    edges: &[(&str, &str)],
    maps: &[(&str, &[&str])],
    inverses: &[(&str, &[&str])],
    params: Params,
) -> Result<Semiconjugacy, MorphismError> {
    let vmap: BTreeMap<VertexId, VertexId> = vertices.iter().map(|(a, b)| (VertexId::new(a), VertexId::new(b))).collect();
    let emap: BTreeMap<EdgeId, GenEdge> = edges
        .iter()
        .map(|(a, b)| {
            let t = if cod.graph().has_edge(&EdgeId::new(b)) {
                GenEdge::Edge(EdgeId::new(b))
            } else {
                GenEdge::Vertex(VertexId::new(b))
            };
            (EdgeId::new(a), t)
        })
        .collect();
    let g = GraphMorphism::new(dom.graph().clone(), cod.graph().clone(), vmap, emap)?;
    let mut mm = BTreeMap::new();
    for (v, comps) in maps {
        let d = dom.dim(&VertexId::new(v)).ok_or_else(|| MorphismError::Structure(format!("unknown vertex {v}")))?;
        let parsed = parse_vector(comps, d).map_err(|source| MorphismError::Expr { location: format!("map at {v}"), source })?;
        mm.insert(VertexId::new(v), parsed);
    }
    let mut im = BTreeMap::new();
    for (v, comps) in inverses {
        let w = g.map_vertex(&VertexId::new(v)).ok_or_else(|| MorphismError::Structure(format!("unknown vertex {v}")))?;
        let d = cod.dim(w).unwrap();
        let parsed =
            parse_vector(comps, d).map_err(|source| MorphismError::Expr { location: format!("inverse at {v}"), source })?;
        im.insert(VertexId::new(v), parsed);
    }
    Semiconjugacy::with_params(dom, cod, g, mm, im, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::ResetEdge;

    fn plane(field: [&str; 2]) -> Arc<HybridSystem> {
        let m = Mode::parse(2, &field, "true", "true").unwrap().with_bounds(vec![(-2.0, 2.0); 2]);
        Arc::new(HybridSystem::from_parts([(VertexId::new("v"), m)], [], Params::new()).unwrap())
    }

    #[test]
    fn identity_has_zero_residual() {
        let h = plane(["x1", "-x0"]);
        let id = Semiconjugacy::identity(h);
        let r = validate_semiconjugacy(&id, 100, 1e-12, 0);
        assert!(r.ok);
        assert_eq!(r.max_residual, 0.0);
    }

    #[test]
    fn rotation_conjugates_linear_center() {
        let h = plane(["x1", "-x0"]);
        let rot = semiconjugacy_from_strings(
            h.clone(),
            h.clone(),
            &[("v", "v")],
            &[],
            &[("v", &["0.6*x0-0.8*x1", "0.8*x0+0.6*x1"])],
            &[("v", &["0.6*x0+0.8*x1", "-0.8*x0+0.6*x1"])],
            Params::new(),
        )
        .unwrap();
        assert!(validate_semiconjugacy(&rot, 100, 1e-12, 0).ok);
        let shifted = semiconjugacy_from_strings(
            h.clone(),
            h.clone(),
            &[("v", "v")],
            &[],
            &[("v", &["x0+0.01", "x1"])],
            &[],
            Params::new(),
        )
        .unwrap();
        let r = validate_semiconjugacy(&shifted, 50, 1e-8, 0);
        assert!(!r.ok);
        let c = r.checks.iter().find(|c| c.check == "field_commutes").unwrap();
        // witness reproduces its residual: Y(x + d) - X(x) = (0, -0.01)
        for (_, res) in &c.witnesses {
            assert!((res - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_and_submersion_basics() {
        let h = plane(["0", "0"]);
        let line = Arc::new(
            HybridSystem::from_parts(
                [(VertexId::new("v"), Mode::parse(1, &["0"], "true", "true").unwrap().with_bounds(vec![(-2.0, 2.0)]))],
                [],
                Params::new(),
            )
            .unwrap(),
        );
        let constant =
            semiconjugacy_from_strings(h.clone(), h.clone(), &[("v", "v")], &[], &[("v", &["1", "2"])], &[], Params::new())
                .unwrap();
        assert!(!classify_embedding(&constant, 50, 1e-9, 0).verdict);
        let proj =
            semiconjugacy_from_strings(h.clone(), line.clone(), &[("v", "v")], &[], &[("v", &["x0"])], &[], Params::new())
                .unwrap();
        assert!(!classify_embedding(&proj, 50, 1e-9, 0).verdict);
        assert!(classify_submersion(&proj, 50, 1e-9, 0, true).verdict);
        let id = Semiconjugacy::identity(h.clone());
        assert!(classify_embedding(&id, 50, 1e-9, 0).verdict);
        assert!(classify_submersion(&id, 50, 1e-9, 0, true).verdict);
    }

    #[test]
    fn composition_and_json() {
        let h = plane(["x1", "-x0"]);
        let rot = semiconjugacy_from_strings(
            h.clone(),
            h.clone(),
            &[("v", "v")],
            &[],
            &[("v", &["-x1", "x0"])],
            &[("v", &["x1", "-x0"])],
            Params::new(),
        )
        .unwrap();
        let twice = compose_semiconjugacies(&rot, &rot).unwrap();
        let y = twice.apply(&HybridPoint::new("v", vec![1.0, 2.0])).unwrap();
        assert_eq!(y.x, vec![-1.0, -2.0]);
        assert!(validate_semiconjugacy(&twice, 50, 1e-12, 0).ok);
        let v = twice.to_value();
        let back = Semiconjugacy::from_value(&v, &|_| unreachable!()).unwrap();
        assert_eq!(back.maps(), twice.maps());
        assert_eq!(back.inverses(), twice.inverses());
    }

    #[test]
    fn edge_to_vertex_reads_reset_as_inclusion() {
        let m = Mode::parse(1, &["1"], "true", "x0 < 0").unwrap();
        let e = ResetEdge::parse("v", "v", 1, "x0 == 0", "-x0", &["x0"]).unwrap();
        let cut = Arc::new(
            HybridSystem::from_parts([(VertexId::new("v"), m)], [(EdgeId::new("e"), e)], Params::new()).unwrap(),
        );
        let line = Arc::new(
            HybridSystem::from_parts([(VertexId::new("w"), Mode::parse(1, &["1"], "true", "true").unwrap())], [], Params::new())
                .unwrap(),
        );
        let p = semiconjugacy_from_strings(cut, line, &[("v", "w")], &[("e", "w")], &[("v", &["x0"])], &[], Params::new())
            .unwrap();
        assert!(validate_semiconjugacy(&p, 50, 1e-12, 0).ok);
    }
}
