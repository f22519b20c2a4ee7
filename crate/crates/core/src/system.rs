//! Hybrid systems over Euclidean charts: data model, file format, sampled
//! validation, determinism and nonblocking checks, pruning, and pullback
//! along graph morphisms.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{simulate, SimConfig};
use crate::expr::{parse_expr, parse_predicate, parse_vector, Expr, ExprError, Params, Predicate, VectorExpr};
use crate::graph::{EdgeId, GenEdge, Graph, GraphError, GraphMorphism, VertexId};
use crate::morphism::{MorphismError, Semiconjugacy};
use crate::sample::{default_bounds, rng_for, sample_set, try_budget, SampleOutcome};

pub const FORMAT_TAG: &str = "hybridcat-v1";
pub const DEFAULT_EQ_TOL: f64 = 1e-9;
/// Witnesses kept per check in reports.
pub const MAX_WITNESSES: usize = 5;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{location}: {source}")]
    Expr { location: String, source: ExprError },
    #[error("{0}")]
    Structure(String),
    #[error("{location}: unbound parameter {name}")]
    UnboundParam { location: String, name: String },
    #[error("invalid system file: {0}")]
    Format(String),
    #[error("refusing to prune {0}: emptiness only sampled, not confirmed")]
    UnconfirmedEmpty(String),
    #[error("point is not in the active set of mode {0}")]
    NotActive(VertexId),
    #[error(transparent)]
    Morphism(#[from] Box<MorphismError>),
}

/// What is known about whether a set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Emptiness {
    #[default]
    Unknown,
    Declared,
    Sampled {
        confirmed: bool,
    },
}

impl Emptiness {
    fn prunable(self) -> Result<bool, ()> {
        match self {
            Emptiness::Unknown => Ok(false),
            Emptiness::Declared | Emptiness::Sampled { confirmed: true } => Ok(true),
            Emptiness::Sampled { confirmed: false } => Err(()),
        }
    }

    fn to_tag(self) -> Option<&'static str> {
        match self {
            Emptiness::Unknown => None,
            Emptiness::Declared => Some("declared"),
            Emptiness::Sampled { confirmed: false } => Some("sampled"),
            Emptiness::Sampled { confirmed: true } => Some("sampled-confirmed"),
        }
    }

    fn from_tag(tag: Option<&str>) -> Result<Self, SystemError> {
        Ok(match tag {
            None => Emptiness::Unknown,
            Some("declared") => Emptiness::Declared,
            Some("sampled") => Emptiness::Sampled { confirmed: false },
            Some("sampled-confirmed") => Emptiness::Sampled { confirmed: true },
            Some(other) => return Err(SystemError::Format(format!("unknown emptiness tag {other}"))),
        })
    }
}

/// A continuous mode: ambient `ℝ^dim`, vector field, active and flow sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub dim: usize,
    pub field: VectorExpr,
    pub active: Predicate,
    pub flow: Predicate,
    /// Sampling box; defaults to `[-10, 10]^dim`.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub empty: Emptiness,
}

impl Mode {
    pub fn new(dim: usize, field: VectorExpr, active: Predicate, flow: Predicate) -> Self {
        Mode { dim, field, active, flow, bounds: None, empty: Emptiness::Unknown }
    }

    /// Parse a mode from expression strings.
    pub fn parse(dim: usize, field: &[&str], active: &str, flow: &str) -> Result<Self, ExprError> {
        Ok(Mode::new(dim, parse_vector(field, dim)?, parse_predicate(active, dim)?, parse_predicate(flow, dim)?))
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn sampling_box(&self) -> Vec<(f64, f64)> {
        self.bounds.clone().unwrap_or_else(|| default_bounds(self.dim))
    }
}

/// A discrete transition with guard, event function and reset map.
#[derive(Clone, Debug, PartialEq)]
pub struct ResetEdge {
    pub src: VertexId,
    pub tgt: VertexId,
    pub guard: Predicate,
    /// Scalar function whose crossing of 0 from above triggers the guard.
    pub event: Expr,
    pub reset: VectorExpr,
    pub empty: Emptiness,
}

impl ResetEdge {
    pub fn new(src: VertexId, tgt: VertexId, guard: Predicate, event: Expr, reset: VectorExpr) -> Self {
        ResetEdge { src, tgt, guard, event, reset, empty: Emptiness::Unknown }
    }

    pub fn parse(
        src: &str,
        tgt: &str,
        src_dim: usize,
        guard: &str,
        event: &str,
        reset: &[&str],
    ) -> Result<Self, ExprError> {
        Ok(ResetEdge::new(
            VertexId::new(src),
            VertexId::new(tgt),
            parse_predicate(guard, src_dim)?,
            parse_expr(event, src_dim)?,
            parse_vector(reset, src_dim)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridPoint {
    pub mode: VertexId,
    pub x: Vec<f64>,
}

impl HybridPoint {
    pub fn new(mode: impl Into<VertexId>, x: Vec<f64>) -> Self {
        HybridPoint { mode: mode.into(), x }
    }
}

#[derive(Clone, Debug)]
pub struct HybridSystem {
    graph: Arc<Graph>,
    modes: BTreeMap<VertexId, Mode>,
    edges: BTreeMap<EdgeId, ResetEdge>,
    params: Params,
    eq_tol: f64,
    provenance: Option<serde_json::Value>,
}

impl PartialEq for HybridSystem {
    /// Structural equality of identifiers and expression trees; provenance is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.graph == other.graph
            && self.modes == other.modes
            && self.edges == other.edges
            && self.params == other.params
            && self.eq_tol == other.eq_tol
    }
}

fn expr_err(location: String) -> impl FnOnce(ExprError) -> SystemError {
    move |source| SystemError::Expr { location, source }
}

impl HybridSystem {
    pub fn new(
        modes: BTreeMap<VertexId, Mode>,
        edges: BTreeMap<EdgeId, ResetEdge>,
        params: Params,
    ) -> Result<Self, SystemError> {
        let graph = Graph::new(
            modes.keys().cloned(),
            edges.iter().map(|(e, r)| (e.clone(), r.src.clone(), r.tgt.clone())),
        )?;
        let sys = HybridSystem {
            graph: Arc::new(graph),
            modes,
            edges,
            params,
            eq_tol: DEFAULT_EQ_TOL,
            provenance: None,
        };
        sys.check_structure()?;
        Ok(sys)
    }

    pub fn from_parts(
        modes: impl IntoIterator<Item = (VertexId, Mode)>,
        edges: impl IntoIterator<Item = (EdgeId, ResetEdge)>,
        params: Params,
    ) -> Result<Self, SystemError> {
        HybridSystem::new(modes.into_iter().collect(), edges.into_iter().collect(), params)
    }

    fn check_structure(&self) -> Result<(), SystemError> {
        let check_params = |location: &str, names: std::collections::BTreeSet<String>| {
            for name in names {
                if !self.params.contains_key(&name) {
                    return Err(SystemError::UnboundParam { location: location.to_string(), name });
                }
            }
            Ok(())
        };
        let dim_ok = |location: &str, max_var: Option<usize>, dim: usize| match max_var {
            Some(i) if i >= dim => Err(SystemError::Expr {
                location: location.to_string(),
                source: ExprError::DimOverflow { index: i, dim },
            }),
            _ => Ok(()),
        };
        for (v, m) in &self.modes {
            let loc = format!("mode {v}");
            if m.field.dim_in != m.dim || m.field.dim_out() != m.dim {
                return Err(SystemError::Structure(format!(
                    "{loc}: field must have {} components over {} variables",
                    m.dim, m.dim
                )));
            }
            dim_ok(&loc, m.field.max_var(), m.dim)?;
            dim_ok(&loc, m.active.max_var(), m.dim)?;
            dim_ok(&loc, m.flow.max_var(), m.dim)?;
            if let Some(b) = &m.bounds {
                if b.len() != m.dim || b.iter().any(|(lo, hi)| !(lo <= hi)) {
                    return Err(SystemError::Structure(format!("{loc}: bad sampling bounds")));
                }
            }
            check_params(&loc, m.field.params())?;
            check_params(&loc, m.active.params())?;
            check_params(&loc, m.flow.params())?;
        }
        for (e, r) in &self.edges {
            let loc = format!("edge {e}");
            let ds = self.modes[&r.src].dim;
            let dt = self.modes[&r.tgt].dim;
            if r.reset.dim_in != ds || r.reset.dim_out() != dt {
                return Err(SystemError::Structure(format!(
                    "{loc}: reset must map dimension {ds} to {dt}, got {} -> {}",
                    r.reset.dim_in,
                    r.reset.dim_out()
                )));
            }
            dim_ok(&loc, r.reset.max_var(), ds)?;
            dim_ok(&loc, r.guard.max_var(), ds)?;
            dim_ok(&loc, r.event.max_var(), ds)?;
            check_params(&loc, r.guard.params())?;
            check_params(&loc, r.event.params())?;
            check_params(&loc, r.reset.params())?;
        }
        Ok(())
    }

    /// The empty system.
    pub fn empty() -> Self {
        HybridSystem::new(BTreeMap::new(), BTreeMap::new(), Params::new()).unwrap()
    }

    /// The terminal system: one point that flows forever.
    pub fn terminal() -> Self {
        let mode = Mode::new(0, VectorExpr::zero(0, 0), Predicate::True, Predicate::True);
        HybridSystem::from_parts([(VertexId::new("*"), mode)], [], Params::new()).unwrap()
    }

    /// One point with empty flow set; semiconjugacies out of it are the points of `I(H)`.
    pub fn representing_point() -> Self {
        let mode = Mode::new(0, VectorExpr::zero(0, 0), Predicate::True, Predicate::False);
        HybridSystem::from_parts([(VertexId::new("*"), mode)], [], Params::new()).unwrap()
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn modes(&self) -> &BTreeMap<VertexId, Mode> {
        &self.modes
    }

    pub fn edges(&self) -> &BTreeMap<EdgeId, ResetEdge> {
        &self.edges
    }

    pub fn mode(&self, v: &VertexId) -> Option<&Mode> {
        self.modes.get(v)
    }

    pub fn edge(&self, e: &EdgeId) -> Option<&ResetEdge> {
        self.edges.get(e)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn eq_tol(&self) -> f64 {
        self.eq_tol
    }

    pub fn with_eq_tol(mut self, tol: f64) -> Self {
        self.eq_tol = tol;
        self
    }

    pub fn provenance(&self) -> Option<&serde_json::Value> {
        self.provenance.as_ref()
    }

    pub fn with_provenance(mut self, p: serde_json::Value) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn out_edges<'a>(&'a self, v: &'a VertexId) -> impl Iterator<Item = (&'a EdgeId, &'a ResetEdge)> + 'a {
        self.edges.iter().filter(move |(_, r)| &r.src == v)
    }

    pub fn dim(&self, v: &VertexId) -> Option<usize> {
        self.modes.get(v).map(|m| m.dim)
    }

    /// Copy with every parameter substituted by its value.
    pub fn bound(&self) -> HybridSystem {
        let p = &self.params;
        let modes = self
            .modes
            .iter()
            .map(|(v, m)| {
                let mut m = m.clone();
                m.field = m.field.bind(p);
                m.active = m.active.bind(p);
                m.flow = m.flow.bind(p);
                (v.clone(), m)
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|(e, r)| {
                let mut r = r.clone();
                r.guard = r.guard.bind(p);
                r.event = r.event.bind(p);
                r.reset = r.reset.bind(p);
                (e.clone(), r)
            })
            .collect();
        HybridSystem {
            graph: self.graph.clone(),
            modes,
            edges,
            params: self.params.clone(),
            eq_tol: self.eq_tol,
            provenance: self.provenance.clone(),
        }
    }

    /// Replace mode/edge data wholesale; the graph is rebuilt and rechecked.
    pub fn rebuild(
        &self,
        modes: BTreeMap<VertexId, Mode>,
        edges: BTreeMap<EdgeId, ResetEdge>,
    ) -> Result<HybridSystem, SystemError> {
        let mut out = HybridSystem::new(modes, edges, self.params.clone())?;
        out.eq_tol = self.eq_tol;
        Ok(out)
    }

    pub fn with_params(&self, params: Params) -> Result<HybridSystem, SystemError> {
        let mut out = self.clone();
        out.params = params;
        out.check_structure()?;
        Ok(out)
    }

    pub fn point(&self, mode: impl Into<VertexId>, x: Vec<f64>) -> Result<HybridPoint, SystemError> {
        let mode = mode.into();
        let m = self.modes.get(&mode).ok_or_else(|| SystemError::Structure(format!("unknown mode {mode}")))?;
        if x.len() != m.dim {
            return Err(SystemError::Structure(format!("mode {mode} has dimension {}, got {}", m.dim, x.len())));
        }
        if !m.active.holds_within(&x, &self.params, self.eq_tol) {
            return Err(SystemError::NotActive(mode));
        }
        Ok(HybridPoint { mode, x })
    }

    /// Extended metric: Euclidean within a mode, infinite across modes.
    pub fn distance(&self, a: &HybridPoint, b: &HybridPoint) -> f64 {
        if a.mode != b.mode || a.x.len() != b.x.len() {
            return f64::INFINITY;
        }
        euclid(&a.x, &b.x)
    }

    pub fn in_active(&self, v: &VertexId, x: &[f64]) -> bool {
        self.modes[v].active.contains(x, &self.params, self.eq_tol)
    }

    pub fn in_flow(&self, v: &VertexId, x: &[f64]) -> bool {
        self.modes[v].flow.contains(x, &self.params, self.eq_tol)
    }

    pub fn in_guard(&self, e: &EdgeId, x: &[f64]) -> bool {
        self.edges[e].guard.contains(x, &self.params, self.eq_tol)
    }

    /// Sample a predicate over the ambient space of `v`.
    pub fn sample(&self, v: &VertexId, pred: &Predicate, n: usize, seed: u64, tag: &str) -> SampleOutcome {
        let m = &self.modes[v];
        let mut rng = rng_for(seed, &format!("{tag}/{v}"));
        sample_set(pred, m.dim, &m.sampling_box(), &self.params, self.eq_tol, n, try_budget(n), &mut rng)
    }

    // ---------------------------------------------------------------- io

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("system serializes");
        s.push('\n');
        s
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self.to_file()).expect("system serializes")
    }

    fn to_file(&self) -> SystemFile {
        SystemFile {
            format: Some(FORMAT_TAG.to_string()),
            params: self.params.clone(),
            eq_tol: Some(self.eq_tol),
            vertices: self
                .modes
                .iter()
                .map(|(v, m)| VertexFile {
                    id: v.to_string(),
                    dim: m.dim,
                    field: m.field.to_strings(),
                    active: m.active.to_string(),
                    flow: m.flow.to_string(),
                    bounds: m.bounds.as_ref().map(|b| b.iter().map(|&(lo, hi)| [lo, hi]).collect()),
                    empty: m.empty.to_tag().map(str::to_string),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|(e, r)| EdgeFile {
                    id: e.to_string(),
                    src: r.src.to_string(),
                    tgt: r.tgt.to_string(),
                    guard: r.guard.to_string(),
                    event: r.event.to_string(),
                    reset: r.reset.to_strings(),
                    empty: r.empty.to_tag().map(str::to_string),
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SystemError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SystemError::Format(e.to_string()))?;
        HybridSystem::from_value(&value)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self, SystemError> {
        let file: SystemFile =
            serde_json::from_value(value.clone()).map_err(|e| SystemError::Format(e.to_string()))?;
        if let Some(tag) = &file.format {
            if tag != FORMAT_TAG {
                return Err(SystemError::Format(format!("unsupported format {tag}")));
            }
        }
        let mut modes = BTreeMap::new();
        for v in &file.vertices {
            let loc = format!("mode {}", v.id);
            let field = parse_vector(&v.field, v.dim).map_err(expr_err(loc.clone()))?;
            let active = parse_predicate(&v.active, v.dim).map_err(expr_err(loc.clone()))?;
            let flow = parse_predicate(&v.flow, v.dim).map_err(expr_err(loc.clone()))?;
            let mut mode = Mode::new(v.dim, field, active, flow);
            mode.bounds = v.bounds.as_ref().map(|b| b.iter().map(|p| (p[0], p[1])).collect());
            mode.empty = Emptiness::from_tag(v.empty.as_deref())?;
            if modes.insert(VertexId::new(&v.id), mode).is_some() {
                return Err(SystemError::Graph(GraphError::Duplicate(v.id.clone())));
            }
        }
        let mut edges = BTreeMap::new();
        for e in &file.edges {
            let loc = format!("edge {}", e.id);
            let src_dim = modes
                .get(&VertexId::new(&e.src))
                .map(|m: &Mode| m.dim)
                .ok_or_else(|| SystemError::Structure(format!("{loc}: unknown source {}", e.src)))?;
            if !modes.contains_key(&VertexId::new(&e.tgt)) {
                return Err(SystemError::Structure(format!("{loc}: unknown target {}", e.tgt)));
            }
            let mut r = ResetEdge::new(
                VertexId::new(&e.src),
                VertexId::new(&e.tgt),
                parse_predicate(&e.guard, src_dim).map_err(expr_err(loc.clone()))?,
                parse_expr(&e.event, src_dim).map_err(expr_err(loc.clone()))?,
                parse_vector(&e.reset, src_dim).map_err(expr_err(loc.clone()))?,
            );
            r.empty = Emptiness::from_tag(e.empty.as_deref())?;
            if edges.insert(EdgeId::new(&e.id), r).is_some() {
                return Err(SystemError::Graph(GraphError::Duplicate(e.id.clone())));
            }
        }
        let mut sys = HybridSystem::new(modes, edges, file.params)?;
        if let Some(t) = file.eq_tol {
            if !(t >= 0.0) {
                return Err(SystemError::Format("eq_tol must be non-negative".into()));
            }
            sys.eq_tol = t;
        }
        sys.provenance = file.provenance;
        Ok(sys)
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eq_tol: Option<f64>,
    vertices: Vec<VertexFile>,
    #[serde(default)]
    edges: Vec<EdgeFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VertexFile {
    id: String,
    dim: usize,
    field: Vec<String>,
    active: String,
    flow: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    empty: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeFile {
    id: String,
    src: String,
    tgt: String,
    guard: String,
    event: String,
    reset: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    empty: Option<String>,
}

// -------------------------------------------------------------------- checks

#[derive(Clone, Debug, Serialize)]
pub struct SetCheck {
    pub check: String,
    pub location: String,
    pub tested: usize,
    pub violations: usize,
    pub starved: bool,
    pub witnesses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub seed: u64,
    pub samples: usize,
    pub checks: Vec<SetCheck>,
    /// Sets in which sampling found no point (candidates for pruning).
    pub suspected_empty: Vec<String>,
}

impl ValidationReport {
    pub fn violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }
}

fn containment_check(
    check: &str,
    location: String,
    points: &SampleOutcome,
    mut member: impl FnMut(&[f64]) -> bool,
) -> SetCheck {
    let mut c = SetCheck {
        check: check.to_string(),
        location,
        tested: points.points.len(),
        violations: 0,
        starved: points.starved(),
        witnesses: Vec::new(),
    };
    for p in &points.points {
        if !member(p) {
            c.violations += 1;
            if c.witnesses.len() < MAX_WITNESSES {
                c.witnesses.push(p.clone());
            }
        }
    }
    c
}

/// Sampled check of `F ⊆ I`, `Z ⊆ I_src` and `r(Z) ⊆ I_tgt`.
pub fn validate_system(h: &HybridSystem, samples: usize, seed: u64) -> ValidationReport {
    let b = h.bound();
    let p = &b.params;
    let tol = b.eq_tol;
    let mut checks = Vec::new();
    let mut suspected_empty = Vec::new();
    for (v, m) in &b.modes {
        if m.empty.prunable() == Ok(true) {
            continue;
        }
        let active = b.sample(v, &m.active, samples, seed, "validate/active");
        if active.starved() {
            suspected_empty.push(format!("mode {v}"));
        }
        let flow = b.sample(v, &m.flow, samples, seed, "validate/flow");
        checks.push(containment_check("flow_in_active", format!("mode {v}"), &flow, |x| {
            m.active.contains(x, p, tol)
        }));
    }
    for (e, r) in &b.edges {
        if r.empty.prunable() == Ok(true) {
            continue;
        }
        let src = &b.modes[&r.src];
        let tgt = &b.modes[&r.tgt];
        let guard = b.sample(&r.src, &r.guard, samples, seed, &format!("validate/guard/{e}"));
        if guard.starved() {
            suspected_empty.push(format!("guard {e}"));
        }
        checks.push(containment_check("guard_in_active", format!("edge {e}"), &guard, |x| {
            src.active.contains(x, p, tol)
        }));
        checks.push(containment_check("reset_into_active", format!("edge {e}"), &guard, |x| {
            match r.reset.eval(x, p) {
                Ok(y) => tgt.active.contains(&y, p, tol),
                Err(_) => false,
            }
        }));
    }
    let ok = checks.iter().all(|c| c.violations == 0);
    ValidationReport { ok, seed, samples, checks, suspected_empty }
}

#[derive(Clone, Debug, Serialize)]
pub struct DeterminismWitness {
    pub mode: VertexId,
    pub point: Vec<f64>,
    /// Names of the overlapping sets: "flow" or edge ids.
    pub sets: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeterminismReport {
    pub ok: bool,
    pub seed: u64,
    pub samples: usize,
    pub tested: usize,
    pub violations: usize,
    pub witnesses: Vec<DeterminismWitness>,
    pub note: &'static str,
}

/// Sampled check that the flow set and the guards leaving each mode are
/// pairwise disjoint. Samples are drawn from the active set and from every
/// flow set and guard, since guards are usually thin.
pub fn check_determinism(h: &HybridSystem, samples: usize, seed: u64) -> DeterminismReport {
    let b = h.bound();
    let p = &b.params;
    let tol = b.eq_tol;
    let mut tested = 0;
    let mut violations = 0;
    let mut witnesses = Vec::new();
    for (v, m) in &b.modes {
        if m.empty.prunable() == Ok(true) {
            continue;
        }
        let guards: Vec<(&EdgeId, &ResetEdge)> =
            b.out_edges(v).filter(|(_, r)| r.empty.prunable() != Ok(true)).collect();
        let mut pool = b.sample(v, &m.active, samples, seed, "determinism/active").points;
        pool.extend(b.sample(v, &m.flow, samples, seed, "determinism/flow").points);
        for (e, r) in &guards {
            pool.extend(b.sample(v, &r.guard, samples, seed, &format!("determinism/guard/{e}")).points);
        }
        for x in pool {
            tested += 1;
            let mut sets = Vec::new();
            if m.flow.contains(&x, p, tol) {
                sets.push("flow".to_string());
            }
            for (e, r) in &guards {
                if r.guard.contains(&x, p, tol) {
                    sets.push(e.to_string());
                }
            }
            if sets.len() > 1 {
                violations += 1;
                if witnesses.len() < MAX_WITNESSES * 4 {
                    witnesses.push(DeterminismWitness { mode: v.clone(), point: x, sets });
                }
            }
        }
    }
    DeterminismReport {
        ok: violations == 0,
        seed,
        samples,
        tested,
        violations,
        witnesses,
        note: "uniqueness of integral curves is assumed from smoothness of the field expressions",
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockedStart {
    pub start: HybridPoint,
    pub stop_time: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct NonblockingReport {
    pub ok: bool,
    pub seed: u64,
    pub horizon: f64,
    pub tested: usize,
    pub reached_horizon: usize,
    pub zeno: usize,
    pub blocked: Vec<BlockedStart>,
}

/// Simulate sampled starts from every active set and report executions that
/// stop before `horizon` for a reason other than Zeno accumulation.
pub fn check_nonblocking(
    h: &HybridSystem,
    samples: usize,
    horizon: f64,
    seed: u64,
    cfg: &SimConfig,
) -> NonblockingReport {
    let b = h.bound();
    let mut starts = Vec::new();
    for (v, m) in &b.modes {
        if m.empty.prunable() == Ok(true) {
            continue;
        }
        for x in b.sample(v, &m.active, samples, seed, "nonblocking").points {
            starts.push(HybridPoint { mode: v.clone(), x });
        }
    }
    check_nonblocking_from(&b, &starts, horizon, seed, cfg)
}

/// Nonblocking check from explicit starting points.
pub fn check_nonblocking_from(
    h: &HybridSystem,
    starts: &[HybridPoint],
    horizon: f64,
    seed: u64,
    cfg: &SimConfig,
) -> NonblockingReport {
    let b = h.bound();
    let cfg = SimConfig { horizon, ..cfg.clone() };
    let outcomes: Vec<Result<crate::exec::ExecutionTrace, String>> = starts
        .par_iter()
        .map(|s| simulate(&b, s, &cfg).map_err(|e| e.to_string()))
        .collect();
    let mut report = NonblockingReport {
        ok: true,
        seed,
        horizon,
        tested: starts.len(),
        reached_horizon: 0,
        zeno: 0,
        blocked: Vec::new(),
    };
    for (s, o) in starts.iter().zip(outcomes) {
        match o {
            Ok(t) if t.classification.horizon_truncated => report.reached_horizon += 1,
            Ok(t) if t.classification.zeno_detected => report.zeno += 1,
            Ok(t) => report.blocked.push(BlockedStart {
                start: s.clone(),
                stop_time: t.stop_time(),
                reason: "no flow and no enabled guard".into(),
            }),
            Err(msg) => report.blocked.push(BlockedStart { start: s.clone(), stop_time: f64::NAN, reason: msg }),
        }
    }
    report.ok = report.blocked.is_empty();
    report
}

// ------------------------------------------------------------------ pruning

/// Remove modes and guards flagged empty (declared, or sampled and confirmed),
/// together with edges touching removed modes.
pub fn prune(h: &HybridSystem) -> Result<HybridSystem, SystemError> {
    let mut modes = BTreeMap::new();
    for (v, m) in &h.modes {
        match m.empty.prunable() {
            Ok(true) => {}
            Ok(false) => {
                modes.insert(v.clone(), m.clone());
            }
            Err(()) => return Err(SystemError::UnconfirmedEmpty(format!("mode {v}"))),
        }
    }
    let mut edges = BTreeMap::new();
    for (e, r) in &h.edges {
        match r.empty.prunable() {
            Ok(true) => {}
            Ok(false) => {
                if modes.contains_key(&r.src) && modes.contains_key(&r.tgt) {
                    edges.insert(e.clone(), r.clone());
                }
            }
            Err(()) => return Err(SystemError::UnconfirmedEmpty(format!("edge {e}"))),
        }
    }
    let mut out = h.rebuild(modes, edges)?;
    out.provenance = h.provenance.clone();
    Ok(out)
}

/// Flag modes and guards whose sets yielded no samples as sampled-empty
/// (unconfirmed). Confirm with [`confirm_sampled_empty`] before pruning.
pub fn flag_sampled_empty(h: &HybridSystem, samples: usize, seed: u64) -> HybridSystem {
    let b = h.bound();
    let mut out = h.clone();
    for (v, m) in out.modes.iter_mut() {
        if m.empty == Emptiness::Unknown && b.sample(v, &b.modes[v].active, samples, seed, "prune").starved() {
            m.empty = Emptiness::Sampled { confirmed: false };
        }
    }
    for (e, r) in out.edges.iter_mut() {
        let br = &b.edges[e];
        if r.empty == Emptiness::Unknown && b.sample(&br.src, &br.guard, samples, seed, "prune").starved() {
            r.empty = Emptiness::Sampled { confirmed: false };
        }
    }
    out
}

pub fn confirm_sampled_empty(h: &HybridSystem) -> HybridSystem {
    let mut out = h.clone();
    for m in out.modes.values_mut() {
        if m.empty == (Emptiness::Sampled { confirmed: false }) {
            m.empty = Emptiness::Sampled { confirmed: true };
        }
    }
    for r in out.edges.values_mut() {
        if r.empty == (Emptiness::Sampled { confirmed: false }) {
            r.empty = Emptiness::Sampled { confirmed: true };
        }
    }
    out
}

pub fn declare_empty_mode(h: &HybridSystem, v: &VertexId) -> HybridSystem {
    let mut out = h.clone();
    if let Some(m) = out.modes.get_mut(v) {
        m.empty = Emptiness::Declared;
    }
    out
}

pub fn declare_empty_edge(h: &HybridSystem, e: &EdgeId) -> HybridSystem {
    let mut out = h.clone();
    if let Some(r) = out.edges.get_mut(e) {
        r.empty = Emptiness::Declared;
    }
    out
}

// ---------------------------------------------------------------- pullback

/// Pull the dynamics of `h` back along a graph morphism into `G(h)`.
///
/// Vertices copy the data of their images. An edge sent to a vertex `w`
/// gets guard `F_w`, identity reset and the constant event `0` (it is never
/// armed by a crossing). The returned semiconjugacy is identity on points.
pub fn pullback_along_graph_morphism(
    h: &Arc<HybridSystem>,
    phi: &GraphMorphism,
) -> Result<(Arc<HybridSystem>, Semiconjugacy), SystemError> {
    if **phi.cod() != **h.graph() {
        return Err(SystemError::Graph(GraphError::Mismatch));
    }
    let dom = phi.dom();
    let mut modes = BTreeMap::new();
    for v in dom.vertices() {
        let mut m = h.modes[phi.map_vertex(v).unwrap()].clone();
        m.empty = Emptiness::Unknown;
        modes.insert(v.clone(), m);
    }
    let mut edges = BTreeMap::new();
    for (e, s, t) in dom.edges() {
        let r = match phi.map_edge(e).unwrap() {
            GenEdge::Edge(x) => {
                let mut r = h.edges[x].clone();
                r.src = s.clone();
                r.tgt = t.clone();
                r.empty = Emptiness::Unknown;
                r
            }
            GenEdge::Vertex(w) => {
                let m = &h.modes[w];
                ResetEdge::new(s.clone(), t.clone(), m.flow.clone(), Expr::Num(0.0), VectorExpr::identity(m.dim))
            }
        };
        edges.insert(e.clone(), r);
    }
    let k = Arc::new(h.rebuild(modes, edges)?);
    let maps = dom.vertices().map(|v| (v.clone(), VectorExpr::identity(k.modes[v].dim))).collect::<BTreeMap<_, _>>();
    let graph_map = phi.with_codomain(h.graph().clone())?.with_domain(k.graph().clone())?;
    let lift = Semiconjugacy::new(k.clone(), h.clone(), graph_map, maps.clone(), maps)
        .map_err(|e| SystemError::Morphism(Box::new(e)))?;
    Ok((k, lift))
}
