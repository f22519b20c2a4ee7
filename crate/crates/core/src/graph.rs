//! Directed graphs whose morphisms may collapse edges onto vertices.
//!
//! Every vertex acts as an implicit self-loop ("generalized edge"), so a
//! morphism sends each edge either to an edge or to a vertex of the target.
//! Limits and colimits needed by the hybrid constructions live here:
//! the reflexive-style product `G ⊠ H`, coproducts, pushouts along monic
//! legs and fiber products.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(s: impl AsRef<str>) -> Self {
                $name(Arc::from(s.as_ref()))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", &*self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name::new(s)
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name::new(s)
            }
        }
    };
}

id_type!(VertexId);
id_type!(EdgeId);

/// A vertex or an edge; vertices double as identity edges.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum GenEdge {
    Vertex(VertexId),
    Edge(EdgeId),
}

impl GenEdge {
    pub fn name(&self) -> &str {
        match self {
            GenEdge::Vertex(v) => v.as_str(),
            GenEdge::Edge(e) => e.as_str(),
        }
    }

    pub fn is_vertex(&self) -> bool {
        matches!(self, GenEdge::Vertex(_))
    }
}

impl fmt::Display for GenEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge {edge} has unknown endpoint {vertex}")]
    UnknownEndpoint { edge: EdgeId, vertex: VertexId },
    #[error("identifier {0} is used for both a vertex and an edge")]
    NamespaceClash(String),
    #[error("duplicate identifier {0}")]
    Duplicate(String),
    #[error("morphism is missing an image for {0}")]
    MissingImage(String),
    #[error("image {image} of {element} is not in the codomain")]
    UnknownImage { element: String, image: String },
    #[error("morphism breaks incidence at edge {0}")]
    Incidence(EdgeId),
    #[error("codomain of the first morphism does not match the domain of the second")]
    Mismatch,
    #[error("pushout requires monic legs")]
    NotMonic,
}

/// A finite directed graph. Vertex self-maps `s(v) = t(v) = v` are implicit.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Graph {
    vertices: BTreeSet<VertexId>,
    edges: BTreeMap<EdgeId, (VertexId, VertexId)>,
}

impl Graph {
    pub fn new<V, E>(vertices: V, edges: E) -> Result<Self, GraphError>
    where
        V: IntoIterator<Item = VertexId>,
        E: IntoIterator<Item = (EdgeId, VertexId, VertexId)>,
    {
        let mut g = Graph::default();
        for v in vertices {
            if !g.vertices.insert(v.clone()) {
                return Err(GraphError::Duplicate(v.to_string()));
            }
        }
        for (e, s, t) in edges {
            for endpoint in [&s, &t] {
                if !g.vertices.contains(endpoint) {
                    return Err(GraphError::UnknownEndpoint { edge: e.clone(), vertex: endpoint.clone() });
                }
            }
            if g.vertices.contains(&VertexId::new(e.as_str())) {
                return Err(GraphError::NamespaceClash(e.to_string()));
            }
            if g.edges.insert(e.clone(), (s, t)).is_some() {
                return Err(GraphError::Duplicate(e.to_string()));
            }
        }
        Ok(g)
    }

    /// Convenience constructor from string names.
    pub fn from_names(vertices: &[&str], edges: &[(&str, &str, &str)]) -> Result<Self, GraphError> {
        Graph::new(
            vertices.iter().map(|v| VertexId::new(v)),
            edges.iter().map(|(e, s, t)| (EdgeId::new(e), VertexId::new(s), VertexId::new(t))),
        )
    }

    pub fn empty() -> Self {
        Graph::default()
    }

    pub fn vertices(&self) -> impl Iterator<Item = &VertexId> + '_ {
        self.vertices.iter()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&EdgeId, &VertexId, &VertexId)> + '_ {
        self.edges.iter().map(|(e, (s, t))| (e, s, t))
    }

    pub fn edge_ids(&self) -> impl Iterator<Item = &EdgeId> + '_ {
        self.edges.keys()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_vertex(&self, v: &VertexId) -> bool {
        self.vertices.contains(v)
    }

    pub fn has_edge(&self, e: &EdgeId) -> bool {
        self.edges.contains_key(e)
    }

    pub fn contains(&self, p: &GenEdge) -> bool {
        match p {
            GenEdge::Vertex(v) => self.has_vertex(v),
            GenEdge::Edge(e) => self.has_edge(e),
        }
    }

    pub fn endpoints(&self, e: &EdgeId) -> Option<(&VertexId, &VertexId)> {
        self.edges.get(e).map(|(s, t)| (s, t))
    }

    pub fn src(&self, p: &GenEdge) -> Option<VertexId> {
        match p {
            GenEdge::Vertex(v) => self.has_vertex(v).then(|| v.clone()),
            GenEdge::Edge(e) => self.edges.get(e).map(|(s, _)| s.clone()),
        }
    }

    pub fn tgt(&self, p: &GenEdge) -> Option<VertexId> {
        match p {
            GenEdge::Vertex(v) => self.has_vertex(v).then(|| v.clone()),
            GenEdge::Edge(e) => self.edges.get(e).map(|(_, t)| t.clone()),
        }
    }

    /// Edges first, then vertices, each in id order.
    pub fn generalized_edges(&self) -> Vec<GenEdge> {
        self.edges
            .keys()
            .cloned()
            .map(GenEdge::Edge)
            .chain(self.vertices.iter().cloned().map(GenEdge::Vertex))
            .collect()
    }

    pub fn out_edges<'a>(&'a self, v: &'a VertexId) -> impl Iterator<Item = &'a EdgeId> + 'a {
        self.edges.iter().filter(move |(_, (s, _))| s == v).map(|(e, _)| e)
    }

    pub fn in_edges<'a>(&'a self, v: &'a VertexId) -> impl Iterator<Item = &'a EdgeId> + 'a {
        self.edges.iter().filter(move |(_, (_, t))| t == v).map(|(e, _)| e)
    }

    fn names(&self) -> BTreeSet<String> {
        self.vertices
            .iter()
            .map(|v| v.to_string())
            .chain(self.edges.keys().map(|e| e.to_string()))
            .collect()
    }

    /// Full subgraph on the given vertices, keeping edges between them.
    pub fn induced(&self, keep: &BTreeSet<VertexId>) -> Graph {
        Graph {
            vertices: self.vertices.intersection(keep).cloned().collect(),
            edges: self
                .edges
                .iter()
                .filter(|(_, (s, t))| keep.contains(s) && keep.contains(t))
                .map(|(e, st)| (e.clone(), st.clone()))
                .collect(),
        }
    }
}

/// A pair of maps `(f_V, f_E)` where edges may land on vertices.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GraphMorphism {
    dom: Arc<Graph>,
    cod: Arc<Graph>,
    vmap: BTreeMap<VertexId, VertexId>,
    emap: BTreeMap<EdgeId, GenEdge>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MorphismClass {
    pub monic: bool,
    pub epic: bool,
}

impl GraphMorphism {
    pub fn new(
        dom: Arc<Graph>,
        cod: Arc<Graph>,
        vmap: BTreeMap<VertexId, VertexId>,
        emap: BTreeMap<EdgeId, GenEdge>,
    ) -> Result<Self, GraphError> {
        for v in dom.vertices() {
            let w = vmap.get(v).ok_or_else(|| GraphError::MissingImage(v.to_string()))?;
            if !cod.has_vertex(w) {
                return Err(GraphError::UnknownImage { element: v.to_string(), image: w.to_string() });
            }
        }
        for (e, s, t) in dom.edges() {
            let p = emap.get(e).ok_or_else(|| GraphError::MissingImage(e.to_string()))?;
            if !cod.contains(p) {
                return Err(GraphError::UnknownImage { element: e.to_string(), image: p.to_string() });
            }
            if cod.src(p).as_ref() != vmap.get(s) || cod.tgt(p).as_ref() != vmap.get(t) {
                return Err(GraphError::Incidence(e.clone()));
            }
        }
        if vmap.len() != dom.vertex_count() || emap.len() != dom.edge_count() {
            return Err(GraphError::UnknownImage { element: "<extra>".into(), image: "<unmapped>".into() });
        }
        Ok(GraphMorphism { dom, cod, vmap, emap })
    }

    pub fn identity(g: Arc<Graph>) -> Self {
        let vmap = g.vertices().map(|v| (v.clone(), v.clone())).collect();
        let emap = g.edge_ids().map(|e| (e.clone(), GenEdge::Edge(e.clone()))).collect();
        GraphMorphism { dom: g.clone(), cod: g, vmap, emap }
    }

    pub fn dom(&self) -> &Arc<Graph> {
        &self.dom
    }

    pub fn cod(&self) -> &Arc<Graph> {
        &self.cod
    }

    pub fn vertex_map(&self) -> &BTreeMap<VertexId, VertexId> {
        &self.vmap
    }

    pub fn edge_map(&self) -> &BTreeMap<EdgeId, GenEdge> {
        &self.emap
    }

    pub fn map_vertex(&self, v: &VertexId) -> Option<&VertexId> {
        self.vmap.get(v)
    }

    pub fn map_edge(&self, e: &EdgeId) -> Option<&GenEdge> {
        self.emap.get(e)
    }

    pub fn map_gen(&self, p: &GenEdge) -> Option<GenEdge> {
        match p {
            GenEdge::Vertex(v) => self.vmap.get(v).cloned().map(GenEdge::Vertex),
            GenEdge::Edge(e) => self.emap.get(e).cloned(),
        }
    }

    /// `g ∘ self`.
    pub fn then(&self, g: &GraphMorphism) -> Result<GraphMorphism, GraphError> {
        compose_graph_morphisms(g, self)
    }

    pub fn classify(&self) -> MorphismClass {
        classify_morphism(self)
    }

    /// Restriction of the codomain to a supergraph (or any graph containing the image).
    pub fn with_codomain(&self, cod: Arc<Graph>) -> Result<GraphMorphism, GraphError> {
        GraphMorphism::new(self.dom.clone(), cod, self.vmap.clone(), self.emap.clone())
    }

    /// Same maps, domain replaced by a structurally equal graph.
    pub fn with_domain(&self, dom: Arc<Graph>) -> Result<GraphMorphism, GraphError> {
        if *dom != *self.dom {
            return Err(GraphError::Mismatch);
        }
        Ok(GraphMorphism { dom, cod: self.cod.clone(), vmap: self.vmap.clone(), emap: self.emap.clone() })
    }

    pub fn image_vertices(&self) -> BTreeSet<VertexId> {
        self.vmap.values().cloned().collect()
    }
}

/// `g ∘ f`; edges sent to vertices by `f` continue through `g_V`.
pub fn compose_graph_morphisms(g: &GraphMorphism, f: &GraphMorphism) -> Result<GraphMorphism, GraphError> {
    if f.cod != g.dom && *f.cod != *g.dom {
        return Err(GraphError::Mismatch);
    }
    let vmap = f
        .vmap
        .iter()
        .map(|(v, w)| (v.clone(), g.vmap[w].clone()))
        .collect();
    let emap = f
        .emap
        .iter()
        .map(|(e, p)| {
            let image = match p {
                GenEdge::Edge(x) => g.emap[x].clone(),
                GenEdge::Vertex(w) => GenEdge::Vertex(g.vmap[w].clone()),
            };
            (e.clone(), image)
        })
        .collect();
    Ok(GraphMorphism { dom: f.dom.clone(), cod: g.cod.clone(), vmap, emap })
}

/// Monic iff both maps are injective and no edge collapses to a vertex;
/// epic iff `f_V` is onto and every target edge is hit.
pub fn classify_morphism(f: &GraphMorphism) -> MorphismClass {
    let vimg: BTreeSet<&VertexId> = f.vmap.values().collect();
    let v_injective = vimg.len() == f.vmap.len();
    let mut eimg = BTreeSet::new();
    let mut e_injective = true;
    let mut edges_to_edges = true;
    for p in f.emap.values() {
        match p {
            GenEdge::Edge(x) => {
                if !eimg.insert(x) {
                    e_injective = false;
                }
            }
            GenEdge::Vertex(_) => edges_to_edges = false,
        }
    }
    let monic = v_injective && e_injective && edges_to_edges;
    let epic = vimg.len() == f.cod.vertex_count() && f.cod.edge_ids().all(|e| eimg.contains(e));
    MorphismClass { monic, epic }
}

fn pair_name(a: &str, b: &str) -> String {
    format!("({a},{b})")
}

/// The product `G ⊠ H` with both projections.
pub fn graph_product(g: &Arc<Graph>, h: &Arc<Graph>) -> (Arc<Graph>, GraphMorphism, GraphMorphism) {
    let mut vertices = Vec::new();
    let mut p1v = BTreeMap::new();
    let mut p2v = BTreeMap::new();
    for v in g.vertices() {
        for w in h.vertices() {
            let id = VertexId::new(pair_name(v.as_str(), w.as_str()));
            p1v.insert(id.clone(), v.clone());
            p2v.insert(id.clone(), w.clone());
            vertices.push(id);
        }
    }
    let mut edges = Vec::new();
    let mut p1e = BTreeMap::new();
    let mut p2e = BTreeMap::new();
    for p in g.generalized_edges() {
        for q in h.generalized_edges() {
            if p.is_vertex() && q.is_vertex() {
                continue;
            }
            let id = EdgeId::new(pair_name(p.name(), q.name()));
            let s = VertexId::new(pair_name(g.src(&p).unwrap().as_str(), h.src(&q).unwrap().as_str()));
            let t = VertexId::new(pair_name(g.tgt(&p).unwrap().as_str(), h.tgt(&q).unwrap().as_str()));
            p1e.insert(id.clone(), p.clone());
            p2e.insert(id.clone(), q.clone());
            edges.push((id, s, t));
        }
    }
    let prod = Arc::new(Graph::new(vertices, edges).expect("product graph is well formed"));
    let pi1 = GraphMorphism { dom: prod.clone(), cod: g.clone(), vmap: p1v, emap: p1e };
    let pi2 = GraphMorphism { dom: prod.clone(), cod: h.clone(), vmap: p2v, emap: p2e };
    (prod, pi1, pi2)
}

/// Prefixes used when the two summands share identifiers.
pub const LEFT_PREFIX: &str = "1:";
pub const RIGHT_PREFIX: &str = "2:";

/// Disjoint union; identifiers are kept unless the summands share a name,
/// in which case every name is prefixed with `1:` / `2:`.
pub fn graph_coproduct(g: &Arc<Graph>, h: &Arc<Graph>) -> (Arc<Graph>, GraphMorphism, GraphMorphism) {
    let clash = !g.names().is_disjoint(&h.names());
    let (lp, rp) = if clash { (LEFT_PREFIX, RIGHT_PREFIX) } else { ("", "") };
    let rename = |prefix: &str, s: &str| format!("{prefix}{s}");
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    let mut legs = Vec::new();
    for (src, prefix) in [(g, lp), (h, rp)] {
        let mut vmap = BTreeMap::new();
        let mut emap = BTreeMap::new();
        for v in src.vertices() {
            let nv = VertexId::new(rename(prefix, v.as_str()));
            vmap.insert(v.clone(), nv.clone());
            vertices.push(nv);
        }
        for (e, s, t) in src.edges() {
            let ne = EdgeId::new(rename(prefix, e.as_str()));
            emap.insert(e.clone(), GenEdge::Edge(ne.clone()));
            edges.push((ne, vmap[s].clone(), vmap[t].clone()));
        }
        legs.push((vmap, emap));
    }
    let sum = Arc::new(Graph::new(vertices, edges).expect("coproduct graph is well formed"));
    let (rv, re) = legs.pop().unwrap();
    let (lv, le) = legs.pop().unwrap();
    let i1 = GraphMorphism { dom: g.clone(), cod: sum.clone(), vmap: lv, emap: le };
    let i2 = GraphMorphism { dom: h.clone(), cod: sum.clone(), vmap: rv, emap: re };
    (sum, i1, i2)
}

/// Pushout of a span `B ←f− A −g→ C` of monic morphisms.
///
/// Glued elements and all of `C` keep their `C` names; the remaining
/// elements of `B` keep their names unless they clash with `C`, in which case
/// every `B`-only name gets the `1:` prefix. Returns `(P, B → P, C → P)`.
pub fn graph_pushout(
    f: &GraphMorphism,
    g: &GraphMorphism,
) -> Result<(Arc<Graph>, GraphMorphism, GraphMorphism), GraphError> {
    if *f.dom != *g.dom {
        return Err(GraphError::Mismatch);
    }
    if !f.classify().monic || !g.classify().monic {
        return Err(GraphError::NotMonic);
    }
    let b = f.cod.clone();
    let c = g.cod.clone();
    // element of B in the image of f -> its C counterpart
    let mut glue_v: BTreeMap<VertexId, VertexId> = BTreeMap::new();
    for (a, bv) in &f.vmap {
        glue_v.insert(bv.clone(), g.vmap[a].clone());
    }
    let mut glue_e: BTreeMap<EdgeId, EdgeId> = BTreeMap::new();
    for (a, bp) in &f.emap {
        if let (GenEdge::Edge(be), GenEdge::Edge(ce)) = (bp, &g.emap[a]) {
            glue_e.insert(be.clone(), ce.clone());
        }
    }
    let b_only: BTreeSet<String> = b
        .vertices()
        .filter(|v| !glue_v.contains_key(*v))
        .map(|v| v.to_string())
        .chain(b.edge_ids().filter(|e| !glue_e.contains_key(*e)).map(|e| e.to_string()))
        .collect();
    let prefix = if b_only.is_disjoint(&c.names()) { "" } else { LEFT_PREFIX };

    let mut vertices: Vec<VertexId> = c.vertices().cloned().collect();
    let mut bv_map = BTreeMap::new();
    for v in b.vertices() {
        let image = match glue_v.get(v) {
            Some(cv) => cv.clone(),
            None => {
                let nv = VertexId::new(format!("{prefix}{v}"));
                vertices.push(nv.clone());
                nv
            }
        };
        bv_map.insert(v.clone(), image);
    }
    let mut edges: Vec<(EdgeId, VertexId, VertexId)> =
        c.edges().map(|(e, s, t)| (e.clone(), s.clone(), t.clone())).collect();
    let mut be_map = BTreeMap::new();
    for (e, s, t) in b.edges() {
        let image = match glue_e.get(e) {
            Some(ce) => ce.clone(),
            None => {
                let ne = EdgeId::new(format!("{prefix}{e}"));
                edges.push((ne.clone(), bv_map[s].clone(), bv_map[t].clone()));
                ne
            }
        };
        be_map.insert(e.clone(), GenEdge::Edge(image));
    }
    let p = Arc::new(Graph::new(vertices, edges)?);
    let leg_b = GraphMorphism { dom: b, cod: p.clone(), vmap: bv_map, emap: be_map };
    let leg_c = GraphMorphism::identity(c.clone()).with_codomain(p.clone())?;
    Ok((p, leg_b, leg_c))
}

/// Fiber product of a cospan `A −f→ C ←g− B`: the subgraph of `A ⊠ B` on
/// which both legs agree.
pub fn graph_fiber_product(
    f: &GraphMorphism,
    g: &GraphMorphism,
) -> Result<(Arc<Graph>, GraphMorphism, GraphMorphism), GraphError> {
    if *f.cod != *g.cod {
        return Err(GraphError::Mismatch);
    }
    let a = f.dom.clone();
    let b = g.dom.clone();
    let mut vertices = Vec::new();
    let (mut p1v, mut p2v) = (BTreeMap::new(), BTreeMap::new());
    for v in a.vertices() {
        for w in b.vertices() {
            if f.vmap[v] == g.vmap[w] {
                let id = VertexId::new(pair_name(v.as_str(), w.as_str()));
                p1v.insert(id.clone(), v.clone());
                p2v.insert(id.clone(), w.clone());
                vertices.push(id);
            }
        }
    }
    let mut edges = Vec::new();
    let (mut p1e, mut p2e) = (BTreeMap::new(), BTreeMap::new());
    for p in a.generalized_edges() {
        for q in b.generalized_edges() {
            if p.is_vertex() && q.is_vertex() {
                continue;
            }
            if f.map_gen(&p) != g.map_gen(&q) {
                continue;
            }
            let id = EdgeId::new(pair_name(p.name(), q.name()));
            let s = VertexId::new(pair_name(a.src(&p).unwrap().as_str(), b.src(&q).unwrap().as_str()));
            let t = VertexId::new(pair_name(a.tgt(&p).unwrap().as_str(), b.tgt(&q).unwrap().as_str()));
            p1e.insert(id.clone(), p.clone());
            p2e.insert(id.clone(), q.clone());
            edges.push((id, s, t));
        }
    }
    let fib = Arc::new(Graph::new(vertices, edges)?);
    let pi1 = GraphMorphism { dom: fib.clone(), cod: a, vmap: p1v, emap: p1e };
    let pi2 = GraphMorphism { dom: fib.clone(), cod: b, vmap: p2v, emap: p2e };
    Ok((fib, pi1, pi2))
}

/// Every morphism `dom → cod`, in a deterministic order.
pub fn enumerate_morphisms(dom: &Arc<Graph>, cod: &Arc<Graph>) -> Vec<GraphMorphism> {
    let dvs: Vec<&VertexId> = dom.vertices().collect();
    let cvs: Vec<&VertexId> = cod.vertices().collect();
    let des: Vec<(&EdgeId, &VertexId, &VertexId)> = dom.edges().collect();
    let cgen = cod.generalized_edges();
    let mut out = Vec::new();
    if dvs.is_empty() {
        out.push(GraphMorphism { dom: dom.clone(), cod: cod.clone(), vmap: BTreeMap::new(), emap: BTreeMap::new() });
        return out;
    }
    if cvs.is_empty() {
        return out;
    }
    let mut choice = vec![0usize; dvs.len()];
    loop {
        let vmap: BTreeMap<VertexId, VertexId> =
            dvs.iter().zip(&choice).map(|(v, &i)| ((*v).clone(), cvs[i].clone())).collect();
        // candidates per edge
        let cands: Vec<Vec<&GenEdge>> = des
            .iter()
            .map(|(_, s, t)| {
                let (ws, wt) = (&vmap[*s], &vmap[*t]);
                cgen.iter()
                    .filter(|p| cod.src(p).as_ref() == Some(ws) && cod.tgt(p).as_ref() == Some(wt))
                    .collect()
            })
            .collect();
        if cands.iter().all(|c| !c.is_empty()) {
            let mut ei = vec![0usize; des.len()];
            loop {
                let emap = des
                    .iter()
                    .zip(&ei)
                    .enumerate()
                    .map(|(k, ((e, _, _), &i))| ((*e).clone(), cands[k][i].clone()))
                    .collect();
                out.push(GraphMorphism { dom: dom.clone(), cod: cod.clone(), vmap: vmap.clone(), emap });
                if !advance(&mut ei, |k| cands[k].len()) {
                    break;
                }
            }
        }
        if !advance(&mut choice, |_| cvs.len()) {
            break;
        }
    }
    out
}

fn advance(counter: &mut [usize], radix: impl Fn(usize) -> usize) -> bool {
    for k in (0..counter.len()).rev() {
        counter[k] += 1;
        if counter[k] < radix(k) {
            return true;
        }
        counter[k] = 0;
    }
    false
}
