//! (ε,T)-chains, chain search, directedness certification and
//! trapping-region checks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::{Certification, DirectedSystem};
use crate::exec::{flow_for, simulate, ExecutionTrace, JumpKind, Sample, Segment, SimConfig};
use crate::expr::{parse_expr, Expr, ExprError, Predicate, Rel};
use crate::graph::{EdgeId, GenEdge, VertexId};
use crate::morphism::Semiconjugacy;
use crate::sample::NO_PARAMS;
use crate::system::{euclid, HybridPoint, HybridSystem, MAX_WITNESSES};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("unknown mode {0}")]
    UnknownMode(VertexId),
    #[error("trace jump {0} has no edge label")]
    Unlabeled(usize),
    #[error("{0}")]
    Invalid(String),
}

mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s}"))),
        }
    }
}

// ---------------------------------------------------------------- chains

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinkKind {
    Reset { edge: EdgeId },
    /// A jump along a vertex: the state moves by at most ε within a mode.
    Teleport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    #[serde(flatten)]
    pub kind: LinkKind,
    pub time: f64,
    pub pre: HybridPoint,
    pub post: HybridPoint,
    pub gap: f64,
}

/// Flow segments joined by links; segment `j` ends where link `j` starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub eps: f64,
    #[serde(with = "inf_f64")]
    pub t: f64,
    pub segments: Vec<Segment>,
    pub links: Vec<Link>,
}

impl Chain {
    /// An execution read as a `(0, T)`-chain; trivial jumps become zero-gap teleports.
    pub fn from_trace(trace: &ExecutionTrace, eps: f64, t: f64) -> Result<Chain, AnalysisError> {
        let mut links = Vec::new();
        for (i, j) in trace.jumps.iter().enumerate() {
            let kind = match &j.kind {
                JumpKind::Edge(e) => LinkKind::Reset { edge: e.clone() },
                JumpKind::Trivial(_) => LinkKind::Teleport,
                JumpKind::Unlabeled => return Err(AnalysisError::Unlabeled(i)),
            };
            links.push(Link { kind, time: j.time, pre: j.pre.clone(), post: j.post.clone(), gap: 0.0 });
        }
        Ok(Chain { eps, t, segments: trace.segments.clone(), links })
    }

    pub fn start(&self) -> HybridPoint {
        let s = &self.segments[0];
        HybridPoint { mode: s.mode.clone(), x: s.start().x.clone() }
    }

    pub fn end(&self) -> HybridPoint {
        let s = &self.segments[self.segments.len() - 1];
        HybridPoint { mode: s.mode.clone(), x: s.end().x.clone() }
    }

    pub fn duration(&self) -> f64 {
        self.segments[self.segments.len() - 1].end().t - self.segments[0].start().t
    }

    pub fn teleport_times(&self) -> Vec<f64> {
        self.links.iter().filter(|l| l.kind == LinkKind::Teleport).map(|l| l.time).collect()
    }

    pub fn max_gap(&self) -> f64 {
        self.links.iter().map(|l| l.gap).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("chain serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Chain, AnalysisError> {
        let c: Chain = serde_json::from_str(text).map_err(|e| AnalysisError::Invalid(e.to_string()))?;
        if c.segments.is_empty() || c.segments.iter().any(|s| s.samples.is_empty()) {
            return Err(AnalysisError::Invalid("chain needs non-empty segments".into()));
        }
        if c.links.len() + 1 != c.segments.len() {
            return Err(AnalysisError::Invalid("a chain has one link fewer than segments".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainReport {
    pub valid: bool,
    pub eps: f64,
    #[serde(with = "inf_f64")]
    pub t: f64,
    pub max_gap: f64,
    pub max_integration_residual: f64,
    pub teleports: usize,
    pub violations: Vec<String>,
}

/// Re-check the chain conditions: flow-set membership and re-integration
/// of every segment, guard membership and gaps of links, and the
/// separation of teleport times (with `0` as the zeroth).
pub fn validate_chain(h: &HybridSystem, c: &Chain, tol: f64, cfg: &SimConfig) -> ChainReport {
    let b = h.bound();
    let mtol = b.eq_tol().max(tol);
    let mut violations = Vec::new();
    let mut max_res: f64 = 0.0;
    let mut max_gap: f64 = 0.0;
    let note = |v: &mut Vec<String>, s: String| {
        if v.len() < 4 * MAX_WITNESSES {
            v.push(s);
        }
    };
    if c.segments.is_empty() || c.links.len() + 1 != c.segments.len() {
        return ChainReport {
            valid: false,
            eps: c.eps,
            t: c.t,
            max_gap: 0.0,
            max_integration_residual: 0.0,
            teleports: 0,
            violations: vec!["malformed chain".into()],
        };
    }
    for (j, seg) in c.segments.iter().enumerate() {
        let Some(m) = b.mode(&seg.mode) else {
            note(&mut violations, format!("segment {j}: unknown mode {}", seg.mode));
            continue;
        };
        if seg.samples.iter().any(|s| s.x.len() != m.dim) {
            note(&mut violations, format!("segment {j}: wrong dimension"));
            continue;
        }
        if !m.active.holds_within(&seg.start().x, &NO_PARAMS, mtol) {
            note(&mut violations, format!("segment {j}: starts outside the active set"));
        }
        let end_t = seg.end().t;
        for w in seg.samples.windows(2) {
            if w[1].t < w[0].t {
                note(&mut violations, format!("segment {j}: time runs backwards at {}", w[0].t));
                break;
            }
            if w[0].t < end_t && !m.flow.holds_within(&w[0].x, &NO_PARAMS, mtol) {
                note(&mut violations, format!("segment {j}: {:?} at t={} is outside the flow set", w[0].x, w[0].t));
            }
            if m.dim == 0 {
                continue;
            }
            let r = match flow_for(&m.field, &w[0].x, w[1].t - w[0].t, cfg) {
                Ok(y) => euclid(&y, &w[1].x) / w[1].x.iter().fold(1.0f64, |a, v| a.max(v.abs())),
                Err(_) => f64::INFINITY,
            };
            max_res = max_res.max(r);
            if !(r <= tol) {
                note(&mut violations, format!("segment {j}: integral-curve residual {r:e} at t={}", w[0].t));
            }
        }
    }
    let mut tp = vec![c.segments[0].start().t];
    for (j, l) in c.links.iter().enumerate() {
        let (a, z) = (&c.segments[j], &c.segments[j + 1]);
        let tscale = 1e-9 * l.time.abs().max(1.0);
        if (a.end().t - l.time).abs() > tscale || (z.start().t - l.time).abs() > tscale {
            note(&mut violations, format!("link {j}: time {} does not join its segments", l.time));
        }
        if l.pre.mode != a.mode || l.post.mode != z.mode {
            note(&mut violations, format!("link {j}: modes do not match the segments"));
            continue;
        }
        if euclid(&l.pre.x, &a.end().x) > tol || euclid(&l.post.x, &z.start().x) > tol {
            note(&mut violations, format!("link {j}: endpoints differ from the segments"));
        }
        let gap = match &l.kind {
            LinkKind::Reset { edge } => match b.edge(edge) {
                Some(r) if r.src == a.mode && r.tgt == z.mode => {
                    if !r.guard.holds_within(&l.pre.x, &NO_PARAMS, mtol) {
                        note(&mut violations, format!("link {j}: {:?} is not in the guard of {edge}", l.pre.x));
                    }
                    match r.reset.eval(&l.pre.x, &NO_PARAMS) {
                        Ok(y) => euclid(&l.post.x, &y),
                        Err(_) => f64::INFINITY,
                    }
                }
                _ => {
                    note(&mut violations, format!("link {j}: edge {edge} does not join {} and {}", a.mode, z.mode));
                    f64::INFINITY
                }
            },
            LinkKind::Teleport => {
                tp.push(l.time);
                if a.mode != z.mode {
                    f64::INFINITY
                } else {
                    let m = &b.modes()[&a.mode];
                    if !m.flow.holds_within(&l.pre.x, &NO_PARAMS, mtol) {
                        note(&mut violations, format!("link {j}: teleport leaves from outside the flow set"));
                    }
                    if !m.active.holds_within(&l.post.x, &NO_PARAMS, mtol) {
                        note(&mut violations, format!("link {j}: teleport lands outside the active set"));
                    }
                    euclid(&l.post.x, &l.pre.x)
                }
            }
        };
        max_gap = max_gap.max(gap);
        if !(gap <= c.eps + tol) {
            note(&mut violations, format!("link {j}: gap {gap:e} exceeds eps {}", c.eps));
        }
    }
    for w in tp.windows(2) {
        if !(w[1] - w[0] >= c.t - 1e-9 * w[1].abs().max(1.0)) {
            note(&mut violations, format!("teleports at {} and {} are closer than T={}", w[0], w[1], c.t));
        }
    }
    ChainReport {
        valid: violations.is_empty(),
        eps: c.eps,
        t: c.t,
        max_gap,
        max_integration_residual: max_res,
        teleports: tp.len() - 1,
        violations,
    }
}

// ---------------------------------------------------------- chain search

/// Per-mode target predicates; a point hits the target when its mode has
/// an entry and the predicate holds (within the system tolerance).
#[derive(Clone, Debug, Default)]
pub struct Target {
    pub preds: BTreeMap<VertexId, Predicate>,
}

impl Target {
    pub fn modes(modes: impl IntoIterator<Item = VertexId>) -> Self {
        Target { preds: modes.into_iter().map(|v| (v, Predicate::True)).collect() }
    }

    fn hit(&self, b: &HybridSystem, mode: &VertexId, x: &[f64]) -> bool {
        self.preds.get(mode).is_some_and(|p| p.bind(b.params()).holds_within(x, &NO_PARAMS, b.eq_tol()))
    }
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    /// Maximum number of node expansions.
    pub budget: usize,
    /// Simulated time per expansion.
    pub window: f64,
    /// Total chain duration considered.
    pub max_time: f64,
    /// Validation tolerance for returned chains.
    pub tol: f64,
    /// Radii per direction in the ε-ball design.
    pub radii: usize,
    pub max_teleports_per_node: usize,
    pub sim: SimConfig,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            budget: 10_000,
            window: 2.0,
            max_time: 50.0,
            tol: 1e-6,
            radii: 2,
            max_teleports_per_node: 3,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SearchStats {
    pub expanded: usize,
    pub generated: usize,
    pub duplicates: usize,
    pub sim_failures: usize,
    pub rejected_candidates: usize,
    pub budget_exhausted: bool,
}

#[derive(Clone, Debug)]
pub enum SearchOutcome {
    Found { chain: Chain, stats: SearchStats },
    NotFound { stats: SearchStats },
}

impl SearchOutcome {
    pub fn chain(&self) -> Option<&Chain> {
        match self {
            SearchOutcome::Found { chain, .. } => Some(chain),
            SearchOutcome::NotFound { .. } => None,
        }
    }

    pub fn stats(&self) -> &SearchStats {
        match self {
            SearchOutcome::Found { stats, .. } | SearchOutcome::NotFound { stats } => stats,
        }
    }
}

/// Perturbation offsets of the ε-ball: 8 directions in the plane, ±e_i and
/// the diagonal midpoints `(±e_i ± e_j)/√2` in higher dimensions, each at
/// radii `ε·k/m` for `k = m, …, 1`.
pub fn ball_design(dim: usize, eps: f64, radii: usize) -> Vec<Vec<f64>> {
    if dim == 0 || !(eps > 0.0) {
        return Vec::new();
    }
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    match dim {
        1 => {
            dirs.push(vec![1.0]);
            dirs.push(vec![-1.0]);
        }
        2 => {
            for k in 0..8 {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                dirs.push(vec![a.cos(), a.sin()]);
            }
        }
        n => {
            for i in 0..n {
                for s in [1.0, -1.0] {
                    let mut d = vec![0.0; n];
                    d[i] = s;
                    dirs.push(d);
                }
            }
            let c = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..n {
                for j in (i + 1)..n {
                    for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                        let mut d = vec![0.0; n];
                        d[i] = si * c;
                        d[j] = sj * c;
                        dirs.push(d);
                    }
                }
            }
        }
    }
    let m = radii.max(1);
    let mut out = Vec::new();
    for k in (1..=m).rev() {
        let r = eps * k as f64 / m as f64;
        for d in &dirs {
            out.push(d.iter().map(|c| c * r).collect());
        }
    }
    out
}

struct NodeRec {
    parent: Option<usize>,
    /// Flow from the parent's point up to the branch, with its own links.
    segments: Vec<Segment>,
    links: Vec<Link>,
    /// Link from the end of `segments` into this node; `None` continues the flow.
    link_in: Option<Link>,
    point: HybridPoint,
    t: f64,
    last_tp: f64,
    perturbs: usize,
}

fn shift_segment(seg: &Segment, dt: f64) -> Segment {
    Segment {
        mode: seg.mode.clone(),
        samples: seg.samples.iter().map(|s| Sample { t: s.t + dt, x: s.x.clone() }).collect(),
    }
}

fn trace_links(trace: &ExecutionTrace, upto: usize, dt: f64) -> Vec<Link> {
    trace.jumps[..upto]
        .iter()
        .map(|j| {
            let kind = match &j.kind {
                JumpKind::Edge(e) => LinkKind::Reset { edge: e.clone() },
                _ => LinkKind::Teleport,
            };
            Link { kind, time: j.time + dt, pre: j.pre.clone(), post: j.post.clone(), gap: 0.0 }
        })
        .collect()
}

fn assemble(nodes: &[NodeRec], leaf: usize, tail_segments: Vec<Segment>, tail_links: Vec<Link>, eps: f64, t: f64) -> Chain {
    let mut path = Vec::new();
    let mut cur = Some(leaf);
    while let Some(i) = cur {
        path.push(i);
        cur = nodes[i].parent;
    }
    path.reverse();
    let mut segments: Vec<Segment> = Vec::new();
    let mut links: Vec<Link> = Vec::new();
    let mut pending: Option<Option<Link>> = None;
    let mut push_piece = |segs: Vec<Segment>, ls: Vec<Link>, pending: &mut Option<Option<Link>>| {
        let mut segs = segs.into_iter();
        if let Some(first) = segs.next() {
            match pending.take() {
                Some(None) => {
                    let last = segments.last_mut().expect("continuation follows a segment");
                    last.samples.extend(first.samples.into_iter().skip(1));
                }
                Some(Some(l)) => {
                    links.push(l);
                    segments.push(first);
                }
                None => segments.push(first),
            }
        }
        segments.extend(segs);
        links.extend(ls);
    };
    for &i in &path {
        let n = &nodes[i];
        if n.parent.is_some() {
            push_piece(n.segments.clone(), n.links.clone(), &mut pending);
            pending = Some(n.link_in.clone());
        }
    }
    push_piece(tail_segments, tail_links, &mut pending);
    Chain { eps, t, segments, links }
}

fn distance_to_target(h: &HybridSystem, target: &Target) -> BTreeMap<VertexId, usize> {
    let mut dist: BTreeMap<VertexId, usize> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for v in target.preds.keys() {
        if h.mode(v).is_some() {
            dist.insert(v.clone(), 0);
            queue.push_back(v.clone());
        }
    }
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        for (_, r) in h.edges().iter().filter(|(_, r)| r.tgt == v) {
            if !dist.contains_key(&r.src) {
                dist.insert(r.src.clone(), d + 1);
                queue.push_back(r.src.clone());
            }
        }
    }
    dist
}

/// Best-first search for an `(ε, T)`-chain from `start` into `target`.
///
/// Nodes are expanded by simulating for `window`; branches perturb reset
/// images and, once `T` has elapsed since the last teleport, the flow, over
/// the deterministic ε-ball design. Found chains have passed
/// [`validate_chain`]; `NotFound` is inconclusive.
pub fn chain_search(
    h: &HybridSystem,
    start: &HybridPoint,
    target: &Target,
    eps: f64,
    t_sep: f64,
    opts: &SearchOptions,
) -> Result<SearchOutcome, AnalysisError> {
    let b = h.bound();
    let mode = b.mode(&start.mode).ok_or_else(|| AnalysisError::UnknownMode(start.mode.clone()))?;
    if start.x.len() != mode.dim {
        return Err(AnalysisError::Invalid("start point has the wrong dimension".into()));
    }
    let mtol = b.eq_tol().max(opts.sim.event_tol);
    let dist = distance_to_target(&b, target);
    let mut stats = SearchStats::default();
    let mut nodes: Vec<NodeRec> = vec![NodeRec {
        parent: None,
        segments: Vec::new(),
        links: Vec::new(),
        link_in: None,
        point: start.clone(),
        t: 0.0,
        last_tp: 0.0,
        perturbs: 0,
    }];
    type Key = (usize, usize, u64, usize);
    let key = |n: &NodeRec, id: usize| -> Key {
        (dist.get(&n.point.mode).copied().unwrap_or(usize::MAX), n.perturbs, n.t.max(0.0).to_bits(), id)
    };
    let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
    heap.push(Reverse(key(&nodes[0], 0)));
    let mut seen: BTreeSet<(VertexId, Vec<i64>, i64)> = BTreeSet::new();
    let quantum = (eps / 4.0).max(1e-9);
    let design_cache = |dim: usize| ball_design(dim, eps, opts.radii);

    if target.hit(&b, &start.mode, &start.x) {
        let seg = Segment { mode: start.mode.clone(), samples: vec![Sample { t: 0.0, x: start.x.clone() }] };
        return Ok(SearchOutcome::Found { chain: Chain { eps, t: t_sep, segments: vec![seg], links: vec![] }, stats });
    }

    while let Some(Reverse((_, _, _, id))) = heap.pop() {
        if stats.expanded >= opts.budget {
            stats.budget_exhausted = true;
            break;
        }
        let (point, t0, last_tp, perturbs) = {
            let n = &nodes[id];
            (n.point.clone(), n.t, n.last_tp, n.perturbs)
        };
        let ready = if t_sep.is_finite() { ((t0 - last_tp).min(t_sep) / quantum).round() as i64 } else { 0 };
        let sig = (point.mode.clone(), point.x.iter().map(|v| (v / quantum).round() as i64).collect(), ready);
        if !seen.insert(sig) {
            stats.duplicates += 1;
            continue;
        }
        stats.expanded += 1;
        let horizon = opts.window.min(opts.max_time - t0);
        if !(horizon > 0.0) {
            continue;
        }
        let cfg = SimConfig { horizon, ..opts.sim.clone() };
        let trace = match simulate(&b, &point, &cfg) {
            Ok(tr) => tr,
            Err(_) => {
                stats.sim_failures += 1;
                continue;
            }
        };

        // target reached along this window?
        'hit: for (j, seg) in trace.segments.iter().enumerate() {
            for (k, s) in seg.samples.iter().enumerate() {
                if target.hit(&b, &seg.mode, &s.x) {
                    let mut segs: Vec<Segment> = trace.segments[..j].iter().map(|g| shift_segment(g, t0)).collect();
                    let cut = Segment { mode: seg.mode.clone(), samples: seg.samples[..=k].to_vec() };
                    segs.push(shift_segment(&cut, t0));
                    let links = trace_links(&trace, j, t0);
                    let chain = if id == 0 {
                        Chain { eps, t: t_sep, segments: segs, links }
                    } else {
                        assemble(&nodes, id, segs, links, eps, t_sep)
                    };
                    if validate_chain(&b, &chain, opts.tol, &opts.sim).valid {
                        return Ok(SearchOutcome::Found { chain, stats });
                    }
                    stats.rejected_candidates += 1;
                    break 'hit;
                }
            }
        }

        let mut children: Vec<NodeRec> = Vec::new();
        // perturbed reset images
        for (j, jump) in trace.jumps.iter().enumerate() {
            let JumpKind::Edge(e) = &jump.kind else { continue };
            let tm = &b.modes()[&jump.post.mode];
            for d in design_cache(tm.dim) {
                let post: Vec<f64> = jump.post.x.iter().zip(&d).map(|(a, c)| a + c).collect();
                if !tm.active.holds_within(&post, &NO_PARAMS, mtol) {
                    continue;
                }
                let segs = trace.segments[..=j].iter().map(|g| shift_segment(g, t0)).collect();
                let link = Link {
                    kind: LinkKind::Reset { edge: e.clone() },
                    time: jump.time + t0,
                    pre: jump.pre.clone(),
                    post: HybridPoint { mode: jump.post.mode.clone(), x: post.clone() },
                    gap: euclid(&d, &vec![0.0; d.len()]),
                };
                children.push(NodeRec {
                    parent: Some(id),
                    segments: segs,
                    links: trace_links(&trace, j, t0),
                    link_in: Some(link),
                    point: HybridPoint { mode: jump.post.mode.clone(), x: post },
                    t: jump.time + t0,
                    last_tp,
                    perturbs: perturbs + 1,
                });
            }
        }
        // teleports once T has elapsed since the last one
        if t_sep.is_finite() && eps > 0.0 {
            let mut tau = (last_tp + t_sep).max(t0);
            let stop = t0 + trace.stop_time();
            let mut count = 0;
            while tau < stop && count < opts.max_teleports_per_node {
                count += 1;
                let local = tau - t0;
                let Some(j) = trace
                    .segments
                    .iter()
                    .position(|s| s.start().t <= local && local < s.end().t)
                else {
                    tau += t_sep;
                    continue;
                };
                let seg = &trace.segments[j];
                let m = &b.modes()[&seg.mode];
                let k = seg.samples.partition_point(|s| s.t <= local) - 1;
                let base = &seg.samples[k];
                let Ok(pre) = flow_for(&m.field, &base.x, local - base.t, &opts.sim) else {
                    tau += t_sep;
                    continue;
                };
                if m.flow.holds_within(&pre, &NO_PARAMS, mtol) {
                    let mut cut = Segment { mode: seg.mode.clone(), samples: seg.samples[..=k].to_vec() };
                    if local > base.t {
                        cut.samples.push(Sample { t: local, x: pre.clone() });
                    }
                    let mut segs: Vec<Segment> = trace.segments[..j].iter().map(|g| shift_segment(g, t0)).collect();
                    segs.push(shift_segment(&cut, t0));
                    for d in design_cache(m.dim) {
                        let post: Vec<f64> = pre.iter().zip(&d).map(|(a, c)| a + c).collect();
                        if !m.active.holds_within(&post, &NO_PARAMS, mtol) {
                            continue;
                        }
                        let link = Link {
                            kind: LinkKind::Teleport,
                            time: tau,
                            pre: HybridPoint { mode: seg.mode.clone(), x: pre.clone() },
                            post: HybridPoint { mode: seg.mode.clone(), x: post.clone() },
                            gap: euclid(&post, &pre),
                        };
                        children.push(NodeRec {
                            parent: Some(id),
                            segments: segs.clone(),
                            links: trace_links(&trace, j, t0),
                            link_in: Some(link),
                            point: HybridPoint { mode: seg.mode.clone(), x: post },
                            t: tau,
                            last_tp: tau,
                            perturbs: perturbs + 1,
                        });
                    }
                }
                tau += t_sep;
            }
        }
        // plain continuation
        if trace.classification.horizon_truncated && t0 + trace.stop_time() < opts.max_time {
            let segs = trace.segments.iter().map(|g| shift_segment(g, t0)).collect();
            children.push(NodeRec {
                parent: Some(id),
                segments: segs,
                links: trace_links(&trace, trace.jumps.len(), t0),
                link_in: None,
                point: trace.final_point(),
                t: t0 + trace.stop_time(),
                last_tp,
                perturbs,
            });
        }
        for c in children {
            let cid = nodes.len();
            heap.push(Reverse(key(&c, cid)));
            nodes.push(c);
            stats.generated += 1;
        }
    }
    Ok(SearchOutcome::NotFound { stats })
}

// ------------------------------------------------------ directedness

#[derive(Clone, Debug, Serialize)]
pub struct StartResult {
    pub start: HybridPoint,
    /// Reached the final image by plain simulation.
    pub flows_in: bool,
    pub found: bool,
    pub perturbations: usize,
    pub nodes: usize,
    pub chain: Option<Chain>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DirectednessReport {
    pub eps: f64,
    #[serde(with = "inf_f64")]
    pub t: f64,
    pub seed: u64,
    pub coverage: f64,
    pub budget_consumed: usize,
    /// "certified" on full coverage, otherwise "not certified".
    pub verdict: &'static str,
    pub results: Vec<StartResult>,
}

/// Image of `I(H_fin)` in the carrier, as per-mode predicates `I ∘ fin⁻¹`.
pub fn final_target(d: &DirectedSystem) -> Target {
    let (_, inverses) = d.fin.bound_maps();
    let fin_dom = d.fin.dom().bound();
    let mut preds = BTreeMap::new();
    for (v, m) in fin_dom.modes() {
        let w = d.fin.vertex_image(v).clone();
        let p = m.active.substitute(&inverses[v].components);
        preds.insert(w, p);
    }
    Target { preds }
}

/// Sample starts in every carrier mode and look for chains into the final
/// image. Full coverage attaches a [`Certification`] to `d`.
pub fn certify_directed(
    d: &mut DirectedSystem,
    eps: f64,
    t_sep: f64,
    samples: usize,
    opts: &SearchOptions,
    seed: u64,
) -> Result<DirectednessReport, AnalysisError> {
    let target = final_target(d);
    let b = d.carrier.bound();
    let mut starts = Vec::new();
    for (v, m) in b.modes() {
        for x in b.sample(v, &m.active, samples, seed, "directed").points {
            starts.push(HybridPoint { mode: v.clone(), x });
        }
    }
    let results: Vec<Result<StartResult, AnalysisError>> = starts
        .par_iter()
        .map(|p| {
            let cfg = SimConfig { horizon: opts.max_time, ..opts.sim.clone() };
            let flows_in = simulate(&b, p, &cfg).is_ok_and(|tr| {
                tr.segments.iter().any(|s| s.samples.iter().any(|x| target.hit(&b, &s.mode, &x.x)))
            });
            if flows_in {
                return Ok(StartResult { start: p.clone(), flows_in, found: true, perturbations: 0, nodes: 0, chain: None });
            }
            let out = chain_search(&b, p, &target, eps, t_sep, opts)?;
            let nodes = out.stats().expanded;
            Ok(match out {
                SearchOutcome::Found { chain, .. } => StartResult {
                    start: p.clone(),
                    flows_in,
                    found: true,
                    perturbations: chain.links.iter().filter(|l| l.gap > 0.0).count(),
                    nodes,
                    chain: Some(chain),
                },
                SearchOutcome::NotFound { .. } => {
                    StartResult { start: p.clone(), flows_in, found: false, perturbations: 0, nodes, chain: None }
                }
            })
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let found = results.iter().filter(|r| r.found).count();
    let coverage = if results.is_empty() { 1.0 } else { found as f64 / results.len() as f64 };
    let certified = coverage >= 1.0;
    if certified {
        d.certified = Some(Certification { eps, t: t_sep, samples: results.len(), coverage, seed });
    }
    Ok(DirectednessReport {
        eps,
        t: t_sep,
        seed,
        coverage,
        budget_consumed: results.iter().map(|r| r.nodes).sum(),
        verdict: if certified { "certified" } else { "not certified" },
        results,
    })
}

/// Image of a chain under a semiconjugacy; gaps are recomputed and the new
/// ε is the largest of them.
pub fn push_chain(a: &Semiconjugacy, c: &Chain) -> Result<Chain, AnalysisError> {
    let (maps, _) = a.bound_maps();
    let cod = a.cod().bound();
    let map_point = |p: &HybridPoint| -> Result<HybridPoint, AnalysisError> {
        let m = maps.get(&p.mode).ok_or_else(|| AnalysisError::UnknownMode(p.mode.clone()))?;
        Ok(HybridPoint { mode: a.vertex_image(&p.mode).clone(), x: m.eval(&p.x, &NO_PARAMS)? })
    };
    let mut segments = Vec::new();
    for s in &c.segments {
        let m = maps.get(&s.mode).ok_or_else(|| AnalysisError::UnknownMode(s.mode.clone()))?;
        let samples = s
            .samples
            .iter()
            .map(|x| Ok(Sample { t: x.t, x: m.eval(&x.x, &NO_PARAMS)? }))
            .collect::<Result<Vec<_>, ExprError>>()?;
        segments.push(Segment { mode: a.vertex_image(&s.mode).clone(), samples });
    }
    let mut links = Vec::new();
    for l in &c.links {
        let (pre, post) = (map_point(&l.pre)?, map_point(&l.post)?);
        let (kind, gap) = match &l.kind {
            LinkKind::Reset { edge } => match a.graph_map().map_edge(edge) {
                Some(GenEdge::Edge(e)) => {
                    let y = cod.edges()[e].reset.eval(&pre.x, &NO_PARAMS)?;
                    (LinkKind::Reset { edge: e.clone() }, euclid(&post.x, &y))
                }
                _ => (LinkKind::Teleport, cod.distance(&pre, &post)),
            },
            LinkKind::Teleport => (LinkKind::Teleport, cod.distance(&pre, &post)),
        };
        links.push(Link { kind, time: l.time, pre, post, gap });
    }
    let eps = links.iter().map(|l| l.gap).fold(0.0, f64::max);
    Ok(Chain { eps, t: c.t, segments, links })
}

// -------------------------------------------------------- trapping

/// A region `W = {w ≥ 0}` given by one margin function per mode; modes
/// without a margin are outside `W`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Region {
    pub margins: BTreeMap<VertexId, Expr>,
}

impl Region {
    pub fn parse(h: &HybridSystem, margins: &[(&str, &str)]) -> Result<Region, AnalysisError> {
        let mut out = BTreeMap::new();
        for (v, text) in margins {
            let v = VertexId::new(v);
            let dim = h.dim(&v).ok_or_else(|| AnalysisError::UnknownMode(v.clone()))?;
            out.insert(v, parse_expr(text, dim)?);
        }
        Ok(Region { margins: out })
    }

    /// `w ≥ level` at mode `v`.
    pub fn predicate(&self, v: &VertexId, level: f64) -> Predicate {
        match self.margins.get(v) {
            Some(w) => Predicate::cmp(w.clone(), Rel::Ge, Expr::Num(level)),
            None => Predicate::False,
        }
    }

    fn margin(&self, b: &HybridSystem, v: &VertexId, x: &[f64]) -> f64 {
        match self.margins.get(v) {
            Some(w) => w.eval(x, b.params()).unwrap_or(f64::NEG_INFINITY),
            None => f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrappingOptions {
    pub samples: usize,
    pub horizon: f64,
    /// Time after which trajectories must lie in the interior.
    pub t_bound: f64,
    /// Interior proxy `{w > δ}`, closure proxy `{w ≥ −δ}`.
    pub delta: f64,
    pub seed: u64,
    pub sim: SimConfig,
}

impl Default for TrappingOptions {
    fn default() -> Self {
        TrappingOptions { samples: 500, horizon: 50.0, t_bound: 25.0, delta: 1e-6, seed: 0, sim: SimConfig::default() }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Tally {
    pub tested: usize,
    pub failures: usize,
    pub witnesses: Vec<HybridPoint>,
}

impl Tally {
    fn record(&mut self, ok: bool, p: &HybridPoint) {
        self.tested += 1;
        if !ok {
            self.failures += 1;
            if self.witnesses.len() < MAX_WITNESSES {
                self.witnesses.push(p.clone());
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrappingReport {
    pub ok: bool,
    pub seed: u64,
    pub nonblocking: Tally,
    pub invariance: Tally,
    pub interior: Tally,
    /// Smallest margin seen along trajectories started in `W`.
    pub worst_invariance_margin: f64,
    /// Smallest margin after `t_bound` along trajectories started near `W`.
    pub worst_interior_margin: f64,
    pub notes: Vec<String>,
}

fn trace_points(tr: &ExecutionTrace) -> impl Iterator<Item = (&VertexId, &Sample)> {
    tr.segments.iter().flat_map(|s| s.samples.iter().map(move |x| (&s.mode, x)))
}

/// Sampled check of the trapping-region conditions: trajectories from `W`
/// run to the horizon and never leave `W`; trajectories from the closure
/// proxy are in the interior proxy from `t_bound` on.
pub fn check_trapping_region(h: &HybridSystem, w: &Region, opts: &TrappingOptions) -> TrappingReport {
    let b = h.bound();
    let cfg = SimConfig { horizon: opts.horizon, ..opts.sim.clone() };
    let inv_tol = b.eq_tol().max(opts.sim.event_tol);
    let starts = |level: f64, tag: &str| -> Vec<HybridPoint> {
        let mut out = Vec::new();
        for (v, m) in b.modes() {
            if !w.margins.contains_key(v) {
                continue;
            }
            let pred = Predicate::and_all([m.active.clone(), w.predicate(v, level).bind(b.params())]);
            for x in b.sample(v, &pred, opts.samples, opts.seed, tag).points {
                out.push(HybridPoint { mode: v.clone(), x });
            }
        }
        out
    };
    let inside = starts(0.0, "trap/W");
    let near = starts(-opts.delta, "trap/closure");
    let mut notes = Vec::new();
    if inside.is_empty() {
        notes.push("no samples found in W".to_string());
    }

    let runs: Vec<(HybridPoint, Option<ExecutionTrace>)> =
        inside.par_iter().map(|p| (p.clone(), simulate(&b, p, &cfg).ok())).collect();
    let mut nonblocking = Tally::default();
    let mut invariance = Tally::default();
    let mut worst_inv = f64::INFINITY;
    for (p, tr) in &runs {
        let reached = tr.as_ref().is_some_and(|t| t.classification.horizon_truncated || t.classification.zeno_detected);
        nonblocking.record(reached, p);
        let low = tr.as_ref().map_or(f64::NEG_INFINITY, |t| {
            trace_points(t).map(|(v, s)| w.margin(&b, v, &s.x)).fold(f64::INFINITY, f64::min)
        });
        worst_inv = worst_inv.min(low);
        invariance.record(low >= -inv_tol, p);
    }

    let later: Vec<(HybridPoint, f64)> = near
        .par_iter()
        .map(|p| {
            let low = match simulate(&b, p, &cfg) {
                Ok(t) => trace_points(&t)
                    .filter(|(_, s)| s.t >= opts.t_bound)
                    .map(|(v, s)| w.margin(&b, v, &s.x))
                    .fold(f64::INFINITY, f64::min),
                Err(_) => f64::NEG_INFINITY,
            };
            (p.clone(), low)
        })
        .collect();
    let mut interior = Tally::default();
    let mut worst_int = f64::INFINITY;
    for (p, low) in &later {
        worst_int = worst_int.min(*low);
        interior.record(*low > opts.delta, p);
    }
    let ok = !inside.is_empty() && nonblocking.failures == 0 && invariance.failures == 0 && interior.failures == 0;
    TrappingReport {
        ok,
        seed: opts.seed,
        nonblocking,
        invariance,
        interior,
        worst_invariance_margin: worst_inv,
        worst_interior_margin: worst_int,
        notes,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AttractingEstimate {
    pub points: Vec<HybridPoint>,
    pub failed: usize,
    /// Largest amount by which a cloud point misses the candidate set.
    pub candidate_distance: Option<f64>,
}

/// Forward images at `horizon` of a grid over `W` (per mode, `resolution`
/// points per axis of the sampling box).
pub fn estimate_attracting_set(
    h: &HybridSystem,
    w: &Region,
    horizon: f64,
    resolution: usize,
    sim: &SimConfig,
    candidate: Option<&BTreeMap<VertexId, Predicate>>,
) -> AttractingEstimate {
    let b = h.bound();
    let cfg = SimConfig { horizon, ..sim.clone() };
    let mut grid = Vec::new();
    for (v, m) in b.modes() {
        if !w.margins.contains_key(v) {
            continue;
        }
        let bx = m.sampling_box();
        let n = resolution.max(1);
        let total = n.pow(m.dim as u32);
        for idx in 0..total {
            let mut rest = idx;
            let x: Vec<f64> = bx
                .iter()
                .map(|(lo, hi)| {
                    let k = rest % n;
                    rest /= n;
                    if n == 1 {
                        0.5 * (lo + hi)
                    } else {
                        lo + (hi - lo) * k as f64 / (n - 1) as f64
                    }
                })
                .collect();
            if m.active.holds_within(&x, &NO_PARAMS, b.eq_tol()) && w.margin(&b, v, &x) >= 0.0 {
                grid.push(HybridPoint { mode: v.clone(), x });
            }
        }
    }
    let finals: Vec<Option<HybridPoint>> =
        grid.par_iter().map(|p| simulate(&b, p, &cfg).ok().map(|t| t.final_point())).collect();
    let failed = finals.iter().filter(|p| p.is_none()).count();
    let points: Vec<HybridPoint> = finals.into_iter().flatten().collect();
    let candidate_distance = candidate.map(|c| {
        points
            .iter()
            .map(|p| match c.get(&p.mode) {
                Some(pred) => pred.bind(b.params()).robustness(&p.x, &NO_PARAMS).map_or(f64::INFINITY, |r| (-r).max(0.0)),
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    });
    AttractingEstimate { points, failed, candidate_distance }
}

/// `W ∘ p`: the region pulled back along a semiconjugacy, mode by mode.
pub fn pull_back_isolating_neighborhood(p: &Semiconjugacy, w: &Region) -> Region {
    let (maps, _) = p.bound_maps();
    let params = p.cod().params();
    let mut margins = BTreeMap::new();
    for (v, m) in &maps {
        if let Some(e) = w.margins.get(p.vertex_image(v)) {
            margins.insert(v.clone(), e.bind(params).substitute(&m.components));
        }
    }
    Region { margins }
}

/// Per-mode predicates pulled back along `p`.
pub fn pull_back_predicates(p: &Semiconjugacy, preds: &BTreeMap<VertexId, Predicate>) -> BTreeMap<VertexId, Predicate> {
    let (maps, _) = p.bound_maps();
    let params = p.cod().params();
    maps.iter()
        .filter_map(|(v, m)| preds.get(p.vertex_image(v)).map(|q| (v.clone(), q.bind(params).substitute(&m.components))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Mode;

    fn line(field: &str, flow: &str) -> HybridSystem {
        let mode = Mode::parse(1, &[field], "true", flow).unwrap();
        HybridSystem::from_parts([(VertexId::new("v"), mode)], [], Default::default()).unwrap()
    }

    fn seg(points: &[(f64, f64)]) -> Segment {
        Segment { mode: VertexId::new("v"), samples: points.iter().map(|&(t, x)| Sample { t, x: vec![x] }).collect() }
    }

    fn teleport_chain(t: f64, gap: f64, at: f64) -> Chain {
        let a = seg(&[(0.0, 0.0), (at, 0.0)]);
        let b = seg(&[(at, gap), (at + 1.0, gap)]);
        let link = Link {
            kind: LinkKind::Teleport,
            time: at,
            pre: HybridPoint::new("v", vec![0.0]),
            post: HybridPoint::new("v", vec![gap]),
            gap,
        };
        Chain { eps: 0.05, t, segments: vec![a, b], links: vec![link] }
    }

    #[test]
    fn teleport_separation() {
        let h = line("0", "true");
        let cfg = SimConfig::default();
        assert!(validate_chain(&h, &teleport_chain(1.0, 0.04, 1.2), 1e-9, &cfg).valid);
        assert!(!validate_chain(&h, &teleport_chain(2.0, 0.04, 1.2), 1e-9, &cfg).valid);
        assert!(!validate_chain(&h, &teleport_chain(1.0, 0.06, 1.2), 1e-9, &cfg).valid);
        assert!(!validate_chain(&h, &teleport_chain(f64::INFINITY, 0.04, 1.2), 1e-9, &cfg).valid);
    }

    #[test]
    fn execution_is_a_zero_chain() {
        let h = line("x0", "x0 <= 2");
        let tr = simulate(&h, &HybridPoint::new("v", vec![1.0]), &SimConfig::default()).unwrap();
        let c = Chain::from_trace(&tr, 0.0, f64::INFINITY).unwrap();
        let r = validate_chain(&h, &c, 1e-6, &SimConfig::default());
        assert!(r.valid, "{:?}", r.violations);
    }

    #[test]
    fn ball_design_shapes() {
        assert_eq!(ball_design(2, 0.1, 2).len(), 16);
        assert_eq!(ball_design(1, 0.1, 2).len(), 4);
        assert_eq!(ball_design(3, 0.1, 1).len(), 6 + 12);
        assert!(ball_design(2, 0.0, 2).is_empty());
        for d in ball_design(3, 0.5, 2) {
            assert!(euclid(&d, &[0.0; 3]) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn search_escapes_equilibrium_only_with_eps() {
        // x' = x from 0 never reaches x >= 1 without perturbation
        let h = line("x0", "x0 >= 0 and x0 <= 1");
        let target = Target { preds: [(VertexId::new("v"), crate::expr::parse_predicate("x0 >= 1", 1).unwrap())].into() };
        let start = HybridPoint::new("v", vec![0.0]);
        let opts = SearchOptions { max_time: 20.0, ..Default::default() };
        let found = chain_search(&h, &start, &target, 0.05, 1.0, &opts).unwrap();
        let chain = found.chain().expect("chain found");
        assert!(validate_chain(&h, chain, 1e-6, &opts.sim).valid);
        assert!(matches!(chain_search(&h, &start, &target, 0.0, 1.0, &opts).unwrap(), SearchOutcome::NotFound { .. }));
    }

    #[test]
    fn chain_json_round_trip() {
        let c = teleport_chain(f64::INFINITY, 0.04, 1.2);
        let back = Chain::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unstable_line_escapes_region() {
        let h = line("x0", "true");
        let w = Region::parse(&h, &[("v", "1 - x0^2")]).unwrap();
        let opts = TrappingOptions { samples: 20, horizon: 5.0, t_bound: 2.0, ..Default::default() };
        let r = check_trapping_region(&h, &w, &opts);
        assert!(!r.ok);
        assert!(r.invariance.failures > 0);
    }

    #[test]
    fn contracting_line_is_trapped() {
        let h = line("-x0", "true");
        let w = Region::parse(&h, &[("v", "1 - x0^2")]).unwrap();
        let opts = TrappingOptions { samples: 20, horizon: 5.0, t_bound: 2.0, ..Default::default() };
        let r = check_trapping_region(&h, &w, &opts);
        assert!(r.ok, "{r:?}");
        let est = estimate_attracting_set(&h, &w, 20.0, 11, &SimConfig::default(), None);
        assert!(est.points.iter().all(|p| p.x[0].abs() < 1e-3));
    }
}
