//! Event-driven simulation of hybrid executions, and operations on the
//! resulting traces: prefixes, refinement of time trajectories, removal of
//! trivial jumps, pushforward along semiconjugacies and pullback along
//! subdivisions.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::{Side, Subdivision, SubdivisionKind};
use crate::expr::{fmt_num, Expr, ExprError, Predicate, VectorExpr};
use crate::graph::{EdgeId, GenEdge, VertexId};
use crate::morphism::Semiconjugacy;
use crate::sample::NO_PARAMS;
use crate::system::{HybridPoint, HybridSystem, ResetEdge};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Integrator {
    /// Classical fixed-step Runge–Kutta with step `dt_max`.
    Rk4,
    /// Dormand–Prince 5(4) with error control.
    Rk45 { atol: f64, rtol: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt_max: f64,
    pub integrator: Integrator,
    /// Located events satisfy `|h_e| <= event_tol`.
    pub event_tol: f64,
    /// Zeno is reported when more than `max_jumps` jumps fall in a window of
    /// length `min_dwell`.
    pub max_jumps: usize,
    pub min_dwell: f64,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 10.0,
            dt_max: 0.05,
            integrator: Integrator::Rk45 { atol: 1e-10, rtol: 1e-10 },
            event_tol: 1e-9,
            max_jumps: 20,
            min_dwell: 0.05,
            max_steps: 5_000_000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown mode {0}")]
    UnknownMode(VertexId),
    #[error("start point {x:?} is not in the active set of mode {mode}")]
    NotActive { mode: VertexId, x: Vec<f64> },
    #[error("nondeterminism at t={t} in mode {mode}: guards {edges:?} are enabled together")]
    Determinism { t: f64, mode: VertexId, edges: Vec<EdgeId> },
    #[error("state left the active set of mode {mode} at t={t}; last valid state {last:?}")]
    LeftActive { mode: VertexId, t: f64, last: Vec<f64> },
    #[error("reset of edge {edge} at t={t} failed: {detail}")]
    Reset { edge: EdgeId, t: f64, detail: String },
    #[error("step size underflow at t={t} in mode {mode}: {detail}")]
    StepUnderflow { mode: VertexId, t: f64, detail: String },
    #[error("step budget of {0} exhausted")]
    StepBudget(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("invalid time trajectory: {0}")]
    Trajectory(String),
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("parse error: {0}")]
    Parse(String),
}

// ------------------------------------------------------------- trajectories

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Open,
    Closed,
}

/// Times `τ_0 <= τ_1 <= ... <= τ_N`; interval `j` is `[τ_j, τ_{j+1}]`, except
/// that the last one excludes `τ_N` when the endpoint is open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory", into = "RawTrajectory")]
pub struct TimeTrajectory {
    times: Vec<f64>,
    endpoint: Endpoint,
}

#[derive(Serialize, Deserialize)]
struct RawTrajectory {
    times: Vec<serde_json::Value>,
    endpoint: Endpoint,
}

impl TryFrom<RawTrajectory> for TimeTrajectory {
    type Error = TraceError;

    fn try_from(raw: RawTrajectory) -> Result<Self, TraceError> {
        let times = raw
            .times
            .iter()
            .map(|v| match v {
                serde_json::Value::String(s) if s == "inf" => Ok(f64::INFINITY),
                other => other.as_f64().ok_or_else(|| TraceError::Parse(format!("bad time {other}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        TimeTrajectory::new(times, raw.endpoint)
    }
}

impl From<TimeTrajectory> for RawTrajectory {
    fn from(t: TimeTrajectory) -> Self {
        let times = t
            .times
            .iter()
            .map(|&v| if v.is_infinite() { serde_json::Value::from("inf") } else { serde_json::Value::from(v) })
            .collect();
        RawTrajectory { times, endpoint: t.endpoint }
    }
}

impl TimeTrajectory {
    /// An infinite stop time forces an open endpoint; a degenerate last
    /// interval forces a closed one.
    pub fn new(times: Vec<f64>, endpoint: Endpoint) -> Result<Self, TraceError> {
        let bad = |m: &str| Err(TraceError::Trajectory(m.to_string()));
        if times.len() < 2 {
            return bad("need at least two times");
        }
        if times.iter().any(|t| t.is_nan()) || times[..times.len() - 1].iter().any(|t| !t.is_finite()) {
            return bad("only the stop time may be infinite");
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return bad("times must be nondecreasing");
        }
        let n = times.len() - 1;
        if times[n] == f64::INFINITY && endpoint == Endpoint::Closed {
            return bad("a closed endpoint needs a finite stop time");
        }
        let endpoint = if times[n] == times[n - 1] { Endpoint::Closed } else { endpoint };
        Ok(TimeTrajectory { times, endpoint })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn stop(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.times[1..self.times.len() - 1]
    }

    pub fn interval_contains(&self, j: usize, t: f64) -> bool {
        let n = self.intervals();
        let (a, b) = (self.times[j], self.times[j + 1]);
        if j + 1 < n || self.endpoint == Endpoint::Closed {
            a <= t && t <= b
        } else {
            a <= t && t < b
        }
    }

    /// Indices of the intervals containing `t`.
    pub fn point_set(&self, t: f64) -> BTreeSet<usize> {
        (0..self.intervals()).filter(|&j| self.interval_contains(j, t)).collect()
    }
}

/// Insert extra times into `tau`. Returns the refinement and the index map
/// `k` sending `τ_j` to its position in the refinement. Extra times equal to
/// an existing time are ignored.
pub fn refine_trajectory(tau: &TimeTrajectory, extra: &[f64]) -> Result<(TimeTrajectory, Vec<usize>), TraceError> {
    let mut ex: Vec<f64> = Vec::new();
    for &e in extra {
        if !(e >= tau.start() && e <= tau.stop()) || !e.is_finite() {
            return Err(TraceError::Trajectory(format!("extra time {e} outside [{}, {}]", tau.start(), tau.stop())));
        }
        if !tau.times.contains(&e) {
            ex.push(e);
        }
    }
    ex.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ex.dedup();
    let mut out = Vec::with_capacity(tau.times.len() + ex.len());
    let mut k = Vec::with_capacity(tau.times.len());
    let mut p = 0;
    for &t in &tau.times {
        while p < ex.len() && ex[p] < t {
            out.push(ex[p]);
            p += 1;
        }
        out.push(t);
        k.push(out.len() - 1);
    }
    Ok((TimeTrajectory::new(out, tau.endpoint)?, k))
}

/// Interval of the coarse trajectory that contains interval `i` of a
/// refinement with index map `k`.
pub fn refined_interval_image(k: &[usize], i: usize) -> usize {
    k.windows(2).position(|w| w[0] <= i && i < w[1]).unwrap_or(k.len().saturating_sub(2))
}

// ------------------------------------------------------------------- traces

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub mode: VertexId,
    pub samples: Vec<Sample>,
}

impl Segment {
    pub fn start(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn end(&self) -> &Sample {
        &self.samples[self.samples.len() - 1]
    }

    /// Linear interpolation between stored samples; `None` outside the segment.
    pub fn state_at(&self, t: f64) -> Option<Vec<f64>> {
        let s = &self.samples;
        if t < s[0].t || t > s[s.len() - 1].t {
            return None;
        }
        let i = s.partition_point(|p| p.t < t);
        if i < s.len() && s[i].t == t {
            return Some(s[i].x.clone());
        }
        let (a, b) = (&s[i - 1], &s[i]);
        let w = (t - a.t) / (b.t - a.t);
        Some(lerp(&a.x, &b.x, w))
    }
}

fn lerp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p + w * (q - p)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpKind {
    Edge(EdgeId),
    /// A jump along a vertex viewed as an edge; the state does not change.
    Trivial(VertexId),
    /// Edge not recorded (traces read back from CSV).
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub kind: JumpKind,
    pub time: f64,
    pub pre: HybridPoint,
    pub post: HybridPoint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub finite_blocked: bool,
    pub horizon_truncated: bool,
    pub zeno_detected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub trajectory: TimeTrajectory,
    pub segments: Vec<Segment>,
    pub jumps: Vec<Jump>,
    pub classification: Classification,
}

impl ExecutionTrace {
    pub fn stop_time(&self) -> f64 {
        self.trajectory.stop()
    }

    pub fn final_point(&self) -> HybridPoint {
        let seg = &self.segments[self.segments.len() - 1];
        HybridPoint { mode: seg.mode.clone(), x: seg.end().x.clone() }
    }

    /// Points of the execution at time `t`, one per interval containing it.
    pub fn points_at(&self, t: f64) -> Vec<HybridPoint> {
        self.trajectory
            .point_set(t)
            .into_iter()
            .filter_map(|j| {
                let seg = &self.segments[j];
                seg.state_at(t).map(|x| HybridPoint { mode: seg.mode.clone(), x })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let t: ExecutionTrace = serde_json::from_str(text).map_err(|e| TraceError::Parse(e.to_string()))?;
        t.check_shape()?;
        Ok(t)
    }

    fn check_shape(&self) -> Result<(), TraceError> {
        let n = self.trajectory.intervals();
        if self.segments.len() != n || self.jumps.len() + 1 != n {
            return Err(TraceError::Invalid(format!(
                "{} intervals, {} segments, {} jumps",
                n,
                self.segments.len(),
                self.jumps.len()
            )));
        }
        if self.segments.iter().any(|s| s.samples.is_empty()) {
            return Err(TraceError::Invalid("empty segment".into()));
        }
        Ok(())
    }

    /// CSV with header `t,mode,jump_index,x0,...`. The rows at a jump appear
    /// twice, once for the pre-state and once for the post-state.
    pub fn to_csv(&self) -> String {
        let width = self.segments.iter().flat_map(|s| s.samples.iter().map(|p| p.x.len())).max().unwrap_or(0);
        let mut w = csv::WriterBuilder::new().flexible(false).from_writer(Vec::new());
        let mut header = vec!["t".to_string(), "mode".to_string(), "jump_index".to_string()];
        header.extend((0..width).map(|i| format!("x{i}")));
        w.write_record(&header).expect("in-memory csv");
        for (j, seg) in self.segments.iter().enumerate() {
            for s in &seg.samples {
                let mut row = vec![fmt_num(s.t), seg.mode.to_string(), j.to_string()];
                row.extend((0..width).map(|i| s.x.get(i).map(|v| fmt_num(*v)).unwrap_or_default()));
                w.write_record(&row).expect("in-memory csv");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    /// Read a CSV trace. Jump edges are not stored in CSV and come back as
    /// [`JumpKind::Unlabeled`]; the classification is not stored either.
    pub fn from_csv(text: &str) -> Result<Self, TraceError> {
        let perr = |e: &dyn std::fmt::Display| TraceError::Parse(e.to_string());
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| perr(&e))?.clone();
        if header.len() < 3 || &header[0] != "t" || &header[1] != "mode" || &header[2] != "jump_index" {
            return Err(TraceError::Parse("header must start with t,mode,jump_index".into()));
        }
        let mut segments: Vec<Segment> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| perr(&e))?;
            let t: f64 = rec[0].parse().map_err(|e| perr(&e))?;
            let j: usize = rec[2].parse().map_err(|e| perr(&e))?;
            let x = (3..rec.len())
                .filter(|&i| !rec[i].is_empty())
                .map(|i| rec[i].parse::<f64>().map_err(|e| perr(&e)))
                .collect::<Result<Vec<_>, _>>()?;
            if j == segments.len() {
                segments.push(Segment { mode: VertexId::new(&rec[1]), samples: Vec::new() });
            } else if j + 1 != segments.len() {
                return Err(TraceError::Parse(format!("jump_index {j} out of order")));
            }
            segments[j].samples.push(Sample { t, x });
        }
        if segments.is_empty() {
            return Err(TraceError::Parse("no rows".into()));
        }
        let mut times = vec![segments[0].start().t];
        let mut jumps = Vec::new();
        for w in segments.windows(2) {
            let (a, b) = (w[0].end(), w[1].start());
            times.push(b.t);
            jumps.push(Jump {
                kind: JumpKind::Unlabeled,
                time: b.t,
                pre: HybridPoint { mode: w[0].mode.clone(), x: a.x.clone() },
                post: HybridPoint { mode: w[1].mode.clone(), x: b.x.clone() },
            });
        }
        times.push(segments[segments.len() - 1].end().t);
        let trajectory = TimeTrajectory::new(times, Endpoint::Closed)?;
        Ok(ExecutionTrace { trajectory, segments, jumps, classification: Classification::default() })
    }
}

// --------------------------------------------------------------- simulation

enum SegmentEnd {
    Horizon,
    Blocked,
    Jump { edge: usize, t: f64, pre: Vec<f64> },
}

struct Sim<'a> {
    h: &'a HybridSystem,
    cfg: &'a SimConfig,
    mtol: f64,
    steps: usize,
}

/// Simulate from `start` until the horizon, a blocked state, or detected
/// Zeno accumulation.
pub fn simulate(h: &HybridSystem, start: &HybridPoint, cfg: &SimConfig) -> Result<ExecutionTrace, SimError> {
    if !(cfg.horizon >= 0.0) || !(cfg.dt_max > 0.0) || !(cfg.event_tol > 0.0) {
        return Err(SimError::Config("horizon must be >= 0, dt_max and event_tol > 0".into()));
    }
    let b = h.bound();
    let mut sim = Sim { h: &b, cfg, mtol: b.eq_tol().max(cfg.event_tol), steps: 0 };
    sim.run(start)
}

fn holds(p: &Predicate, x: &[f64], eq_tol: f64) -> bool {
    p.holds(x, &NO_PARAMS, eq_tol).unwrap_or(false)
}

fn holds_relaxed(p: &Predicate, x: &[f64], tol: f64) -> bool {
    p.holds_within(x, &NO_PARAMS, tol)
}

impl<'a> Sim<'a> {
    fn run(&mut self, start: &HybridPoint) -> Result<ExecutionTrace, SimError> {
        let h = self.h;
        let m = h.mode(&start.mode).ok_or_else(|| SimError::UnknownMode(start.mode.clone()))?;
        if start.x.len() != m.dim || !holds_relaxed(&m.active, &start.x, self.mtol) {
            return Err(SimError::NotActive { mode: start.mode.clone(), x: start.x.clone() });
        }
        let mut mode = start.mode.clone();
        let mut x = start.x.clone();
        let mut t = 0.0;
        let mut times = vec![0.0];
        let mut segments = Vec::new();
        let mut jumps = Vec::new();
        let mut recent: VecDeque<f64> = VecDeque::new();
        let mut class = Classification::default();
        loop {
            let mut seg = Segment { mode: mode.clone(), samples: vec![Sample { t, x: x.clone() }] };
            let outs: Vec<(&EdgeId, &ResetEdge)> = h.out_edges(&mode).collect();
            let end = self.run_segment(&mode, &outs, &mut seg)?;
            match end {
                SegmentEnd::Horizon | SegmentEnd::Blocked => {
                    if matches!(end, SegmentEnd::Horizon) {
                        class.horizon_truncated = true;
                    } else {
                        class.finite_blocked = true;
                    }
                    times.push(seg.end().t);
                    segments.push(seg);
                    break;
                }
                SegmentEnd::Jump { edge, t: tj, pre } => {
                    let (eid, e) = outs[edge];
                    let post = e.reset.eval(&pre, &NO_PARAMS).map_err(|err| SimError::Reset {
                        edge: eid.clone(),
                        t: tj,
                        detail: err.to_string(),
                    })?;
                    let tm = h.mode(&e.tgt).expect("edge target exists");
                    if !holds_relaxed(&tm.active, &post, self.mtol) {
                        return Err(SimError::Reset {
                            edge: eid.clone(),
                            t: tj,
                            detail: format!("image {post:?} is outside the active set of {}", e.tgt),
                        });
                    }
                    times.push(tj);
                    segments.push(seg);
                    jumps.push(Jump {
                        kind: JumpKind::Edge(eid.clone()),
                        time: tj,
                        pre: HybridPoint { mode: mode.clone(), x: pre },
                        post: HybridPoint { mode: e.tgt.clone(), x: post.clone() },
                    });
                    mode = e.tgt.clone();
                    x = post;
                    t = tj;
                    recent.push_back(tj);
                    while recent.front().is_some_and(|&f| f < tj - self.cfg.min_dwell) {
                        recent.pop_front();
                    }
                    if recent.len() > self.cfg.max_jumps {
                        class.zeno_detected = true;
                        segments.push(Segment { mode: mode.clone(), samples: vec![Sample { t, x: x.clone() }] });
                        times.push(t);
                        break;
                    }
                }
            }
        }
        let endpoint = if class.zeno_detected { Endpoint::Open } else { Endpoint::Closed };
        let trajectory = TimeTrajectory::new(times, endpoint).expect("simulated times are valid");
        Ok(ExecutionTrace { trajectory, segments, jumps, classification: class })
    }

    fn enabled(&self, outs: &[(&EdgeId, &ResetEdge)], x: &[f64], exact: bool) -> Vec<usize> {
        (0..outs.len())
            .filter(|&k| {
                let g = &outs[k].1.guard;
                if exact {
                    holds(g, x, self.h.eq_tol())
                } else {
                    holds_relaxed(g, x, self.mtol)
                }
            })
            .collect()
    }

    fn single(&self, mode: &VertexId, outs: &[(&EdgeId, &ResetEdge)], t: f64, en: Vec<usize>) -> Result<Option<usize>, SimError> {
        match en.len() {
            0 => Ok(None),
            1 => Ok(Some(en[0])),
            _ => Err(SimError::Determinism {
                t,
                mode: mode.clone(),
                edges: en.iter().map(|&k| outs[k].0.clone()).collect(),
            }),
        }
    }

    fn run_segment(
        &mut self,
        mode: &VertexId,
        outs: &[(&EdgeId, &ResetEdge)],
        seg: &mut Segment,
    ) -> Result<SegmentEnd, SimError> {
        let m = self.h.mode(mode).expect("mode exists");
        let Sample { t, x } = seg.start().clone();
        // A point already in a guard jumps before any flow.
        let en = self.enabled(outs, &x, true);
        if let Some(k) = self.single(mode, outs, t, en)? {
            return Ok(SegmentEnd::Jump { edge: k, t, pre: x });
        }
        if !holds(&m.flow, &x, self.h.eq_tol()) {
            let en = self.enabled(outs, &x, false);
            if let Some(k) = self.single(mode, outs, t, en)? {
                return Ok(SegmentEnd::Jump { edge: k, t, pre: x });
            }
            if !holds_relaxed(&m.flow, &x, self.mtol) {
                if holds_relaxed(&m.active, &x, self.mtol) {
                    return Ok(SegmentEnd::Blocked);
                }
                return Err(SimError::LeftActive { mode: mode.clone(), t, last: x });
            }
        }
        if t >= self.cfg.horizon {
            return Ok(SegmentEnd::Horizon);
        }
        if m.dim == 0 {
            seg.samples.push(Sample { t: self.cfg.horizon, x });
            return Ok(SegmentEnd::Horizon);
        }
        self.integrate(mode, &m.field, &m.flow, &m.active, outs, seg)
    }

    fn step(&self, field: &VectorExpr, x: &[f64], dt: f64) -> Result<(Vec<f64>, Option<f64>), ExprError> {
        match self.cfg.integrator {
            Integrator::Rk4 => Ok((rk4(field, x, dt)?, None)),
            Integrator::Rk45 { atol, rtol } => {
                let (y, err) = dopri(field, x, dt, atol, rtol)?;
                Ok((y, Some(err)))
            }
        }
    }

    fn integrate(
        &mut self,
        mode: &VertexId,
        field: &VectorExpr,
        flow: &Predicate,
        active: &Predicate,
        outs: &[(&EdgeId, &ResetEdge)],
        seg: &mut Segment,
    ) -> Result<SegmentEnd, SimError> {
        let horizon = self.cfg.horizon;
        let Sample { mut t, mut x } = seg.start().clone();
        let eval_events = |x: &[f64]| -> Vec<Option<f64>> {
            outs.iter().map(|(_, e)| e.event.eval(x, &NO_PARAMS).ok()).collect()
        };
        let mut hs = eval_events(&x);
        let mut dt = self.cfg.dt_max;
        loop {
            if t >= horizon {
                return Ok(SegmentEnd::Horizon);
            }
            self.steps += 1;
            if self.steps > self.cfg.max_steps {
                return Err(SimError::StepBudget(self.cfg.max_steps));
            }
            let to_h = horizon - t;
            let step = dt.min(self.cfg.dt_max).min(to_h);
            let min_step = 1e-14 * t.abs().max(1.0);
            let (xn, err) = match self.step(field, &x, step) {
                Ok(r) => r,
                Err(e) => {
                    dt = step * 0.25;
                    if dt < min_step {
                        return Err(SimError::StepUnderflow { mode: mode.clone(), t, detail: e.to_string() });
                    }
                    continue;
                }
            };
            if let Some(err) = err {
                if !(err <= 1.0) {
                    dt = step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    if dt < min_step {
                        return Err(SimError::StepUnderflow {
                            mode: mode.clone(),
                            t,
                            detail: "error control cannot be met".into(),
                        });
                    }
                    continue;
                }
            }
            let hn = eval_events(&xn);
            let mut best: Option<(f64, Vec<f64>, usize)> = None;
            for k in 0..outs.len() {
                let (Some(ho), Some(hv)) = (hs[k], hn[k]) else { continue };
                if !(ho > 0.0 && hv <= 0.0) {
                    continue;
                }
                if let Some((s, xs)) = self.locate_event(field, &x, step, &xn, &outs[k].1.event) {
                    let better = best.as_ref().map_or(true, |b| s < b.0);
                    if better && holds_relaxed(&outs[k].1.guard, &xs, self.mtol) {
                        best = Some((s, xs, k));
                    }
                }
            }
            let exit = if holds_relaxed(flow, &xn, self.mtol) {
                None
            } else {
                Some(self.locate_exit(field, &x, step, flow))
            };
            let take_event = match (&best, &exit) {
                (Some((s, _, _)), Some((se, _))) => *s <= se * (1.0 + 1e-9) + 1e-12,
                (Some(_), None) => true,
                _ => false,
            };
            if take_event {
                let (s, xs, k) = best.unwrap();
                let others: Vec<usize> =
                    (0..outs.len()).filter(|&j| j != k && holds(&outs[j].1.guard, &xs, self.h.eq_tol())).collect();
                let tj = t + s;
                if !others.is_empty() {
                    let mut edges = vec![outs[k].0.clone()];
                    edges.extend(others.iter().map(|&j| outs[j].0.clone()));
                    return Err(SimError::Determinism { t: tj, mode: mode.clone(), edges });
                }
                seg.samples.push(Sample { t: tj, x: xs.clone() });
                return Ok(SegmentEnd::Jump { edge: k, t: tj, pre: xs });
            }
            if let Some((se, xe)) = exit {
                let te = t + se;
                seg.samples.push(Sample { t: te, x: xe.clone() });
                let en = self.enabled(outs, &xe, false);
                if let Some(k) = self.single(mode, outs, te, en)? {
                    return Ok(SegmentEnd::Jump { edge: k, t: te, pre: xe });
                }
                if holds_relaxed(active, &xe, self.mtol) {
                    return Ok(SegmentEnd::Blocked);
                }
                return Err(SimError::LeftActive { mode: mode.clone(), t: te, last: xe });
            }
            t = if step >= to_h { horizon } else { t + step };
            x = xn;
            hs = hn;
            seg.samples.push(Sample { t, x: x.clone() });
            dt = match err {
                Some(e) if e > 0.0 => step * (0.9 * e.powf(-0.2)).clamp(0.2, 5.0),
                Some(_) => step * 5.0,
                None => self.cfg.dt_max,
            };
        }
    }

    /// Bisect on the step length until `|h| <= event_tol`.
    fn locate_event(&self, field: &VectorExpr, x: &[f64], step: f64, xn: &[f64], h: &Expr) -> Option<(f64, Vec<f64>)> {
        let tol = self.cfg.event_tol;
        let ev = |y: &[f64]| h.eval(y, &NO_PARAMS).ok();
        let (mut lo, mut hi) = (0.0, step);
        let mut x_hi = xn.to_vec();
        for _ in 0..200 {
            if ev(&x_hi).is_some_and(|v| v.abs() <= tol) {
                return Some((hi, x_hi));
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let xm = self.step(field, x, mid).ok()?.0;
            match ev(&xm) {
                Some(v) if v.abs() <= tol => return Some((mid, xm)),
                Some(v) if v > 0.0 => lo = mid,
                _ => {
                    hi = mid;
                    x_hi = xm;
                }
            }
        }
        Some((hi, x_hi))
    }

    /// Last point still in the (relaxed) flow set within one step.
    fn locate_exit(&self, field: &VectorExpr, x: &[f64], step: f64, flow: &Predicate) -> (f64, Vec<f64>) {
        let (mut lo, mut hi) = (0.0, step);
        let mut x_lo = x.to_vec();
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            match self.step(field, x, mid) {
                Ok((xm, _)) if holds_relaxed(flow, &xm, self.mtol) => {
                    lo = mid;
                    x_lo = xm;
                }
                _ => hi = mid,
            }
        }
        (lo, x_lo)
    }
}

/// Flow of a parameter-free field for `duration`, ignoring guards and flow sets.
pub fn flow_for(field: &VectorExpr, x: &[f64], duration: f64, cfg: &SimConfig) -> Result<Vec<f64>, ExprError> {
    let mut x = x.to_vec();
    let mut t = 0.0;
    let mut dt = cfg.dt_max;
    while t < duration {
        let step = dt.min(cfg.dt_max).min(duration - t);
        match cfg.integrator {
            Integrator::Rk4 => {
                x = rk4(field, &x, step)?;
                t += step;
            }
            Integrator::Rk45 { atol, rtol } => {
                let (y, err) = dopri(field, &x, step, atol, rtol)?;
                if !(err <= 1.0) {
                    dt = step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    if dt < 1e-14 * t.max(1.0) {
                        return Err(ExprError::NonFinite("integration step"));
                    }
                    continue;
                }
                x = y;
                t = if step >= duration - t { duration } else { t + step };
                dt = if err > 0.0 { step * (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) } else { step * 5.0 };
            }
        }
    }
    Ok(x)
}

fn axpy(x: &[f64], h: f64, ks: &[(&[f64], f64)]) -> Vec<f64> {
    let mut out = x.to_vec();
    for (k, c) in ks {
        if *c != 0.0 {
            for i in 0..out.len() {
                out[i] += h * c * k[i];
            }
        }
    }
    out
}

fn rk4(f: &VectorExpr, x: &[f64], h: f64) -> Result<Vec<f64>, ExprError> {
    let p = &NO_PARAMS;
    let k1 = f.eval(x, p)?;
    let k2 = f.eval(&axpy(x, h, &[(&k1, 0.5)]), p)?;
    let k3 = f.eval(&axpy(x, h, &[(&k2, 0.5)]), p)?;
    let k4 = f.eval(&axpy(x, h, &[(&k3, 1.0)]), p)?;
    Ok(axpy(x, h, &[(&k1, 1.0 / 6.0), (&k2, 1.0 / 3.0), (&k3, 1.0 / 3.0), (&k4, 1.0 / 6.0)]))
}

/// One Dormand–Prince step: fifth-order solution and scaled error norm.
fn dopri(f: &VectorExpr, x: &[f64], h: f64, atol: f64, rtol: f64) -> Result<(Vec<f64>, f64), ExprError> {
    let p = &NO_PARAMS;
    let k1 = f.eval(x, p)?;
    let k2 = f.eval(&axpy(x, h, &[(&k1, 1.0 / 5.0)]), p)?;
    let k3 = f.eval(&axpy(x, h, &[(&k1, 3.0 / 40.0), (&k2, 9.0 / 40.0)]), p)?;
    let k4 = f.eval(&axpy(x, h, &[(&k1, 44.0 / 45.0), (&k2, -56.0 / 15.0), (&k3, 32.0 / 9.0)]), p)?;
    let k5 = f.eval(
        &axpy(x, h, &[(&k1, 19372.0 / 6561.0), (&k2, -25360.0 / 2187.0), (&k3, 64448.0 / 6561.0), (&k4, -212.0 / 729.0)]),
        p,
    )?;
    let k6 = f.eval(
        &axpy(
            x,
            h,
            &[
                (&k1, 9017.0 / 3168.0),
                (&k2, -355.0 / 33.0),
                (&k3, 46732.0 / 5247.0),
                (&k4, 49.0 / 176.0),
                (&k5, -5103.0 / 18656.0),
            ],
        ),
        p,
    )?;
    let y = axpy(
        x,
        h,
        &[(&k1, 35.0 / 384.0), (&k3, 500.0 / 1113.0), (&k4, 125.0 / 192.0), (&k5, -2187.0 / 6784.0), (&k6, 11.0 / 84.0)],
    );
    let k7 = f.eval(&y, p)?;
    let e = [
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ];
    let ks = [&k1, &k2, &k3, &k4, &k5, &k6, &k7];
    let mut err: f64 = 0.0;
    for i in 0..x.len() {
        let d: f64 = h * ks.iter().zip(e).map(|(k, c)| c * k[i]).sum::<f64>();
        let scale = atol + rtol * x[i].abs().max(y[i].abs());
        err = err.max(d.abs() / scale);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ExprError::NonFinite("integration step"));
    }
    Ok((y, err))
}

// --------------------------------------------------------- trace operations

/// `a` is a prefix of `b`: same modes and jumps on the shared intervals and
/// states within `tol` at every sample time the two traces share.
pub fn is_prefix(a: &ExecutionTrace, b: &ExecutionTrace, tol: f64) -> bool {
    let n = a.segments.len();
    if n > b.segments.len() {
        return false;
    }
    for j in 0..n {
        if a.segments[j].mode != b.segments[j].mode {
            return false;
        }
        if (a.trajectory.times[j] - b.trajectory.times[j]).abs() > tol {
            return false;
        }
        if j + 1 < n {
            let (ja, jb) = (&a.jumps[j], &b.jumps[j]);
            if ja.kind != jb.kind || (ja.time - jb.time).abs() > tol {
                return false;
            }
        }
        let sb = &b.segments[j].samples;
        for s in &a.segments[j].samples {
            let i = sb.partition_point(|p| p.t < s.t - 1e-12);
            if i < sb.len() && (sb[i].t - s.t).abs() <= 1e-12 {
                let d = crate::system::euclid(&sb[i].x, &s.x);
                if !(d <= tol) {
                    return false;
                }
            }
        }
    }
    b.trajectory.times[n] >= a.stop_time() - tol
}

/// Merge segments across trivial jumps.
pub fn fundamentalize(t: &ExecutionTrace) -> ExecutionTrace {
    let mut segments = vec![t.segments[0].clone()];
    let mut jumps = Vec::new();
    let mut times = vec![t.trajectory.times[0]];
    for (j, jump) in t.jumps.iter().enumerate() {
        let next = &t.segments[j + 1];
        if let JumpKind::Trivial(_) = jump.kind {
            let cur = segments.last_mut().unwrap();
            let skip = usize::from(cur.end().t == next.start().t && cur.end().x == next.start().x);
            cur.samples.extend(next.samples.iter().skip(skip).cloned());
        } else {
            times.push(t.trajectory.times[j + 1]);
            jumps.push(jump.clone());
            segments.push(next.clone());
        }
    }
    times.push(t.stop_time());
    let trajectory = TimeTrajectory::new(times, t.trajectory.endpoint).expect("subsequence of valid times");
    ExecutionTrace { trajectory, segments, jumps, classification: t.classification }
}

fn map_point(a: &Semiconjugacy, p: &HybridPoint) -> Result<HybridPoint, TraceError> {
    Ok(a.apply(p)?)
}

/// Image of a trace under a semiconjugacy. Jumps along edges sent to
/// vertices become trivial jumps.
pub fn push_trace(a: &Semiconjugacy, t: &ExecutionTrace) -> Result<ExecutionTrace, TraceError> {
    let (maps, _) = a.bound_maps();
    let mut segments = Vec::with_capacity(t.segments.len());
    for seg in &t.segments {
        let f = maps.get(&seg.mode).ok_or_else(|| TraceError::Invalid(format!("mode {} not in domain", seg.mode)))?;
        let samples = seg
            .samples
            .iter()
            .map(|s| Ok(Sample { t: s.t, x: f.eval(&s.x, &NO_PARAMS)? }))
            .collect::<Result<Vec<_>, TraceError>>()?;
        segments.push(Segment { mode: a.vertex_image(&seg.mode).clone(), samples });
    }
    let mut jumps = Vec::with_capacity(t.jumps.len());
    for j in &t.jumps {
        let kind = match &j.kind {
            JumpKind::Edge(e) => match a.graph_map().map_edge(e) {
                Some(GenEdge::Edge(e2)) => JumpKind::Edge(e2.clone()),
                Some(GenEdge::Vertex(w)) => JumpKind::Trivial(w.clone()),
                None => return Err(TraceError::Invalid(format!("edge {e} not in domain"))),
            },
            JumpKind::Trivial(v) => JumpKind::Trivial(a.vertex_image(v).clone()),
            JumpKind::Unlabeled => JumpKind::Unlabeled,
        };
        jumps.push(Jump { kind, time: j.time, pre: map_point(a, &j.pre)?, post: map_point(a, &j.post)? });
    }
    Ok(ExecutionTrace { trajectory: t.trajectory.clone(), segments, jumps, classification: t.classification })
}

/// Lift an execution of the codomain of a subdivision to its domain.
pub fn pullback_execution(sub: &Subdivision, t: &ExecutionTrace) -> Result<ExecutionTrace, TraceError> {
    match &sub.kind {
        SubdivisionKind::Identity => Ok(t.clone()),
        SubdivisionKind::Slice { mode, h, minus, plus, up, down, renames } => {
            let side = |x: &[f64]| -> Result<Side, TraceError> {
                Ok(if h.eval(x, &NO_PARAMS)? <= 0.0 { Side::Minus } else { Side::Plus })
            };
            let side_mode = |s: Side| if s == Side::Minus { minus.clone() } else { plus.clone() };
            let mut segments: Vec<Segment> = Vec::new();
            let mut jumps: Vec<Jump> = Vec::new();
            let mut times = vec![t.trajectory.times[0]];
            let mut last_side: Option<Side> = None;
            for (j, seg) in t.segments.iter().enumerate() {
                let first = if &seg.mode == mode { Some(side(&seg.start().x)?) } else { None };
                if j > 0 {
                    let mut jump = t.jumps[j - 1].clone();
                    if last_side.is_some() || first.is_some() {
                        if let JumpKind::Edge(e) = &jump.kind {
                            let key = (e.clone(), last_side, first);
                            let new = renames.get(&key).ok_or_else(|| {
                                TraceError::Invalid(format!("no lifted edge for {e} ({last_side:?}, {first:?})"))
                            })?;
                            jump.kind = JumpKind::Edge(new.clone());
                        }
                    }
                    if let Some(s) = last_side {
                        jump.pre.mode = side_mode(s);
                    }
                    if let Some(s) = first {
                        jump.post.mode = side_mode(s);
                    }
                    times.push(t.trajectory.times[j]);
                    jumps.push(jump);
                }
                let Some(first) = first else {
                    segments.push(seg.clone());
                    last_side = None;
                    continue;
                };
                let mut cur = first;
                let mut piece = vec![seg.samples[0].clone()];
                for w in seg.samples.windows(2) {
                    let s_new = side(&w[1].x)?;
                    if s_new != cur {
                        let (lo_t, hi_t) = (w[0].t, w[1].t);
                        let at = |tt: f64| lerp(&w[0].x, &w[1].x, if hi_t > lo_t { (tt - lo_t) / (hi_t - lo_t) } else { 1.0 });
                        let (mut lo, mut hi) = (lo_t, hi_t);
                        for _ in 0..200 {
                            let mid = 0.5 * (lo + hi);
                            if mid <= lo || mid >= hi {
                                break;
                            }
                            if side(&at(mid))? == cur {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        let xs = at(hi);
                        piece.push(Sample { t: hi, x: xs.clone() });
                        segments.push(Segment { mode: side_mode(cur), samples: std::mem::take(&mut piece) });
                        let edge = if cur == Side::Minus { up.clone() } else { down.clone() };
                        times.push(hi);
                        jumps.push(Jump {
                            kind: JumpKind::Edge(edge),
                            time: hi,
                            pre: HybridPoint { mode: side_mode(cur), x: xs.clone() },
                            post: HybridPoint { mode: side_mode(s_new), x: xs.clone() },
                        });
                        piece.push(Sample { t: hi, x: xs });
                        cur = s_new;
                    }
                    piece.push(w[1].clone());
                }
                segments.push(Segment { mode: side_mode(cur), samples: piece });
                last_side = Some(cur);
            }
            times.push(t.stop_time());
            let trajectory = TimeTrajectory::new(times, t.trajectory.endpoint)?;
            Ok(ExecutionTrace { trajectory, segments, jumps, classification: t.classification })
        }
        SubdivisionKind::ResetFactor { edge, f, u, ef, eg } => {
            let mut segments = vec![t.segments[0].clone()];
            let mut jumps = Vec::new();
            let mut times = vec![t.trajectory.times[0]];
            for (j, jump) in t.jumps.iter().enumerate() {
                times.push(jump.time);
                if jump.kind == JumpKind::Edge(edge.clone()) {
                    let y = f.eval(&jump.pre.x, &NO_PARAMS)?;
                    let mid = HybridPoint { mode: u.clone(), x: y.clone() };
                    jumps.push(Jump { kind: JumpKind::Edge(ef.clone()), time: jump.time, pre: jump.pre.clone(), post: mid.clone() });
                    segments.push(Segment { mode: u.clone(), samples: vec![Sample { t: jump.time, x: y }] });
                    times.push(jump.time);
                    jumps.push(Jump { kind: JumpKind::Edge(eg.clone()), time: jump.time, pre: mid, post: jump.post.clone() });
                } else {
                    jumps.push(jump.clone());
                }
                segments.push(t.segments[j + 1].clone());
            }
            times.push(t.stop_time());
            let trajectory = TimeTrajectory::new(times, t.trajectory.endpoint)?;
            Ok(ExecutionTrace { trajectory, segments, jumps, classification: t.classification })
        }
    }
}

/// Largest distance between two traces on the same modes, over the union of
/// their sample times (linear interpolation in between). Infinite when the
/// segment structure differs.
pub fn trace_distance(a: &ExecutionTrace, b: &ExecutionTrace) -> f64 {
    if a.segments.len() != b.segments.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (sa, sb) in a.segments.iter().zip(&b.segments) {
        if sa.mode != sb.mode {
            return f64::INFINITY;
        }
        let lo = sa.start().t.max(sb.start().t);
        let hi = sa.end().t.min(sb.end().t);
        let ts = sa.samples.iter().chain(&sb.samples).map(|s| s.t).filter(|&t| t >= lo && t <= hi);
        for t in ts {
            match (sa.state_at(t), sb.state_at(t)) {
                (Some(p), Some(q)) => worst = worst.max(crate::system::euclid(&p, &q)),
                _ => return f64::INFINITY,
            }
        }
        let span = (sa.start().t - sb.start().t).abs().max((sa.end().t - sb.end().t).abs());
        worst = worst.max(span);
    }
    worst
}
