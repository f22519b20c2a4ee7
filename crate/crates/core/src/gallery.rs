//! Worked examples as parameterized constructors.
//!
//! Coordinates are 0-indexed: the pair `(x_1, x_2)` of the rocking block
//! and the hopper is `(x0, x1)` here.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::analysis::Region;
use crate::compose::{DirectedSystem, TemplateAnchorPair};
use crate::expr::Params;
use crate::morphism::{semiconjugacy_from_strings, Semiconjugacy};
use crate::system::{HybridSystem, Mode, ResetEdge};
use crate::graph::{EdgeId, VertexId};

/// Equality tolerance for systems living on a circle in the plane.
pub const CIRCLE_EQ_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("parameter {name} = {value} is outside {range}")]
    Range { name: &'static str, value: f64, range: &'static str },
    #[error("unknown example {0}")]
    Unknown(String),
}

fn sys(
    modes: Vec<(&str, Mode)>,
    edges: Vec<(&str, ResetEdge)>,
    params: &[(&str, f64)],
) -> HybridSystem {
    let params: Params = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    HybridSystem::from_parts(
        modes.into_iter().map(|(v, m)| (VertexId::new(v), m)),
        edges.into_iter().map(|(e, r)| (EdgeId::new(e), r)),
        params,
    )
    .expect("gallery system is well formed")
}

fn mode(dim: usize, field: &[&str], active: &str, flow: &str) -> Mode {
    Mode::parse(dim, field, active, flow).expect("gallery mode parses")
}

fn edge(src: &str, tgt: &str, dim: usize, guard: &str, event: &str, reset: &[&str]) -> ResetEdge {
    ResetEdge::parse(src, tgt, dim, guard, event, reset).expect("gallery edge parses")
}

#[allow(clippy::type_complexity)]
fn map(
    dom: &Arc<HybridSystem>,
    cod: &Arc<HybridSystem>,
    vertices: &[(&str, &str)],
    edges: &[(&str, &str)],
    maps: &[(&str, &[&str])],
    inverses: &[(&str, &[&str])],
) -> Semiconjugacy {
    semiconjugacy_from_strings(dom.clone(), cod.clone(), vertices, edges, maps, inverses, Params::new())
        .expect("gallery map is well formed")
}

fn point_mode() -> Mode {
    mode(0, &[], "true", "true")
}

// ------------------------------------------------------------ rocking block

/// Rocking rectangular block: modes `L` and `R` (rocking about either
/// corner), `x0` the normalized angle and `x1` its rate; impacts keep a
/// fraction `r` of the angular velocity.
pub fn rocking_block(alpha: f64, r: f64) -> Result<HybridSystem, GalleryError> {
    if !(alpha > 0.0 && alpha < std::f64::consts::FRAC_PI_2) {
        return Err(GalleryError::Range { name: "alpha", value: alpha, range: "(0, pi/2)" });
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(GalleryError::Range { name: "r", value: r, range: "(0, 1]" });
    }
    let active = "0 <= x0 and x0 <= 1 and cos(a*(1-x0)) + (a*x1)^2/2 <= 1";
    let guard = format!("{active} and x0 == 0 and x1 <= 0");
    let flow = format!("{active} and not (x0 == 0 and x1 <= 0)");
    let m = || {
        mode(2, &["x1", "-(1/a)*sin(a*(1-x0))"], active, &flow).with_bounds(vec![(0.0, 1.0), (-2.0, 2.0)])
    };
    let e = |s, t| edge(s, t, 2, &guard, "x0", &["0", "-r*x1"]);
    Ok(sys(
        vec![("L", m()), ("R", m())],
        vec![("e_LR", e("L", "R")), ("e_RL", e("R", "L"))],
        &[("a", alpha), ("r", r)],
    ))
}

// ----------------------------------------------------------- vertical hopper

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HopperParams {
    pub k_t: f64,
    pub beta: f64,
    pub omega: f64,
}

impl Default for HopperParams {
    fn default() -> Self {
        HopperParams { k_t: 2.0, beta: 0.5, omega: 1.0 }
    }
}

impl HopperParams {
    /// Radius of the limit cycle, `k_t / (2 β ω²)`.
    pub fn radius(&self) -> f64 {
        self.k_t / (2.0 * self.beta * self.omega * self.omega)
    }

    fn check(&self) -> Result<(), GalleryError> {
        for (name, value) in [("k_t", self.k_t), ("beta", self.beta), ("omega", self.omega)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GalleryError::Range { name, value, range: "(0, inf)" });
            }
        }
        Ok(())
    }

    fn list(&self) -> [(&'static str, f64); 3] {
        [("k_t", self.k_t), ("beta", self.beta), ("omega", self.omega)]
    }
}

const HOP_FIELD: [&str; 2] = ["omega*x1", "k_t*x1/(omega*sqrt(x0^2+x1^2)) - omega*x0 - 2*beta*omega*x1"];
const HOP_ACTIVE: &str = "x0 <= 0 and x0^2 + x1^2 > 0";
const HOP_GUARD: &str = "x0 == 0 and x1 >= 0";
const HOP_FLOW: &str = "x0 <= 0 and x0^2 + x1^2 > 0 and not (x0 == 0 and x1 >= 0)";
const HOP_BOX: [(f64, f64); 2] = [(-5.0, 5.0), (-5.0, 5.0)];
const CIRCLE: &str = "x0^2 + x1^2 == 1";
const CIRCLE_BOX: [(f64, f64); 2] = [(-1.5, 1.5), (-1.5, 1.5)];
const RADIUS: &str = "k_t/(2*beta*omega^2)";

/// Every system and map of the vertical hopper example.
///
/// `circle` is `(S¹, f*X)`, a clockwise rotation at rate ω, and `circle2`
/// is its pushforward under the doubling map.
#[derive(Clone, Debug)]
pub struct HopperSuite {
    pub params: HopperParams,
    pub h_hop: Arc<HybridSystem>,
    pub k: Arc<HybridSystem>,
    pub l: Arc<HybridSystem>,
    pub c: Arc<HybridSystem>,
    pub s: Arc<HybridSystem>,
    pub circle: Arc<HybridSystem>,
    pub circle2: Arc<HybridSystem>,
    /// `(S¹, f*X) → L`, scaling by the cycle radius.
    pub f: Semiconjugacy,
    /// `K → L`, folding the second sheet by `x ↦ −x`.
    pub p: Semiconjugacy,
    /// `C → (S¹, f*X)`, gluing the two arcs.
    pub q: Semiconjugacy,
    /// `C → K`.
    pub e: Semiconjugacy,
    /// `K → H_hop`, the two-fold cover.
    pub cover: Semiconjugacy,
    /// `C → S`, the two-fold cover.
    pub t: Semiconjugacy,
    /// `S → H_hop`.
    pub g: Semiconjugacy,
    /// `S → (S¹, 2_* f*X)`.
    pub p_s: Semiconjugacy,
}

impl HopperSuite {
    pub fn systems(&self) -> Vec<(&'static str, &Arc<HybridSystem>)> {
        vec![
            ("H_hop", &self.h_hop),
            ("K", &self.k),
            ("L", &self.l),
            ("C", &self.c),
            ("S", &self.s),
            ("S1", &self.circle),
            ("S1_doubled", &self.circle2),
        ]
    }

    pub fn maps(&self) -> Vec<(&'static str, &Semiconjugacy)> {
        vec![
            ("f", &self.f),
            ("p", &self.p),
            ("q", &self.q),
            ("e", &self.e),
            ("s", &self.cover),
            ("t", &self.t),
            ("g", &self.g),
            ("p_S", &self.p_s),
        ]
    }

    /// The two commuting squares `f∘q = p∘e` and `g∘t = s∘e`, as
    /// (upper path, lower path) pairs of map lists applied right to left.
    pub fn squares(&self) -> [([&Semiconjugacy; 2], [&Semiconjugacy; 2]); 2] {
        [([&self.f, &self.q], [&self.p, &self.e]), ([&self.g, &self.t], [&self.cover, &self.e])]
    }

    /// `S¹ ← C → K`.
    pub fn pair_k(&self) -> TemplateAnchorPair {
        TemplateAnchorPair::new(self.q.clone(), self.e.clone()).expect("spans share the roof")
    }

    /// `(S¹, 2_* f*X) ← S → H_hop`.
    pub fn pair_hop(&self) -> TemplateAnchorPair {
        TemplateAnchorPair::new(self.p_s.clone(), self.g.clone()).expect("spans share the roof")
    }

    /// Annulus `lo ≤ ‖x‖ ≤ hi` as a region of `L`.
    pub fn annulus(&self, lo: f64, hi: f64) -> Region {
        Region::parse(&self.l, &[("v", &format!("min(x0^2 + x1^2 - {lo}^2, {hi}^2 - x0^2 - x1^2)"))])
            .expect("annulus margin parses")
    }
}

pub fn vertical_hopper_suite(hp: HopperParams) -> Result<HopperSuite, GalleryError> {
    hp.check()?;
    let ps = hp.list();
    let hop_mode = || mode(2, &HOP_FIELD, HOP_ACTIVE, HOP_FLOW).with_bounds(HOP_BOX.to_vec());
    let hop_edge = |s, t| edge(s, t, 2, HOP_GUARD, "-x0", &["0", "-x1"]);
    let h_hop = Arc::new(sys(vec![("v", hop_mode())], vec![("e", hop_edge("v", "v"))], &ps));
    let k = Arc::new(sys(
        vec![("v1", hop_mode()), ("v2", hop_mode())],
        vec![("e12", hop_edge("v1", "v2")), ("e21", hop_edge("v2", "v1"))],
        &ps,
    ));
    let l = Arc::new(sys(
        vec![("v", mode(2, &HOP_FIELD, "x0^2 + x1^2 > 0", "x0^2 + x1^2 > 0").with_bounds(HOP_BOX.to_vec()))],
        vec![],
        &ps,
    ));

    let rot = ["omega*x1", "-omega*x0"];
    let circ = |field: &[&str]| mode(2, field, CIRCLE, CIRCLE).with_bounds(CIRCLE_BOX.to_vec());
    let circle = Arc::new(sys(vec![("c", circ(&rot))], vec![], &ps).with_eq_tol(CIRCLE_EQ_TOL));
    let circle2 =
        Arc::new(sys(vec![("c", circ(&["2*omega*x1", "-2*omega*x0"]))], vec![], &ps).with_eq_tol(CIRCLE_EQ_TOL));

    let left = format!("{CIRCLE} and x0 <= 0");
    let right = format!("{CIRCLE} and x0 >= 0");
    let top = format!("{left} and x0 == 0 and x1 >= 0");
    let bottom = format!("{right} and x0 == 0 and x1 <= 0");
    let arc = |active: &str, guard: &str| {
        let flow = format!("{active} and not ({guard})");
        mode(2, &rot, active, &flow).with_bounds(CIRCLE_BOX.to_vec())
    };
    let c = Arc::new(
        sys(
            vec![("v1", arc(&left, &top)), ("v2", arc(&right, &bottom))],
            vec![
                ("e12", edge("v1", "v2", 2, &top, "-x0", &["x0", "x1"])),
                ("e21", edge("v2", "v1", 2, &bottom, "x0", &["x0", "x1"])),
            ],
            &ps,
        )
        .with_eq_tol(CIRCLE_EQ_TOL),
    );
    let s = Arc::new(
        sys(
            vec![("v", arc(&left, &top))],
            vec![("e", edge("v", "v", 2, &top, "-x0", &["-x0", "-x1"]))],
            &ps,
        )
        .with_eq_tol(CIRCLE_EQ_TOL),
    );

    let scale = [format!("{RADIUS}*x0"), format!("{RADIUS}*x1")];
    let scale: [&str; 2] = [&scale[0], &scale[1]];
    let neg_scale = [format!("-{RADIUS}*x0"), format!("-{RADIUS}*x1")];
    let neg_scale: [&str; 2] = [&neg_scale[0], &neg_scale[1]];
    let unscale = [format!("x0/({RADIUS})"), format!("x1/({RADIUS})")];
    let unscale: [&str; 2] = [&unscale[0], &unscale[1]];
    let neg_unscale = [format!("-x0/({RADIUS})"), format!("-x1/({RADIUS})")];
    let neg_unscale: [&str; 2] = [&neg_unscale[0], &neg_unscale[1]];
    let id: [&str; 2] = ["x0", "x1"];
    let neg: [&str; 2] = ["-x0", "-x1"];

    let f = map(&circle, &l, &[("c", "v")], &[], &[("c", &scale)], &[("c", &unscale)]);
    let p = map(&k, &l, &[("v1", "v"), ("v2", "v")], &[("e12", "v"), ("e21", "v")], &[("v1", &id), ("v2", &neg)], &[]);
    let q = map(&c, &circle, &[("v1", "c"), ("v2", "c")], &[("e12", "c"), ("e21", "c")], &[("v1", &id), ("v2", &id)], &[]);
    let e = map(
        &c,
        &k,
        &[("v1", "v1"), ("v2", "v2")],
        &[("e12", "e12"), ("e21", "e21")],
        &[("v1", &scale), ("v2", &neg_scale)],
        &[("v1", &unscale), ("v2", &neg_unscale)],
    );
    let cover = map(&k, &h_hop, &[("v1", "v"), ("v2", "v")], &[("e12", "e"), ("e21", "e")], &[("v1", &id), ("v2", &id)], &[]);
    let t = map(&c, &s, &[("v1", "v"), ("v2", "v")], &[("e12", "e"), ("e21", "e")], &[("v1", &id), ("v2", &neg)], &[]);
    let g = map(&s, &h_hop, &[("v", "v")], &[("e", "e")], &[("v", &scale)], &[("v", &unscale)]);
    let p_s = map(&s, &circle2, &[("v", "c")], &[("e", "c")], &[("v", &["x0^2 - x1^2", "2*x0*x1"])], &[]);

    Ok(HopperSuite { params: hp, h_hop, k, l, c, s, circle, circle2, f, p, q, e, cover, t, g, p_s })
}

// ------------------------------------------------------ directed systems

/// The pair `H: H|_v ⇝ (*, 0)` and `K: (*, 0) ⇝ K|_z`.
///
/// `H` jumps at once from any point of the line to a point; `K` flows
/// along `x' = x` on `[0, 1]` and leaves at `x = 1`. `K` starts at its
/// equilibrium `0`.
pub fn sequential_example_pair() -> (DirectedSystem, DirectedSystem) {
    let line = || mode(1, &["0"], "true", "false").with_bounds(vec![(-5.0, 5.0)]);
    let h = Arc::new(sys(
        vec![("v", line()), ("w", point_mode())],
        vec![("e", edge("v", "w", 1, "true", "1", &[]))],
        &[],
    ));
    let h_init = Arc::new(sys(vec![("v", line())], vec![], &[]));
    let star = Arc::new(HybridSystem::terminal());
    let init = map(&h_init, &h, &[("v", "v")], &[], &[("v", &["x0"])], &[("v", &["x0"])]);
    let fin = map(&star, &h, &[("*", "w")], &[], &[("*", &[])], &[("*", &[])]);
    let hd = DirectedSystem::new(init, fin).expect("H is directed");

    let y = || mode(1, &["x0"], "0 <= x0 and x0 <= 1", "0 <= x0 and x0 < 1").with_bounds(vec![(0.0, 1.0)]);
    let k = Arc::new(sys(
        vec![("y", y()), ("z", point_mode())],
        vec![("f", edge("y", "z", 1, "x0 == 1", "1 - x0", &[]))],
        &[],
    ));
    let k_fin = Arc::new(sys(vec![("z", point_mode())], vec![], &[]));
    let init = map(&star, &k, &[("*", "y")], &[], &[("*", &["0"])], &[("*", &[])]);
    let fin = map(&k_fin, &k, &[("z", "z")], &[], &[("z", &[])], &[("z", &[])]);
    let kd = DirectedSystem::new(init, fin).expect("K is directed");
    (hd, kd)
}

// ------------------------------------------------------------------ others

/// A line flowing into `0`, jumping onto a circle centred at `(0, 1)` that
/// descends along `−∇y`. Returns the system and the region
/// `(−1, 0.5] ∪ S¹`, which is not positively invariant.
pub fn trap_example() -> (HybridSystem, Region) {
    let circle = "x0^2 + (x1-1)^2 == 1";
    let h = sys(
        vec![
            (
                "v",
                mode(1, &["(x0+1)*(2-x0)"], "-1 <= x0 and x0 <= 2", "-1 <= x0 and x0 <= 2 and not x0 == 0")
                    .with_bounds(vec![(-1.0, 2.0)]),
            ),
            (
                "w",
                mode(2, &["(x1-1)*x0", "(x1-1)^2 - 1"], circle, circle).with_bounds(vec![(-1.5, 1.5), (-0.5, 2.5)]),
            ),
        ],
        vec![("e", edge("v", "w", 1, "x0 == 0", "-x0", &["1", "1"]))],
        &[],
    )
    .with_eq_tol(CIRCLE_EQ_TOL);
    let w = Region::parse(&h, &[("v", "min(x0 + 1, 0.5 - x0)"), ("w", "1")]).expect("region parses");
    (h, w)
}

/// Unit-circle rotation `(−x1, x0)` realized on a band in the plane.
pub fn circle_flow() -> HybridSystem {
    sys(vec![("c", mode(2, &["-x1", "x0"], CIRCLE, CIRCLE).with_bounds(CIRCLE_BOX.to_vec()))], vec![], &[])
        .with_eq_tol(CIRCLE_EQ_TOL)
}

/// The line `(ℝ, d/dt)`.
pub fn line_flow() -> HybridSystem {
    sys(vec![("v", mode(1, &["1"], "true", "true").with_bounds(vec![(-5.0, 5.0)]))], vec![], &[])
}

/// `v → w` over the line, cut at `0` with `F_v = (−∞, 0]`: a subdivision
/// of the line that is not deterministic, since `0` is both in `F_v` and
/// in the guard.
pub fn nondeterministic_subdivision() -> (Arc<HybridSystem>, Arc<HybridSystem>, Semiconjugacy) {
    let s = Arc::new(sys(
        vec![
            ("v", mode(1, &["1"], "x0 <= 0", "x0 <= 0").with_bounds(vec![(-5.0, 0.0)])),
            ("w", mode(1, &["1"], "x0 >= 0", "x0 >= 0").with_bounds(vec![(0.0, 5.0)])),
        ],
        vec![("e", edge("v", "w", 1, "x0 == 0", "-x0", &["x0"]))],
        &[],
    ));
    let line = Arc::new(line_flow());
    let p = map(&s, &line, &[("v", "v"), ("w", "v")], &[("e", "v")], &[("v", &["x0"]), ("w", &["x0"])], &[]);
    (s, line, p)
}

// ----------------------------------------------------------------- catalog

pub struct Entry {
    pub name: &'static str,
    pub about: &'static str,
    /// Parameter names and defaults.
    pub params: &'static [(&'static str, f64)],
}

const HOP: &[(&str, f64)] = &[("k_t", 2.0), ("beta", 0.5), ("omega", 1.0)];

pub const CATALOG: &[Entry] = &[
    Entry { name: "rocking_block", about: "rocking block, modes L and R", params: &[("alpha", 0.3), ("r", 0.5)] },
    Entry { name: "hopper", about: "vertical hopper H_hop", params: HOP },
    Entry { name: "hopper_double_cover", about: "two-sheeted cover K of the hopper", params: HOP },
    Entry { name: "hopper_smooth", about: "smooth system L on the punctured plane", params: HOP },
    Entry { name: "hopper_cut_circle", about: "circle cut into two arcs, C", params: HOP },
    Entry { name: "hopper_half_circle", about: "half circle with antipodal reset, S", params: HOP },
    Entry { name: "hopper_template", about: "circle template (S1, f*X)", params: HOP },
    Entry { name: "hopper_template_doubled", about: "doubled circle template (S1, 2_* f*X)", params: HOP },
    Entry { name: "directed_h", about: "line jumping to a point (first directed system)", params: &[] },
    Entry { name: "directed_k", about: "x' = x on [0,1] exiting at 1 (second directed system)", params: &[] },
    Entry { name: "trap", about: "line feeding a circle; no trapping region", params: &[] },
    Entry { name: "circle_flow", about: "rotation on the unit circle", params: &[] },
    Entry { name: "line", about: "the line with unit drift", params: &[] },
    Entry { name: "nondeterministic_subdivision", about: "line cut at 0 with overlapping flow set and guard", params: &[] },
];

/// Build a catalog entry; missing parameters take their defaults.
pub fn build(name: &str, overrides: &BTreeMap<String, f64>) -> Result<HybridSystem, GalleryError> {
    let entry = CATALOG.iter().find(|e| e.name == name).ok_or_else(|| GalleryError::Unknown(name.to_string()))?;
    let get = |k: &str| overrides.get(k).copied().unwrap_or_else(|| entry.params.iter().find(|p| p.0 == k).unwrap().1);
    let hop = || {
        vertical_hopper_suite(HopperParams { k_t: get("k_t"), beta: get("beta"), omega: get("omega") })
    };
    let out = match name {
        "rocking_block" => rocking_block(get("alpha"), get("r"))?,
        "hopper" => (*hop()?.h_hop).clone(),
        "hopper_double_cover" => (*hop()?.k).clone(),
        "hopper_smooth" => (*hop()?.l).clone(),
        "hopper_cut_circle" => (*hop()?.c).clone(),
        "hopper_half_circle" => (*hop()?.s).clone(),
        "hopper_template" => (*hop()?.circle).clone(),
        "hopper_template_doubled" => (*hop()?.circle2).clone(),
        "directed_h" => (*sequential_example_pair().0.carrier).clone(),
        "directed_k" => (*sequential_example_pair().1.carrier).clone(),
        "trap" => trap_example().0,
        "circle_flow" => circle_flow(),
        "line" => line_flow(),
        "nondeterministic_subdivision" => (*nondeterministic_subdivision().0).clone(),
        _ => unreachable!(),
    };
    Ok(out.with_provenance(serde_json::json!({ "gallery": name })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{simulate, SimConfig};
    use crate::system::{validate_system, HybridPoint};

    #[test]
    fn rocking_block_shape_and_ranges() {
        let h = rocking_block(0.3, 0.5).unwrap();
        assert_eq!(h.graph().vertex_count(), 2);
        assert_eq!(h.graph().edge_count(), 2);
        assert!(rocking_block(1.6, 0.5).is_err());
        assert!(rocking_block(0.3, 0.0).is_err());
        assert!(validate_system(&h, 500, 0).violations() == 0);
    }

    #[test]
    fn hopper_jump_reverses_velocity() {
        let suite = vertical_hopper_suite(HopperParams::default()).unwrap();
        let tr = simulate(&suite.h_hop, &HybridPoint::new("v", vec![-1.0, 0.3]), &SimConfig::default()).unwrap();
        let j = &tr.jumps[0];
        assert!(j.pre.x[0].abs() <= 1e-9);
        assert_eq!(j.post.x, vec![0.0, -j.pre.x[1]]);
    }

    #[test]
    fn catalog_builds() {
        for e in CATALOG {
            let h = build(e.name, &BTreeMap::new()).unwrap();
            assert!(h.graph().vertex_count() > 0, "{}", e.name);
        }
        assert!(build("nope", &BTreeMap::new()).is_err());
    }
}
