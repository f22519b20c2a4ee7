//! Command-line front end.
//!
//! Reports go to stdout as JSON, one-line summaries to stderr. Exit codes:
//! 0 success, 1 failed check, 2 usage or I/O error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{
    certify_directed, chain_search, check_trapping_region, validate_chain, Chain, Region, SearchOptions, SearchOutcome,
    Target, TrappingOptions,
};
use crate::compose::{
    compose_template_anchor, coproduct, factor_reset, fiber_product, product, sequential_compose, slice_mode,
    CheckOptions, DirectedSystem, FactorOptions, FiberOptions, TemplateAnchorPair,
};
use crate::exec::{simulate, ExecutionTrace, Integrator, SimConfig};
use crate::expr::{parse_expr, parse_predicate, parse_vector};
use crate::gallery;
use crate::graph::{EdgeId, VertexId};
use crate::morphism::{check_subdivision_necessary, validate_semiconjugacy, Semiconjugacy};
use crate::system::{check_determinism, check_nonblocking, validate_system, HybridPoint, HybridSystem};

#[derive(Parser, Debug)]
#[command(name = "hybridcat", version, about = "Compose, simulate and check hybrid dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sampled well-formedness check of a system file.
    Validate {
        system: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate one execution.
    Simulate {
        system: PathBuf,
        #[arg(long)]
        mode: String,
        /// Comma-separated start point.
        #[arg(long, allow_hyphen_values = true)]
        init: String,
        #[command(flatten)]
        sim: SimArgs,
        /// Trace file; `.csv` writes CSV, anything else JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Compose(ComposeCmd),
    #[command(subcommand)]
    Check(CheckCmd),
    /// Search for an (ε,T)-chain, or re-validate a chain file with --check.
    Chain {
        system: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        init: Option<String>,
        /// Target as `mode` or `mode=predicate`; repeatable.
        #[arg(long)]
        target: Vec<String>,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Teleport separation; `inf` forbids teleports.
        #[arg(long = "t", default_value = "1")]
        t_sep: String,
        #[arg(long, default_value_t = 10_000)]
        budget: usize,
        #[arg(long, default_value_t = 50.0)]
        max_time: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        check: Option<PathBuf>,
        #[arg(short = 'o', long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Gallery(GalleryCmd),
    /// Convert a trace between JSON and CSV (by file extension).
    TraceConvert { input: PathBuf, output: PathBuf },
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.05)]
    dt_max: f64,
    #[arg(long, value_enum, default_value_t = Method::Rk45)]
    integrator: Method,
    #[arg(long, default_value_t = 1e-10)]
    atol: f64,
    #[arg(long, default_value_t = 1e-10)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-9)]
    event_tol: f64,
    #[arg(long, default_value_t = 20)]
    max_jumps: usize,
    #[arg(long, default_value_t = 0.05)]
    min_dwell: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Method {
    Rk4,
    Rk45,
}

impl SimArgs {
    fn config(&self) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            dt_max: self.dt_max,
            integrator: match self.integrator {
                Method::Rk4 => Integrator::Rk4,
                Method::Rk45 => Integrator::Rk45 { atol: self.atol, rtol: self.rtol },
            },
            event_tol: self.event_tol,
            max_jumps: self.max_jumps,
            min_dwell: self.min_dwell,
            ..SimConfig::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum ComposeCmd {
    Product {
        first: PathBuf,
        second: PathBuf,
        #[arg(short = 'o', long)]
        out: PathBuf,
        /// Write both projections here.
        #[arg(long)]
        maps_out: Option<PathBuf>,
    },
    Coproduct {
        first: PathBuf,
        second: PathBuf,
        #[arg(short = 'o', long)]
        out: PathBuf,
        #[arg(long)]
        maps_out: Option<PathBuf>,
    },
    /// Sequential composition of two directed systems.
    Sequential {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        /// Initial and final maps of both systems; `@first`/`@second` refer to the carriers.
        #[arg(long)]
        overlap: PathBuf,
        #[arg(short = 'o', long)]
        out: PathBuf,
        /// Also write the composite as a directed-system file.
        #[arg(long)]
        directed_out: Option<PathBuf>,
    },
    /// Fiber product of a submersion and an embedding with a common codomain.
    Fiber {
        #[arg(long)]
        submersion: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        constraint_tol: f64,
        #[arg(short = 'o', long)]
        out: PathBuf,
        #[arg(long)]
        maps_out: Option<PathBuf>,
    },
    /// Cut a mode along the zero set of a function.
    Slice {
        system: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long, allow_hyphen_values = true)]
        cut: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
        #[arg(long)]
        map_out: Option<PathBuf>,
    },
    /// Factor a reset through an intermediate mode.
    FactorReset {
        system: PathBuf,
        #[arg(long)]
        edge: String,
        /// Components of f, separated by `;`.
        #[arg(long, allow_hyphen_values = true)]
        f: String,
        /// Components of g, separated by `;`.
        #[arg(long, allow_hyphen_values = true)]
        g: String,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value = "true")]
        active: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
        #[arg(long)]
        map_out: Option<PathBuf>,
    },
    /// Compose two template-anchor pairs.
    TemplateAnchor {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        constraint_tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum CheckCmd {
    Determinism {
        system: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Nonblocking {
        system: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sim: SimArgs,
    },
    Semiconjugacy {
        map: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Subdivision {
        map: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Trapping {
        system: PathBuf,
        /// Margin `mode=expr`; W is `{expr >= 0}`. Repeatable.
        #[arg(long, required = true)]
        margin: Vec<String>,
        #[arg(long, default_value_t = 25.0)]
        t_bound: f64,
        #[arg(long, default_value_t = 1e-6)]
        delta: f64,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sim: SimArgs,
    },
    Directed {
        /// Directed-system file.
        directed: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long = "t", default_value = "1")]
        t_sep: String,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 10_000)]
        budget: usize,
        #[arg(long, default_value_t = 50.0)]
        max_time: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand, Debug)]
enum GalleryCmd {
    List,
    /// Write a gallery system (or fixture) to a file.
    Export {
        name: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        k_t: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// A check ran and failed; the report has been printed.
    Check,
    Usage(String),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn report(v: &impl Serialize, ok: bool, summary: &str) -> CmdResult {
    print!("{}", pretty(v));
    eprintln!("{summary}");
    if ok {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn load_system(path: &Path) -> Result<HybridSystem, Failure> {
    HybridSystem::from_json(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_value(path: &Path) -> Result<Value, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Resolve system references: `@name` from `named`, otherwise a path
/// relative to `base`.
fn resolver<'a>(
    base: &'a Path,
    named: &'a BTreeMap<String, HybridSystem>,
) -> impl Fn(&str) -> Result<HybridSystem, crate::system::SystemError> + 'a {
    move |s: &str| {
        if let Some(name) = s.strip_prefix('@') {
            return named
                .get(name)
                .cloned()
                .ok_or_else(|| crate::system::SystemError::Structure(format!("unknown reference {s}")));
        }
        let text = std::fs::read_to_string(base.join(s))
            .map_err(|e| crate::system::SystemError::Structure(format!("{s}: {e}")))?;
        HybridSystem::from_json(&text)
    }
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn load_map(path: &Path) -> Result<Semiconjugacy, Failure> {
    let v = load_value(path)?;
    let named = BTreeMap::new();
    let resolve = resolver(parent(path), &named);
    let m = Semiconjugacy::from_value(&v, &resolve).map_err(|e| usage(format!("{}: {e}", path.display())));
    m
}

fn map_in(v: &Value, key: &str, base: &Path, named: &BTreeMap<String, HybridSystem>) -> Result<Semiconjugacy, Failure> {
    let m = v.get(key).ok_or_else(|| usage(format!("missing {key}")))?;
    Semiconjugacy::from_value(m, &resolver(base, named)).map_err(|e| usage(format!("{key}: {e}")))
}

/// Directed-system file: `{"carrier", "init", "fin"}`; maps may refer to the carrier as `@carrier`.
pub fn directed_to_value(d: &DirectedSystem) -> Value {
    let mut init = d.init.to_value();
    let mut fin = d.fin.to_value();
    init["cod"] = json!("@carrier");
    fin["cod"] = json!("@carrier");
    json!({ "carrier": d.carrier.to_value(), "init": init, "fin": fin })
}

fn load_directed(path: &Path) -> Result<DirectedSystem, Failure> {
    let v = load_value(path)?;
    let base = parent(path);
    let carrier = match v.get("carrier") {
        Some(Value::String(s)) => resolver(base, &BTreeMap::new())(s).map_err(usage)?,
        Some(c) => HybridSystem::from_value(c).map_err(usage)?,
        None => return Err(usage("missing carrier")),
    };
    let named = BTreeMap::from([("carrier".to_string(), carrier)]);
    let init = map_in(&v, "init", base, &named)?;
    let fin = map_in(&v, "fin", base, &named)?;
    DirectedSystem::new(init, fin).map_err(usage)
}

fn pair_to_value(p: &TemplateAnchorPair) -> Value {
    json!({ "p": p.p.to_value(), "i": p.i.to_value() })
}

fn load_pair(path: &Path) -> Result<TemplateAnchorPair, Failure> {
    let v = load_value(path)?;
    let named = BTreeMap::new();
    let p = map_in(&v, "p", parent(path), &named)?;
    let i = map_in(&v, "i", parent(path), &named)?;
    TemplateAnchorPair::new(p, i).map_err(usage)
}

fn parse_point(text: &str) -> Result<Vec<f64>, Failure> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| usage(format!("bad coordinate {s:?}: {e}"))))
        .collect()
}

fn parse_t(text: &str) -> Result<f64, Failure> {
    match text {
        "inf" => Ok(f64::INFINITY),
        s => s.parse::<f64>().ok().filter(|v| *v >= 0.0).ok_or_else(|| usage(format!("bad T {s:?}"))),
    }
}

fn start_point(h: &HybridSystem, mode: &str, init: &str) -> Result<HybridPoint, Failure> {
    let x = parse_point(init)?;
    h.point(mode, x).map_err(usage)
}

fn run_command(cmd: Command) -> CmdResult {
    match cmd {
        Command::Validate { system, samples, seed } => {
            let h = load_system(&system)?;
            let r = validate_system(&h, samples, seed);
            let ok = r.ok;
            report(&r, ok, &format!("validate: {} violations", r.violations()))
        }
        Command::Simulate { system, mode, init, sim, out } => {
            let h = load_system(&system)?;
            let start = start_point(&h, &mode, &init)?;
            let cfg = sim.config();
            let tr = simulate(&h, &start, &cfg).map_err(usage)?;
            let summary = json!({
                "stop_time": tr.stop_time(),
                "jumps": tr.jumps.len(),
                "classification": tr.classification,
                "final": tr.final_point(),
            });
            match out {
                Some(path) => {
                    let text = if path.extension().is_some_and(|e| e == "csv") { tr.to_csv() } else { tr.to_json() };
                    write(&path, &text)?;
                    report(&summary, true, &format!("simulate: {} jumps, stop at {}", tr.jumps.len(), tr.stop_time()))
                }
                None => {
                    print!("{}", tr.to_json());
                    Ok(())
                }
            }
        }
        Command::Compose(c) => run_compose(c),
        Command::Check(c) => run_check(c),
        Command::Chain { system, mode, init, target, eps, t_sep, budget, max_time, tol, check, out } => {
            let h = load_system(&system)?;
            let t_sep = parse_t(&t_sep)?;
            let sim = SimConfig::default();
            if let Some(path) = check {
                let c = Chain::from_json(&read(&path)?).map_err(usage)?;
                let r = validate_chain(&h, &c, tol, &sim);
                let ok = r.valid;
                return report(&r, ok, &format!("chain: {}", if ok { "valid" } else { "invalid" }));
            }
            let (Some(mode), Some(init)) = (mode, init) else {
                return Err(usage("chain search needs --mode and --init"));
            };
            if target.is_empty() {
                return Err(usage("chain search needs at least one --target"));
            }
            let start = start_point(&h, &mode, &init)?;
            let mut preds = BTreeMap::new();
            for t in &target {
                let (v, p) = t.split_once('=').unwrap_or((t.as_str(), "true"));
                let dim = h.dim(&VertexId::new(v)).ok_or_else(|| usage(format!("unknown mode {v}")))?;
                preds.insert(VertexId::new(v), parse_predicate(p, dim).map_err(usage)?);
            }
            let opts = SearchOptions { budget, max_time, tol, ..Default::default() };
            let outcome = chain_search(&h, &start, &Target { preds }, eps, t_sep, &opts).map_err(usage)?;
            let stats = outcome.stats().clone();
            match outcome {
                SearchOutcome::Found { chain, .. } => {
                    if let Some(path) = &out {
                        write(path, &chain.to_json())?;
                    }
                    let r = json!({"found": true, "eps": eps, "links": chain.links.len(),
                        "teleports": chain.teleport_times().len(), "max_gap": chain.max_gap(),
                        "duration": chain.duration(), "stats": stats});
                    report(&r, true, "chain: found")
                }
                SearchOutcome::NotFound { .. } => {
                    report(&json!({"found": false, "eps": eps, "stats": stats}), false, "chain: not found")
                }
            }
        }
        Command::Gallery(GalleryCmd::List) => {
            let list: Vec<Value> = gallery::CATALOG
                .iter()
                .map(|e| json!({"name": e.name, "about": e.about, "params": e.params.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>()}))
                .chain(FIXTURES.iter().map(|(n, about)| json!({"name": n, "about": about, "params": {}})))
                .collect();
            print!("{}", pretty(&list));
            Ok(())
        }
        Command::Gallery(GalleryCmd::Export { name, alpha, r, k_t, beta, omega, out }) => {
            let overrides: BTreeMap<String, f64> =
                [("alpha", alpha), ("r", r), ("k_t", k_t), ("beta", beta), ("omega", omega)]
                    .into_iter()
                    .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
                    .collect();
            let text = match fixture(&name, &overrides)? {
                Some(v) => pretty(&v),
                None => gallery::build(&name, &overrides).map_err(usage)?.to_json(),
            };
            write(&out, &text)?;
            eprintln!("gallery: wrote {name} to {}", out.display());
            Ok(())
        }
        Command::TraceConvert { input, output } => {
            let text = read(&input)?;
            let is_csv = |p: &Path| p.extension().is_some_and(|e| e == "csv");
            let tr = if is_csv(&input) { ExecutionTrace::from_csv(&text) } else { ExecutionTrace::from_json(&text) }
                .map_err(|e| usage(format!("{}: {e}", input.display())))?;
            write(&output, &if is_csv(&output) { tr.to_csv() } else { tr.to_json() })?;
            eprintln!("trace-convert: {} segments", tr.segments.len());
            Ok(())
        }
    }
}

const FIXTURES: &[(&str, &str)] = &[
    ("directed_h.directed", "first directed system as a directed-system file"),
    ("directed_k.directed", "second directed system as a directed-system file"),
    ("directed_overlap", "initial and final maps for `compose sequential` (@first, @second)"),
    ("hopper_maps", "the eight hopper semiconjugacies, keyed by name"),
    ("hopper_pair", "template-anchor pair (S1, 2_* f*X) <- S -> H_hop"),
    ("hopper_pair_k", "template-anchor pair S1 <- C -> K"),
];

fn fixture(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Option<Value>, Failure> {
    let hop = || {
        let d = gallery::HopperParams::default();
        gallery::vertical_hopper_suite(gallery::HopperParams {
            k_t: overrides.get("k_t").copied().unwrap_or(d.k_t),
            beta: overrides.get("beta").copied().unwrap_or(d.beta),
            omega: overrides.get("omega").copied().unwrap_or(d.omega),
        })
        .map_err(usage)
    };
    let (h, k) = gallery::sequential_example_pair();
    Ok(Some(match name {
        "directed_h.directed" => directed_to_value(&h),
        "directed_k.directed" => directed_to_value(&k),
        "directed_overlap" => {
            let mut v = json!({
                "first_init": h.init.to_value(), "first_fin": h.fin.to_value(),
                "second_init": k.init.to_value(), "second_fin": k.fin.to_value(),
            });
            for key in ["first_init", "first_fin"] {
                v[key]["cod"] = json!("@first");
            }
            for key in ["second_init", "second_fin"] {
                v[key]["cod"] = json!("@second");
            }
            v
        }
        "hopper_maps" => {
            let s = hop()?;
            Value::Object(s.maps().into_iter().map(|(n, m)| (n.to_string(), m.to_value())).collect())
        }
        "hopper_pair" => pair_to_value(&hop()?.pair_hop()),
        "hopper_pair_k" => pair_to_value(&hop()?.pair_k()),
        _ => return Ok(None),
    }))
}

fn write_maps(path: Option<&PathBuf>, maps: &[(&str, &Semiconjugacy)]) -> CmdResult {
    if let Some(p) = path {
        if let [(_, m)] = maps {
            return write(p, &pretty(&m.to_value()));
        }
        let v: serde_json::Map<String, Value> = maps.iter().map(|(n, m)| (n.to_string(), m.to_value())).collect();
        write(p, &pretty(&v))?;
    }
    Ok(())
}

fn summary_of(h: &HybridSystem) -> Value {
    json!({
        "modes": h.modes().keys().map(|v| v.to_string()).collect::<Vec<_>>(),
        "edges": h.edges().iter().map(|(e, r)| json!({"id": e.to_string(), "src": r.src.to_string(), "tgt": r.tgt.to_string()})).collect::<Vec<_>>(),
    })
}

fn run_compose(c: ComposeCmd) -> CmdResult {
    match c {
        ComposeCmd::Product { first, second, out, maps_out } => {
            let (a, b) = (Arc::new(load_system(&first)?), Arc::new(load_system(&second)?));
            let (p, pi1, pi2) = product(&a, &b).map_err(usage)?;
            write(&out, &p.to_json())?;
            write_maps(maps_out.as_ref(), &[("pi1", &pi1), ("pi2", &pi2)])?;
            report(&summary_of(&p), true, &format!("product: {} modes", p.modes().len()))
        }
        ComposeCmd::Coproduct { first, second, out, maps_out } => {
            let (a, b) = (Arc::new(load_system(&first)?), Arc::new(load_system(&second)?));
            let (p, i1, i2) = coproduct(&a, &b).map_err(usage)?;
            write(&out, &p.to_json())?;
            write_maps(maps_out.as_ref(), &[("i1", &i1), ("i2", &i2)])?;
            report(&summary_of(&p), true, &format!("coproduct: {} modes", p.modes().len()))
        }
        ComposeCmd::Sequential { first, second, overlap, out, directed_out } => {
            let named = BTreeMap::from([
                ("first".to_string(), load_system(&first)?),
                ("second".to_string(), load_system(&second)?),
            ]);
            let v = load_value(&overlap)?;
            let base = parent(&overlap);
            let h = DirectedSystem::new(map_in(&v, "first_init", base, &named)?, map_in(&v, "first_fin", base, &named)?)
                .map_err(usage)?;
            let k = DirectedSystem::new(map_in(&v, "second_init", base, &named)?, map_in(&v, "second_fin", base, &named)?)
                .map_err(usage)?;
            let hk = sequential_compose(&h, &k).map_err(usage)?;
            write(&out, &hk.carrier.to_json())?;
            if let Some(p) = directed_out {
                write(&p, &pretty(&directed_to_value(&hk)))?;
            }
            report(&summary_of(&hk.carrier), true, &format!("sequential: {} modes", hk.carrier.modes().len()))
        }
        ComposeCmd::Fiber { submersion, embedding, constraint_tol, out, maps_out } => {
            let p = load_map(&submersion)?;
            let f = load_map(&embedding)?;
            let f = f.retarget(p.cod().clone()).map_err(usage)?;
            let (fp, to1, to2) = fiber_product(&p, &f, FiberOptions { constraint_tol, verify: None }).map_err(usage)?;
            write(&out, &fp.to_json())?;
            write_maps(maps_out.as_ref(), &[("to_first", &to1), ("to_second", &to2)])?;
            report(&summary_of(&fp), true, &format!("fiber: {} modes", fp.modes().len()))
        }
        ComposeCmd::Slice { system, mode, cut, seed, out, map_out } => {
            let h = Arc::new(load_system(&system)?);
            let v = VertexId::new(&mode);
            let dim = h.dim(&v).ok_or_else(|| usage(format!("unknown mode {mode}")))?;
            let cut = parse_expr(&cut, dim).map_err(usage)?;
            let sub = slice_mode(&h, &v, &cut, seed).map_err(usage)?;
            write(&out, &sub.system().to_json())?;
            write_maps(map_out.as_ref(), &[("p", &sub.map)])?;
            report(&summary_of(sub.system()), true, &format!("slice: {} modes", sub.system().modes().len()))
        }
        ComposeCmd::FactorReset { system, edge, f, g, dim, active, seed, out, map_out } => {
            let h = Arc::new(load_system(&system)?);
            let e = EdgeId::new(&edge);
            let r = h.edge(&e).ok_or_else(|| usage(format!("unknown edge {edge}")))?;
            let src_dim = h.dim(&r.src).unwrap();
            let fs: Vec<&str> = f.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
            let gs: Vec<&str> = g.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
            let fv = parse_vector(&fs, src_dim).map_err(usage)?;
            let gv = parse_vector(&gs, dim).map_err(usage)?;
            let act = parse_predicate(&active, dim).map_err(usage)?;
            let sub = factor_reset(&h, &e, &fv, &gv, &act, dim, FactorOptions { seed, ..Default::default() })
                .map_err(usage)?;
            write(&out, &sub.system().to_json())?;
            write_maps(map_out.as_ref(), &[("p", &sub.map)])?;
            report(&summary_of(sub.system()), true, &format!("factor-reset: {} modes", sub.system().modes().len()))
        }
        ComposeCmd::TemplateAnchor { first, second, constraint_tol, seed, out } => {
            let p1 = load_pair(&first)?;
            let p2 = load_pair(&second)?;
            let opts = CheckOptions { seed, ..Default::default() };
            let pair = compose_template_anchor(&p1, &p2, constraint_tol, Some(opts)).map_err(usage)?;
            write(&out, &pretty(&pair_to_value(&pair)))?;
            let checks = pair.checks.as_ref().expect("checks requested");
            let ok = checks.subdivision.verdict && checks.embedding.verdict;
            report(checks, ok, &format!("template-anchor: roof has {} modes", pair.roof().modes().len()))
        }
    }
}

fn run_check(c: CheckCmd) -> CmdResult {
    match c {
        CheckCmd::Determinism { system, samples, seed } => {
            let h = load_system(&system)?;
            let r = check_determinism(&h, samples, seed);
            let ok = r.ok;
            report(&r, ok, &format!("determinism: {} violations", r.violations))
        }
        CheckCmd::Nonblocking { system, samples, seed, sim } => {
            let h = load_system(&system)?;
            let cfg = sim.config();
            let r = check_nonblocking(&h, samples, cfg.horizon, seed, &cfg);
            let ok = r.ok;
            report(&r, ok, &format!("nonblocking: {} blocked", r.blocked.len()))
        }
        CheckCmd::Semiconjugacy { map, samples, tol, seed } => {
            let v = load_value(&map)?;
            if v.get("dom").is_some() {
                let a = load_map(&map)?;
                let r = validate_semiconjugacy(&a, samples, tol, seed);
                let ok = r.ok;
                return report(&r, ok, &format!("semiconjugacy: max residual {:e}", r.max_residual));
            }
            // a bundle of named maps
            let obj = v.as_object().ok_or_else(|| usage("expected a map or an object of maps"))?;
            let named = BTreeMap::new();
            let mut reports = BTreeMap::new();
            for key in obj.keys() {
                let a = map_in(&v, key, parent(&map), &named)?;
                reports.insert(key.clone(), validate_semiconjugacy(&a, samples, tol, seed));
            }
            let ok = reports.values().all(|r| r.ok);
            let worst = reports.values().map(|r| r.max_residual).fold(0.0, f64::max);
            report(&reports, ok, &format!("semiconjugacy: {} maps, max residual {worst:e}", reports.len()))
        }
        CheckCmd::Subdivision { map, samples, tol, seed } => {
            let a = load_map(&map)?;
            let r = check_subdivision_necessary(&a, samples, tol, seed);
            let ok = r.verdict;
            report(&r, ok, &format!("subdivision: {}", if ok { "consistent" } else { "rejected" }))
        }
        CheckCmd::Trapping { system, margin, t_bound, delta, samples, seed, sim } => {
            let h = load_system(&system)?;
            let pairs: Vec<(&str, &str)> = margin
                .iter()
                .map(|m| m.split_once('=').ok_or_else(|| usage(format!("margin {m:?} is not mode=expr"))))
                .collect::<Result<_, _>>()?;
            let w = Region::parse(&h, &pairs).map_err(usage)?;
            let cfg = sim.config();
            let opts = TrappingOptions { samples, horizon: cfg.horizon, t_bound, delta, seed, sim: cfg };
            let r = check_trapping_region(&h, &w, &opts);
            let ok = r.ok;
            report(&r, ok, &format!("trapping: interior margin {:e}", r.worst_interior_margin))
        }
        CheckCmd::Directed { directed, eps, t_sep, samples, budget, max_time, seed } => {
            let mut d = load_directed(&directed)?;
            let t_sep = parse_t(&t_sep)?;
            let opts = SearchOptions { budget, max_time, ..Default::default() };
            let r = certify_directed(&mut d, eps, t_sep, samples, &opts, seed).map_err(usage)?;
            let ok = d.certified.is_some();
            report(&r, ok, &format!("directed: coverage {}", r.coverage))
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("HYBRIDCAT_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(Failure::Check) => 1,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
