use std::path::Path;
use std::process::{Command, Output};

use hybridcat::exec::ExecutionTrace;
use hybridcat::system::HybridSystem;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridcat")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn gallery_lists_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let list = run(dir.path(), &["gallery", "list"]);
    assert_eq!(code(&list), 0);
    let names: Vec<String> = json(&list).as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap().to_string()).collect();
    assert!(names.contains(&"hopper".to_string()) && names.contains(&"hopper_maps".to_string()));

    assert_eq!(code(&run(dir.path(), &["gallery", "export", "rocking_block", "--alpha", "0.2", "-o", "rb.json"])), 0);
    let h = HybridSystem::from_json(&std::fs::read_to_string(dir.path().join("rb.json")).unwrap()).unwrap();
    assert_eq!(h.params()["a"], 0.2);
    let v = run(dir.path(), &["validate", "rb.json", "--samples", "200"]);
    assert_eq!(code(&v), 0);
    assert_eq!(json(&v)["ok"], true);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["validate", "missing.json"])), 2);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(dir.path(), &["gallery", "export", "no_such_thing", "-o", "x.json"])), 2);
    std::fs::write(dir.path().join("bad.json"), "{\"vertices\": 3}").unwrap();
    assert_eq!(code(&run(dir.path(), &["validate", "bad.json"])), 2);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn failed_checks_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &["gallery", "export", "nondeterministic_subdivision", "-o", "nd.json"]);
    let out = run(dir.path(), &["check", "determinism", "nd.json", "--samples", "300"]);
    assert_eq!(code(&out), 1);
    assert_eq!(json(&out)["ok"], false);
}

#[test]
fn trace_conversion_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &["gallery", "export", "hopper", "-o", "hop.json"]);
    let sim = run(dir.path(), &["simulate", "hop.json", "--mode", "v", "--init", "-1,0.5", "--horizon", "12", "--out", "a.json"]);
    assert_eq!(code(&sim), 0, "{}", String::from_utf8_lossy(&sim.stderr));
    assert_eq!(code(&run(dir.path(), &["trace-convert", "a.json", "b.csv"])), 0);
    assert_eq!(code(&run(dir.path(), &["trace-convert", "b.csv", "c.json"])), 0);
    let read = |n: &str| ExecutionTrace::from_json(&std::fs::read_to_string(dir.path().join(n)).unwrap()).unwrap();
    let (a, c) = (read("a.json"), read("c.json"));
    assert_eq!(a.segments, c.segments);
    assert_eq!(a.trajectory, c.trajectory);
    assert!(!a.jumps.is_empty());
}

#[test]
fn chain_search_and_recheck() {
    let dir = tempfile::tempdir().unwrap();
    for (name, file) in [("directed_h", "h.json"), ("directed_k", "k.json"), ("directed_overlap", "o.json")] {
        assert_eq!(code(&run(dir.path(), &["gallery", "export", name, "-o", file])), 0);
    }
    let comp = run(dir.path(), &["compose", "sequential", "--first", "h.json", "--second", "k.json", "--overlap", "o.json", "-o", "hk.json"]);
    assert_eq!(code(&comp), 0, "{}", String::from_utf8_lossy(&comp.stderr));
    let found = run(dir.path(), &["chain", "hk.json", "--mode", "v", "--init", "1", "--target", "z", "-o", "c.json"]);
    assert_eq!(code(&found), 0);
    let ok = run(dir.path(), &["chain", "hk.json", "--mode", "v", "--init", "1", "--target", "z", "--check", "c.json"]);
    assert_eq!(code(&ok), 0);

    let mut chain: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    chain["eps"] = serde_json::json!(1e-6);
    std::fs::write(dir.path().join("tight.json"), chain.to_string()).unwrap();
    let bad = run(dir.path(), &["chain", "hk.json", "--mode", "v", "--init", "1", "--target", "z", "--check", "tight.json"]);
    assert_eq!(code(&bad), 1);

    let none = run(dir.path(), &["chain", "hk.json", "--mode", "v", "--init", "1", "--target", "z", "--eps", "0"]);
    assert_eq!(code(&none), 1);
}

#[test]
fn products_and_slices_are_valid_files() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &["gallery", "export", "circle_flow", "-o", "c.json"]);
    run(dir.path(), &["gallery", "export", "line", "-o", "l.json"]);
    assert_eq!(code(&run(dir.path(), &["compose", "product", "l.json", "c.json", "-o", "p.json", "--maps-out", "pm.json"])), 0);
    assert_eq!(code(&run(dir.path(), &["validate", "p.json", "--samples", "200"])), 0);
    assert_eq!(code(&run(dir.path(), &["check", "semiconjugacy", "pm.json"])), 0);
    let slice = run(dir.path(), &["compose", "slice", "c.json", "--mode", "c", "--cut", "x0", "-o", "s.json", "--map-out", "sm.json"]);
    assert_eq!(code(&slice), 0);
    assert_eq!(code(&run(dir.path(), &["check", "semiconjugacy", "sm.json"])), 0);
    assert_eq!(code(&run(dir.path(), &["check", "subdivision", "sm.json"])), 0);
}
