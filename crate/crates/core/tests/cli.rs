use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_l1fuse"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn plan_fuses_pairs_and_no_fuse_does_not() {
    let m = fixture("pw_dw_stack");
    let fused = run(&["plan", s(&m), "--l1", "65536", "--fuse"]);
    assert_eq!(fused.status.code(), Some(0));
    let fused: Value = serde_json::from_slice(&fused.stdout).unwrap();
    let nodes = fused["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 4);
    assert!(nodes.iter().all(|n| n["target"].get("fused").is_some()));
    for n in nodes {
        assert!(n["footprint_bytes"].as_u64().unwrap() <= 65536);
    }

    let unfused = run(&["plan", s(&m), "--no-fuse"]);
    let unfused: Value = serde_json::from_slice(&unfused.stdout).unwrap();
    assert_eq!(unfused["nodes"].as_array().unwrap().len(), 8);
}

#[test]
fn tiny_l1_is_infeasible() {
    let out = run(&["plan", s(&fixture("pw_dw_pair")), "--l1", "64"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn usage_and_schema_errors_exit_1() {
    assert_eq!(run(&["plan"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["plan", "/nonexistent/net.json"]).status.code(), Some(1));
    assert_eq!(
        run(&["plan", s(&fixture("pw_dw_pair")), "--fb", "0"]).status.code(),
        Some(1)
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"name\": 1}").unwrap();
    assert_eq!(run(&["plan", s(&bad)]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_is_deterministic_and_fusion_preserves_output() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture("mobilenet_v1_025");
    let input = dir.path().join("x.bin");
    assert_eq!(
        run(&["input", s(&m), "--seed", "4", "--out", s(&input)]).status.code(),
        Some(0)
    );
    assert_eq!(std::fs::metadata(&input).unwrap().len(), 96 * 96);

    let go = |name: &str, fuse: &str| {
        let out = dir.path().join(format!("{name}.bin"));
        let rep = dir.path().join(format!("{name}.json"));
        let o = run(&["run", s(&m), s(&input), fuse, "--out", s(&out), "--report", s(&rep)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(&out).unwrap(), std::fs::read_to_string(&rep).unwrap())
    };
    let a = go("a", "--fuse");
    let b = go("b", "--fuse");
    let u = go("u", "--no-fuse");
    assert_eq!(a, b);
    assert_eq!(a.0.len(), 4);
    assert_eq!(a.0, u.0);
    assert_ne!(a.1, u.1);
}

#[test]
fn run_with_saved_plan() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture("pw_dw_stack");
    let plan = dir.path().join("plan.json");
    let input = dir.path().join("x.bin");
    run(&["input", s(&m), "--out", s(&input)]);
    assert_eq!(
        run(&["plan", s(&m), "--l1", "16384", "--out", s(&plan)]).status.code(),
        Some(0)
    );
    let out = dir.path().join("y.bin");
    let rep = dir.path().join("r.json");
    let ok = run(&[
        "run",
        s(&m),
        s(&input),
        "--l1",
        "16384",
        "--plan",
        s(&plan),
        "--out",
        s(&out),
        "--report",
        s(&rep),
    ]);
    assert_eq!(ok.status.code(), Some(0));
    let rep = json(&rep);
    assert!(rep["peak_l1_bytes"].as_u64().unwrap() <= 16384);
    // the same plan no longer fits a smaller L1
    let bad = run(&[
        "run",
        s(&m),
        s(&input),
        "--l1",
        "1024",
        "--plan",
        s(&plan),
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn compare_without_pairs_is_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let rep = dir.path().join("c.json");
    let out = run(&["compare", s(&fixture("conv_pw")), "--report", s(&rep)]);
    assert_eq!(out.status.code(), Some(0));
    let rep = json(&rep);
    assert_eq!(rep["total_fused"], rep["total_unfused"]);
    assert_eq!(rep["total_delta"]["total_pct"].as_f64(), Some(0.0));
    for row in rep["rows"].as_array().unwrap() {
        assert_eq!(row["fused"], row["unfused"]);
    }
}

#[test]
fn compare_pair_saves_intermediate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rep = dir.path().join("c.json");
    let out = run(&[
        "compare",
        s(&fixture("pw_dw_pair")),
        "--l1",
        "8192",
        "--report",
        s(&rep),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("TOTAL"));
    let rep = json(&rep);
    let ls = |b: &Value| b["load"].as_u64().unwrap() + b["store"].as_u64().unwrap();
    let fused = ls(&rep["total_fused"]);
    let unfused = ls(&rep["total_unfused"]);
    // store then reload of the 32x32x32 intermediate, minus the re-fetch
    // overhead of the fused tiles: two halo rows per interior boundary and,
    // under spatial_outer, one parameter reload per extra spatial tile
    let plan = run(&["plan", s(&fixture("pw_dw_pair")), "--l1", "8192"]);
    let plan: Value = serde_json::from_slice(&plan.stdout).unwrap();
    let node = &plan["nodes"][0];
    let tiles = 32u64.div_ceil(node["rows_out"].as_u64().unwrap());
    let params = 32 * (16 + 9 + 8);
    let reloads = if node["loop_order"] == "spatial_outer" && node["k_tile"].as_u64() < Some(32) {
        tiles - 1
    } else {
        0
    };
    let overhead = (tiles - 1) * 2 * 32 * 16 + reloads * params;
    assert!(unfused - fused >= 2 * 32768 - overhead, "{unfused} {fused} {overhead}");
    assert_eq!(rep["total_fused"]["reorder"].as_u64(), Some(0));
    assert!(rep["total_unfused"]["reorder"].as_u64().unwrap() > 0);
}

#[test]
fn compare_mobilenet_reports_saving() {
    let dir = tempfile::tempdir().unwrap();
    let rep = dir.path().join("c.json");
    assert_eq!(
        run(&["compare", s(&fixture("mobilenet_v1_025")), "--report", s(&rep)])
            .status
            .code(),
        Some(0)
    );
    let rep = json(&rep);
    assert!(rep["total_delta"]["total_pct"].as_f64().unwrap() < 0.0);
    assert!(rep["total_fused"]["total"].as_u64() < rep["total_unfused"]["total"].as_u64());
    let fused_rows = rep["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["fused_node"] == true)
        .count();
    assert_eq!(fused_rows, 12);
}

#[test]
fn verify_passes_on_every_shipped_fixture() {
    for name in ["mobilenet_v1_025", "pw_dw_pair", "pw_dw_stack", "tiny_chain", "conv_pw"] {
        let out = run(&["verify", s(&fixture(name)), "--fb", "5"]);
        assert_eq!(out.status.code(), Some(0), "{name}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("fused/fb=5"));
        assert!(!text.contains("MISMATCH"));
    }
}

#[test]
fn fixture_command_writes_loadable_pair() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("pair.json");
    assert_eq!(
        run(&["fixture", "pw_dw_pair", "--seed", "9", "--out", s(&m)])
            .status
            .code(),
        Some(0)
    );
    assert!(dir.path().join("pair.bin").exists());
    assert_eq!(run(&["verify", s(&m)]).status.code(), Some(0));
    assert_eq!(run(&["fixture", "resnet", "--out", s(&m)]).status.code(), Some(1));
}

#[test]
fn zero_input_zero_bias_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture("pw_dw_pair");
    let mut manifest: Value = json(&src);
    let blob = std::fs::read(src.with_extension("bin")).unwrap();
    let mut zeroed = blob.clone();
    for l in manifest["layers"].as_array().unwrap() {
        let off = l["bias_ref"]["offset"].as_u64().unwrap() as usize;
        let len = l["bias_ref"]["length"].as_u64().unwrap() as usize;
        zeroed[off..off + len].fill(0);
    }
    manifest["weights_file"] = Value::from("z.bin");
    let m = dir.path().join("z.json");
    std::fs::write(&m, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    std::fs::write(dir.path().join("z.bin"), zeroed).unwrap();
    let input = dir.path().join("x.bin");
    std::fs::write(&input, vec![0u8; 32 * 32 * 16]).unwrap();
    let out = dir.path().join("y.bin");
    for _ in 0..2 {
        assert_eq!(
            run(&["run", s(&m), s(&input), "--l1", "8192", "--out", s(&out)])
                .status
                .code(),
            Some(0)
        );
        assert!(std::fs::read(&out).unwrap().iter().all(|&v| v == 0));
    }
}
