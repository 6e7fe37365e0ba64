mod support;

use std::path::Path;
use std::process::{Command, Output};

use daonet_core::rng::Rng;
use daonet_core::runner::{Module, ModuleKind};
use daonet_core::Tensor;

fn daonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daonet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn check_is_green_and_reproducible() {
    let a = daonet(&["check", "--seed", "42"]);
    let b = daonet(&["check", "--seed", "42"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).lines().all(|l| !l.starts_with("FAIL")));
}

#[test]
fn injected_softmax_fault_fails_check() {
    let o = daonet(&["check", "--inject-fault", "naive-softmax"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL softmax.normalization")));
}

#[test]
fn check_json_lists_every_check() {
    let o = daonet(&["check", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let checks = v["checks"].as_array().unwrap();
    assert_eq!(checks.len() as u64, v["total"].as_u64().unwrap());
    assert!(checks.iter().all(|c| c["pass"] == true && c.get("elapsed_ms").is_none()));
    let timed = daonet(&["check", "--json", "--timings"]);
    let v: serde_json::Value = serde_json::from_slice(&timed.stdout).unwrap();
    assert!(v["checks"][0]["elapsed_ms"].is_u64());
}

#[test]
fn gradcheck_modules() {
    for m in ["dafm", "oahead", "dsconv", "c2f_dsconv"] {
        let o = daonet(&["gradcheck", "--module", m, "--seed", "1"]);
        assert_eq!(o.status.code(), Some(0), "{m}: {}", stdout(&o));
        assert!(stdout(&o).lines().last().unwrap().starts_with(&format!("PASS {m}")));
    }
    let o = daonet(&["gradcheck", "--module", "resnet"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn count_reports_totals() {
    let o = daonet(&["count", "--variant", "baseline", "--imgsz", "640", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let params = v["total_params"].as_u64().unwrap();
    let flops = v["total_flops"].as_u64().unwrap();
    assert!((params as f64 / 3.0e6 - 1.0).abs() <= 0.10);
    assert!((flops as f64 / 8.1e9 - 1.0).abs() <= 0.15);

    let small = daonet(&["count", "--variant", "baseline", "--imgsz", "320", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&small.stdout).unwrap();
    assert_eq!(v["total_flops"].as_u64().unwrap() * 4, flops);

    let text = stdout(&daonet(&["count", "--variant", "daonet"]));
    assert!(text.contains("head.0.cls.oahead") && text.lines().last().unwrap().starts_with("total:"));

    assert_eq!(daonet(&["count", "--imgsz", "650"]).status.code(), Some(2));
    assert_eq!(daonet(&["count", "--variant", "dafm+yolo"]).status.code(), Some(2));
}

#[test]
fn count_ablation_lists_eight_rows() {
    let o = daonet(&["count", "--ablation", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<_> = v.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["baseline", "dafm", "oahead", "dsconv", "dafm+oahead", "dafm+dsconv", "oahead+dsconv", "daonet"]);
}

#[test]
fn run_residual_only_dafm_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (w, x, y) = (dir.path().join("w.daow"), dir.path().join("x.tns"), dir.path().join("y.tns"));
    let o = daonet(&["init", "--module", "dafm", "--channels", "16", "--seed", "3", "--output", p(&w), "--residual-only"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let input = support::lcg_tensor(&[2, 16, 5, 7], 9);
    input.save_tns(&x).unwrap();
    let o = daonet(&["run", "--module", "dafm", "--weights", p(&w), "--input", p(&x), "--output", p(&y)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = Tensor::read_tns(&y).unwrap();
    assert!(out.bit_eq(&input));
    assert_eq!(stdout(&o).trim(), format!("dims [2, 16, 5, 7] checksum {:016x}", input.checksum()));
}

#[test]
fn run_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let (w, x, y) = (dir.path().join("w.daow"), dir.path().join("x.tns"), dir.path().join("y.tns"));
    daonet(&["init", "--module", "dsconv", "--channels", "8", "--output", p(&w)]);
    let bytes = support::lcg_tensor(&[1, 8, 4, 4], 1).to_tns_bytes();
    std::fs::write(&x, &bytes[..bytes.len() - 3]).unwrap();
    let o = daonet(&["run", "--module", "dsconv", "--weights", p(&w), "--input", p(&x), "--output", p(&y)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("payload shorter than header dims"), "{}", stderr(&o));
    assert!(!y.exists());

    // Wrong channel count for the stored weights.
    support::lcg_tensor(&[1, 4, 4, 4], 1).save_tns(&x).unwrap();
    let o = daonet(&["run", "--module", "dsconv", "--weights", p(&w), "--input", p(&x), "--output", p(&y)]);
    assert_eq!(o.status.code(), Some(2));

    // Weights for a different module.
    support::lcg_tensor(&[1, 8, 4, 4], 1).save_tns(&x).unwrap();
    let o = daonet(&["run", "--module", "oahead", "--weights", p(&w), "--input", p(&x), "--output", p(&y)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("oahead"), "{}", stderr(&o));

    let wb = std::fs::read(&w).unwrap();
    std::fs::write(&w, &wb[..wb.len() / 2]).unwrap();
    let o = daonet(&["run", "--module", "dsconv", "--weights", p(&w), "--input", p(&x), "--output", p(&y)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("malformed"), "{}", stderr(&o));

    let o = daonet(&["run", "--module", "dsconv", "--weights", "/nonexistent/w", "--input", p(&x), "--output", p(&y)]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_golden(dir: &Path, kind: ModuleKind, seed: u64, perturb: f32) {
    let (m, store) = Module::init(kind, 8, &mut Rng::new(seed)).unwrap();
    let x = support::lcg_tensor(&[1, 8, 6, 6], seed);
    let y = m.forward(&store, &x).unwrap().map(|v| v + perturb);
    let stem = format!("{kind}_{seed}");
    store.save(dir.join(format!("{stem}.daow"))).unwrap();
    x.save_tns(dir.join(format!("{stem}.in.tns"))).unwrap();
    y.save_tns(dir.join(format!("{stem}.out.tns"))).unwrap();
    let meta = serde_json::json!({
        "module": kind.name(), "weights": format!("{stem}.daow"), "input": format!("{stem}.in.tns"),
        "expected": format!("{stem}.out.tns"), "seed": seed,
    });
    std::fs::write(dir.join(format!("{stem}.json")), meta.to_string()).unwrap();
}

#[test]
fn parity_skips_without_golden_files() {
    let o = daonet(&["parity", "--golden", "/nonexistent/golden"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("skipped"));
    let dir = tempfile::tempdir().unwrap();
    let o = daonet(&["parity", "--golden", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("skipped"));
}

#[test]
fn parity_pass_fail_and_malformed() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ModuleKind::ALL {
        write_golden(dir.path(), kind, 7, 0.0);
    }
    let o = daonet(&["parity", "--golden", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("4/4 golden cases passed"));

    write_golden(dir.path(), ModuleKind::Dsconv, 8, 1e-2);
    let o = daonet(&["parity", "--golden", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL dsconv_8.json")));

    std::fs::write(dir.path().join("zz.json"), "{\"module\": \"dafm\"}").unwrap();
    let o = daonet(&["parity", "--golden", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn threads_flag_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let (w, x) = (dir.path().join("w.daow"), dir.path().join("x.tns"));
    daonet(&["init", "--module", "c2f_dsconv", "--channels", "16", "--seed", "2", "--output", p(&w)]);
    support::lcg_tensor(&[2, 16, 9, 9], 4).save_tns(&x).unwrap();
    let run = |t: &str, out: &str| {
        let y = dir.path().join(out);
        let o = daonet(&["--threads", t, "run", "--module", "c2f_dsconv", "--weights", p(&w), "--input", p(&x), "--output", p(&y)]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(y).unwrap()
    };
    assert_eq!(run("1", "a.tns"), run("3", "b.tns"));
}

#[test]
fn help_and_bad_arguments() {
    assert_eq!(daonet(&["--help"]).status.code(), Some(0));
    assert_eq!(daonet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(daonet(&["check", "--seed", "x"]).status.code(), Some(2));
}
