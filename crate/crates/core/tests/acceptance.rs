//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p daonet-core --test acceptance -- --nocapture`.

mod support;

use std::process::Command;
use std::time::{Duration, Instant};

use daonet_core::checks::{self, Fault, SuiteOptions};
use daonet_core::gradcheck::{self, Target};
use daonet_core::kernels::{self, ConvGeom};
use daonet_core::model::{self, Model, ModelConfig, Variant};
use daonet_core::rng::{rand_uniform, Rng};

struct Verdict {
    pass: bool,
    detail: String,
}

fn within(v: f64, target: f64, tol: f64) -> bool {
    (v / target - 1.0).abs() <= tol
}

fn invariant_suite() -> Verdict {
    let required = [
        "softmax.normalization",
        "channel_shuffle.bijection",
        "dafm.additivity",
        "dafm.residual_identity",
        "oahead.gate_range",
        "oahead.gate_spatially_constant",
        "dsconv.alpha_simplex",
        "dsconv.convexity",
        "dafm.shape",
        "oahead.shape",
        "dsconv.shape",
        "c2f_dsconv.shape",
        "model.scale_contract",
    ];
    let start = Instant::now();
    let results = checks::run_suite(0, SuiteOptions::default());
    let elapsed = start.elapsed();
    let failed: Vec<_> = results.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect();
    let missing: Vec<_> = required.iter().filter(|n| !results.iter().any(|r| r.name == **n)).collect();
    let faulty = checks::run_suite(0, SuiteOptions { fault: Some(Fault::NaiveSoftmax), timings: false });
    let caught = faulty.iter().any(|r| r.name == "softmax.normalization" && !r.pass);
    Verdict {
        pass: failed.is_empty() && missing.is_empty() && caught && elapsed < Duration::from_secs(60),
        detail: format!(
            "{}/{} green, failed {failed:?}, missing {missing:?}, injected fault caught: {caught}, {:.1}s < 60s",
            results.len() - failed.len(),
            results.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for t in Target::ALL {
        match gradcheck::check(t, 0) {
            Ok(r) => {
                pass &= r.passed();
                parts.push(format!("{t} max_rel={:.1e}", r.max_rel()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{t} error {e}"));
            }
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    Verdict { pass, detail: format!("{}, {:.1}s < 300s", parts.join(", "), elapsed.as_secs_f64()) }
}

fn cost_accounting() -> Verdict {
    let start = Instant::now();
    let report = |v: &str| model::cost_report(&ModelConfig::new(v.parse::<Variant>().unwrap())).unwrap();
    let (base, dao) = (report("baseline"), report("daonet"));
    let (dafm, oahead, dsconv) = (report("dafm"), report("oahead"), report("dsconv"));
    let quarter = Model::new(ModelConfig::baseline()).unwrap().cost_at(320).unwrap();
    let checks = [
        ("baseline params 3.0M±10%", within(base.params_m(), 3.0, 0.10)),
        ("baseline 8.1G±15%", within(base.gflops(), 8.1, 0.15)),
        ("daonet params < baseline", dao.total_params() < base.total_params()),
        ("daonet flops < baseline", dao.total_flops() < base.total_flops()),
        ("daonet 2.5M±15%", within(dao.params_m(), 2.5, 0.15)),
        ("daonet 5.5G±15%", within(dao.gflops(), 5.5, 0.15)),
        ("dafm params > baseline", dafm.total_params() > base.total_params()),
        ("dsconv params < baseline", dsconv.total_params() < base.total_params()),
        ("oahead flops < baseline", oahead.total_flops() < base.total_flops()),
        ("320 is a quarter of 640", 4 * quarter.total_flops() == base.total_flops()),
    ];
    let elapsed = start.elapsed();
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Verdict {
        pass: failed.is_empty() && elapsed < Duration::from_secs(10),
        detail: format!(
            "baseline {:.3}M/{:.3}G, daonet {:.3}M/{:.3}G, dafm {:.3}M, dsconv {:.3}M, oahead {:.3}G, failed {failed:?}, {:.2}s < 10s",
            base.params_m(),
            base.gflops(),
            dao.params_m(),
            dao.gflops(),
            dafm.params_m(),
            dsconv.params_m(),
            oahead.gflops(),
            elapsed.as_secs_f64()
        ),
    }
}

fn determinism() -> Verdict {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_daonet")).args(["--threads", threads, "check", "--seed", "42"]).output().expect("binary runs")
    };
    let (a, b, c) = (run("1"), run("1"), run("4"));
    let reports_equal = a.stdout == b.stdout && !a.stdout.is_empty();
    let threads_equal = a.stdout == c.stdout;
    let build = |seed| Model::build(ModelConfig::daonet(), &mut Rng::new(seed)).unwrap().1;
    let (s1, s2) = (build(5), build(5));
    let stores_equal = s1.bit_eq(&s2) && s1.to_bytes() == s2.to_bytes();
    Verdict {
        pass: reports_equal && threads_equal && stores_equal,
        detail: format!("check --seed 42 twice identical: {reports_equal}, --threads 4 identical: {threads_equal}, equal-seed stores identical: {stores_equal}"),
    }
}

fn primitive_oracles() -> Verdict {
    let mut rng = Rng::new(2024);
    let mut r = |dims: &[usize]| rand_uniform(&mut rng, dims, -1.0, 1.0).unwrap();
    let mut worst = [0f64; 3];
    // (n, c, h, w, out, kh, kw, stride, pad_h, pad_w, groups)
    let convs = [
        (2, 8, 9, 9, 8, 3, 3, 1, 1, 1, 1),
        (2, 8, 9, 9, 4, 3, 3, 2, 1, 1, 2),
        (1, 8, 9, 7, 8, 3, 3, 1, 1, 1, 8),
        (2, 6, 8, 9, 6, 1, 5, 1, 0, 2, 6),
        (1, 4, 9, 9, 8, 1, 1, 1, 0, 0, 1),
        (2, 8, 9, 9, 2, 5, 5, 1, 2, 2, 1),
    ];
    for (n, c, h, w, o, kh, kw, s, ph, pw, g) in convs {
        let x = r(&[n, c, h, w]);
        let wt = r(&[o, c / g, kh, kw]);
        let b = r(&[o]);
        let got = kernels::conv2d(&x, &wt, Some(&b), ConvGeom { stride: s, pad_h: ph, pad_w: pw, groups: g }).unwrap();
        let want = support::conv2d(&x, &wt, Some(&b), &support::Conv { stride: s, pad: (ph, pw), groups: g });
        worst[0] = worst[0].max(support::max_abs(&got, &want));
    }
    for (n, f, o) in [(2, 8, 8), (1, 648, 8), (2, 72, 3)] {
        let (x, w, b) = (r(&[n, f]), r(&[o, f]), r(&[o]));
        worst[1] = worst[1].max(support::max_abs(&kernels::linear(&x, &w, Some(&b)).unwrap(), &support::linear(&x, &w, Some(&b))));
    }
    for dims in [[2, 8, 9, 9], [1, 3, 1, 1], [2, 1, 9, 4]] {
        let x = r(&dims);
        worst[2] = worst[2].max(support::max_abs(&kernels::global_avg_pool(&x).unwrap(), &support::gap(&x)));
    }
    Verdict {
        pass: worst.iter().all(|&e| e <= 1e-5),
        detail: format!("max-abs conv2d {:.1e}, linear {:.1e}, gap {:.1e} (<= 1e-5)", worst[0], worst[1], worst[2]),
    }
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Verdict); 5] = [
        ("invariant suite", invariant_suite),
        ("gradient checks", gradient_checks),
        ("cost accounting", cost_accounting),
        ("determinism", determinism),
        ("primitive oracle equivalence", primitive_oracles),
    ];
    let mut all = true;
    println!();
    for (name, f) in criteria {
        let v = f();
        all &= v.pass;
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    assert!(all, "acceptance criteria failed");
}
