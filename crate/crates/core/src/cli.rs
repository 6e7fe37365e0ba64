//! The `daonet` command line.
//!
//! Exit codes: 0 when everything passed or was skipped, 1 when a check
//! failed, 2 for bad arguments or malformed input files.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::checks::{self, Fault, SuiteOptions};
use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::gradcheck::{self, Target};
use crate::model::{self, DsconvScope, Model, ModelConfig, Variant};
use crate::rng::Rng;
use crate::runner::{Module, ModuleKind};
use crate::store::WeightStore;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

/// Max-abs agreement required between a module forward and a golden output.
pub const PARITY_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "daonet", version, about = "Invariant checks, gradient checks and cost accounting for the DAONet detector")]
struct Cli {
    /// Worker threads for convolution kernels. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every invariant on seeded random inputs.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
        /// Include per-check wall time (makes reports non-reproducible).
        #[arg(long)]
        timings: bool,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// dafm, oahead, dsconv, c2f_dsconv, model-toy, primitives or all.
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Print parameter and FLOP counts.
    Count {
        /// baseline, daonet, or a `+`-joined subset of dafm, oahead, dsconv.
        #[arg(long, default_value = "baseline")]
        variant: String,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long, value_enum, default_value_t = ScopeArg::BackboneAndNeck)]
        dsconv_scope: ScopeArg,
        /// Print all eight variants instead of one.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        json: bool,
    },
    /// Forward one module on a stored input.
    Run {
        #[arg(long)]
        module: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write randomly initialized weights for one module.
    Init {
        #[arg(long)]
        module: String,
        #[arg(long)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Zero the DAFM convs so the module reduces to its residual path.
        #[arg(long)]
        residual_only: bool,
    },
    /// Compare module outputs against golden files.
    Parity {
        #[arg(long)]
        golden: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    NaiveSoftmax,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Backbone,
    BackboneAndNeck,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start thread pool: {e}");
            return EXIT_INPUT;
        }
    };
    // Output is buffered because the pool needs a Send writer.
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(cli.command, &mut buf));
    let _ = out.write_all(&buf);
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_INPUT
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Check { seed, json, timings, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::NaiveSoftmax| Fault::NaiveSoftmax);
            cmd_check(seed, SuiteOptions { fault, timings }, json, out)
        }
        Command::Gradcheck { module, seed, json } => cmd_gradcheck(&module, seed, json, out),
        Command::Count { variant, imgsz, dsconv_scope, ablation, json } => {
            let scope = match dsconv_scope {
                ScopeArg::Backbone => DsconvScope::Backbone,
                ScopeArg::BackboneAndNeck => DsconvScope::BackboneAndNeck,
            };
            cmd_count(&variant, imgsz, scope, ablation, json, out)
        }
        Command::Run { module, weights, input, output } => cmd_run(&module, &weights, &input, &output, out),
        Command::Init { module, channels, seed, output, residual_only } => {
            cmd_init(&module, channels, seed, &output, residual_only, out)
        }
        Command::Parity { golden } => cmd_parity(&golden, out),
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn cmd_check(seed: u64, opts: SuiteOptions, json: bool, out: &mut dyn Write) -> Result<i32> {
    let results = checks::run_suite(seed, opts);
    let passed = results.iter().filter(|r| r.pass).count();
    if json {
        let v = serde_json::json!({ "seed": seed, "passed": passed, "total": results.len(), "checks": results });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("plain data")).map_err(io)?;
    } else {
        for r in &results {
            writeln!(out, "{}", r.line()).map_err(io)?;
        }
        writeln!(out, "{passed}/{} checks passed (seed {seed})", results.len()).map_err(io)?;
    }
    Ok(if passed == results.len() { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_gradcheck(module: &str, seed: u64, json: bool, out: &mut dyn Write) -> Result<i32> {
    let mut reports = Vec::new();
    match module {
        "all" => {
            for t in Target::ALL {
                reports.push(gradcheck::check(t, seed)?);
            }
        }
        "primitives" => {
            for p in gradcheck::primitive_problems(seed)? {
                reports.push(gradcheck::run(p, seed)?);
            }
        }
        m => reports.push(gradcheck::check(m.parse()?, seed)?),
    }
    let ok = reports.iter().all(|r| r.passed());
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&reports).expect("plain data")).map_err(io)?;
    } else {
        for r in &reports {
            for g in &r.groups {
                writeln!(
                    out,
                    "{} {:<12} {:<36} n={:<4} max_rel={:.3e} max_abs={:.3e}",
                    if g.pass { "PASS" } else { "FAIL" },
                    r.module,
                    g.group,
                    g.checked,
                    g.max_rel,
                    g.max_abs
                )
                .map_err(io)?;
            }
            writeln!(out, "{} {}: max_rel={:.3e}", if r.passed() { "PASS" } else { "FAIL" }, r.module, r.max_rel()).map_err(io)?;
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAIL })
}

fn write_report(label: &str, rep: &CostReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{label}").map_err(io)?;
    writeln!(out, "{:<40} {:>12} {:>16}", "layer", "params", "flops").map_err(io)?;
    for e in rep.entries() {
        writeln!(out, "{:<40} {:>12} {:>16}", e.path, e.params, e.flops).map_err(io)?;
    }
    writeln!(out, "total: {:.3} M params, {:.3} GFLOPs", rep.params_m(), rep.gflops()).map_err(io)?;
    Ok(())
}

fn cmd_count(variant: &str, imgsz: usize, scope: DsconvScope, ablation: bool, json: bool, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = ModelConfig::baseline();
    cfg.dsconv_scope = scope;
    cfg.input_size = imgsz;
    let rows: Vec<(Variant, CostReport)> = if ablation {
        model::ablation_grid(&cfg)?.into_iter().map(|r| (r.variant, r.report)).collect()
    } else {
        let v: Variant = variant.parse()?;
        vec![(v, Model::new(cfg.with_variant(v))?.cost_report()?)]
    };
    if json {
        let items: Vec<_> = rows
            .iter()
            .map(|(v, r)| {
                let mut j = r.to_json();
                j["variant"] = serde_json::json!(v.to_string());
                j["imgsz"] = serde_json::json!(imgsz);
                j
            })
            .collect();
        let doc = if ablation { serde_json::Value::Array(items) } else { items.into_iter().next().expect("one row") };
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("plain data")).map_err(io)?;
    } else if ablation {
        writeln!(out, "{:<16} {:>10} {:>10}", "variant", "params(M)", "GFLOPs").map_err(io)?;
        for (v, r) in &rows {
            writeln!(out, "{:<16} {:>10.3} {:>10.3}", v.to_string(), r.params_m(), r.gflops()).map_err(io)?;
        }
    } else {
        let (v, r) = &rows[0];
        write_report(&format!("variant {v} at {imgsz}x{imgsz}"), r, out)?;
    }
    Ok(EXIT_OK)
}

fn load_module(module: &str, weights: &Path) -> Result<(Module, WeightStore)> {
    let kind: ModuleKind = module.parse()?;
    let store = WeightStore::load(weights)?;
    Ok((Module::from_store(kind, &store)?, store))
}

fn cmd_run(module: &str, weights: &Path, input: &Path, output: &Path, out: &mut dyn Write) -> Result<i32> {
    let (m, store) = load_module(module, weights)?;
    let x = Tensor::read_tns(input)?;
    let y = m.forward(&store, &x)?;
    y.save_tns(output)?;
    writeln!(out, "dims {:?} checksum {:016x}", y.dims(), y.checksum()).map_err(io)?;
    Ok(EXIT_OK)
}

fn cmd_init(module: &str, channels: usize, seed: u64, output: &Path, residual_only: bool, out: &mut dyn Write) -> Result<i32> {
    let kind: ModuleKind = module.parse()?;
    let (m, mut store) = Module::init(kind, channels, &mut Rng::new(seed))?;
    if residual_only {
        m.make_residual_only(&mut store)?;
    }
    store.save(output)?;
    writeln!(out, "wrote {} tensors, {} params", store.len(), store.param_count()).map_err(io)?;
    Ok(EXIT_OK)
}

/// One golden case: a `*.json` file whose paths are relative to its directory.
#[derive(Debug, Deserialize)]
pub struct GoldenMeta {
    pub module: String,
    pub weights: String,
    pub input: String,
    pub expected: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn golden_cases(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    v.sort();
    Ok(v)
}

/// Max-abs difference between the module output and the expected tensor.
pub fn parity_case(meta_path: &Path) -> Result<(GoldenMeta, f64)> {
    let text = std::fs::read_to_string(meta_path)?;
    let meta: GoldenMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format { field: meta_path.display().to_string(), msg: e.to_string() })?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let (m, store) = load_module(&meta.module, &dir.join(&meta.weights))?;
    let x = Tensor::read_tns(dir.join(&meta.input))?;
    let want = Tensor::read_tns(dir.join(&meta.expected))?;
    let got = m.forward(&store, &x)?;
    let diff = got.max_abs_diff(&want).map_err(|e| Error::Format { field: meta.expected.clone(), msg: e.to_string() })?;
    Ok((meta, diff))
}

fn cmd_parity(dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let cases = golden_cases(dir)?;
    if cases.is_empty() {
        writeln!(out, "skipped: no golden cases in {}", dir.display()).map_err(io)?;
        return Ok(EXIT_OK);
    }
    let mut failed = 0;
    for path in &cases {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (meta, diff) = parity_case(path)?;
        let pass = diff <= PARITY_TOL;
        failed += usize::from(!pass);
        writeln!(
            out,
            "{} {:<24} {:<10} max_abs={:.3e} <= {:.0e}",
            if pass { "PASS" } else { "FAIL" },
            name,
            meta.module,
            diff,
            PARITY_TOL
        )
        .map_err(io)?;
    }
    writeln!(out, "{}/{} golden cases passed", cases.len() - failed, cases.len()).map_err(io)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAIL })
}
