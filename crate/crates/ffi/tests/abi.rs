use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use daonet_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(daonet_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn forward_through_the_abi_matches_core() {
    unsafe {
        let mut w = ptr::null_mut();
        assert_eq!(daonet_weights_init(c("dafm").as_ptr(), 8, 4, &mut w), DaonetStatus::Ok);
        let dims = [1usize, 8, 4, 4];
        let data: Vec<f32> = (0..128).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut x = ptr::null_mut();
        assert_eq!(daonet_tensor_new(dims.as_ptr(), 4, data.as_ptr(), data.len(), &mut x), DaonetStatus::Ok);
        let mut y = ptr::null_mut();
        assert_eq!(daonet_module_forward(c("dafm").as_ptr(), w, x, &mut y), DaonetStatus::Ok);

        let (m, store) = daonet_core::runner::Module::init(
            daonet_core::runner::ModuleKind::Dafm,
            8,
            &mut daonet_core::rng::Rng::new(4),
        )
        .unwrap();
        let want = m.forward(&store, &daonet_core::Tensor::new(&dims, data).unwrap()).unwrap();
        let got = std::slice::from_raw_parts(daonet_tensor_data(y), daonet_tensor_len(y));
        assert_eq!(got, want.data());
        assert_eq!(daonet_tensor_checksum(y), want.checksum());
        assert_eq!(daonet_weights_param_count(w), store.param_count() as u64);

        daonet_tensor_free(y);
        daonet_tensor_free(x);
        daonet_weights_free(w);
    }
}

#[test]
fn files_roundtrip_and_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let tns = c(dir.path().join("t.tns").to_str().unwrap());
    let wts = c(dir.path().join("w.daow").to_str().unwrap());
    unsafe {
        let dims = [2usize, 3];
        let data = [1.0f32, -2.0, 3.5, 0.0, 1e-3, 7.0];
        let mut t = ptr::null_mut();
        assert_eq!(daonet_tensor_new(dims.as_ptr(), 2, data.as_ptr(), 6, &mut t), DaonetStatus::Ok);
        assert_eq!(daonet_tensor_write(t, tns.as_ptr()), DaonetStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(daonet_tensor_read(tns.as_ptr(), &mut back), DaonetStatus::Ok);
        assert_eq!(daonet_tensor_checksum(back), daonet_tensor_checksum(t));
        let mut d = [0usize; 2];
        assert_eq!(daonet_tensor_dims(back, d.as_mut_ptr(), 2), DaonetStatus::Ok);
        assert_eq!(d, dims);

        let mut bad = ptr::null_mut();
        assert_eq!(daonet_tensor_new(dims.as_ptr(), 2, data.as_ptr(), 5, &mut bad), DaonetStatus::Shape);
        assert!(bad.is_null());
        assert_eq!(daonet_tensor_read(c("/nonexistent.tns").as_ptr(), &mut bad), DaonetStatus::Io);
        assert_eq!(daonet_tensor_read(ptr::null(), &mut bad), DaonetStatus::NullArgument);
        assert!(last_error().contains("path"));

        let mut w = ptr::null_mut();
        assert_eq!(daonet_weights_init(c("oahead").as_ptr(), 8, 1, &mut w), DaonetStatus::Ok);
        assert_eq!(daonet_weights_save(w, wts.as_ptr()), DaonetStatus::Ok);
        let mut w2 = ptr::null_mut();
        assert_eq!(daonet_weights_load(wts.as_ptr(), &mut w2), DaonetStatus::Ok);
        assert_eq!(daonet_weights_param_count(w2), daonet_weights_param_count(w));

        // OAHead weights cannot drive DSConv.
        let mut y = ptr::null_mut();
        assert_eq!(daonet_module_forward(c("dsconv").as_ptr(), w2, back, &mut y), DaonetStatus::MissingWeight);
        assert!(last_error().contains("dsconv"), "{}", last_error());

        std::fs::write(dir.path().join("w.daow"), b"DAOW").unwrap();
        assert_eq!(daonet_weights_load(wts.as_ptr(), &mut w2), DaonetStatus::Format);
        assert!(w2.is_null());

        daonet_tensor_free(t);
        daonet_tensor_free(back);
        daonet_weights_free(w);
        daonet_tensor_free(ptr::null_mut());
        daonet_weights_free(ptr::null_mut());
    }
}

#[test]
fn cost_matches_core() {
    let mut p = 0u64;
    let mut f = 0u64;
    unsafe {
        assert_eq!(daonet_cost(c("daonet").as_ptr(), 640, &mut p, &mut f), DaonetStatus::Ok);
    }
    let r = daonet_core::model::cost_report(&daonet_core::model::ModelConfig::daonet()).unwrap();
    assert_eq!((p, f), (r.total_params(), r.total_flops()));
    unsafe {
        assert_eq!(daonet_cost(c("dafm+x").as_ptr(), 640, &mut p, &mut f), DaonetStatus::Config);
        assert_eq!(daonet_cost(c("daonet").as_ptr(), 640, ptr::null_mut(), &mut f), DaonetStatus::NullArgument);
        assert!(!CStr::from_ptr(daonet_version()).to_bytes().is_empty());
    }
}

/// Directory holding the built `libdaonet_ffi.a`.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header_and_staticlib() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = lib_dir().join("libdaonet_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler is installed");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim().len(), 16);
}
