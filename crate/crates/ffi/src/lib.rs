//! C ABI over `daonet-core`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free`. Every fallible call returns a [`DaonetStatus`]
//! and, on failure, leaves a message retrievable with [`daonet_last_error`]
//! on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use daonet_core::model::{Model, ModelConfig, Variant};
use daonet_core::rng::Rng;
use daonet_core::runner::{Module, ModuleKind};
use daonet_core::store::WeightStore;
use daonet_core::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaonetStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    MissingWeight = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A 32-bit NCHW (or any rank) tensor.
pub struct DaonetTensor {
    inner: Tensor,
}

/// A set of named weights.
pub struct DaonetWeights {
    inner: WeightStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DaonetStatus {
    match e {
        Error::EmptyTensor | Error::Shape(_) | Error::NonScalarLoss(_) => DaonetStatus::Shape,
        Error::Config(_) | Error::NotOnTape(_) => DaonetStatus::Config,
        Error::MissingWeight(_) => DaonetStatus::MissingWeight,
        Error::Format { .. } => DaonetStatus::Format,
        Error::Io(_) => DaonetStatus::Io,
    }
}

struct Fail(DaonetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DaonetStatus::NullArgument, format!("`{what}` is null"))
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DaonetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DaonetStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())));
            DaonetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(DaonetStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn daonet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, nul-terminated crate version.
#[no_mangle]
pub extern "C" fn daonet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `len` floats into a new tensor with the given dims.
///
/// # Safety
/// `dims` must point to `rank` values and `data` to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_new(
    dims: *const usize,
    rank: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut DaonetTensor,
) -> DaonetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if dims.is_null() || (data.is_null() && len > 0) {
            return Err(null("dims/data"));
        }
        let dims = std::slice::from_raw_parts(dims, rank);
        let data = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        *out = boxed(DaonetTensor { inner: Tensor::new(dims, data)? });
        Ok(())
    })
}

/// Reads a `.tns` file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_read(path: *const c_char, out: *mut *mut DaonetTensor) -> DaonetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let t = Tensor::read_tns(str_arg(path, "path")?)?;
        *out = boxed(DaonetTensor { inner: t });
        Ok(())
    })
}

/// Writes a `.tns` file.
///
/// # Safety
/// `t` must be a live tensor handle and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_write(t: *const DaonetTensor, path: *const c_char) -> DaonetStatus {
    guard(|| {
        ref_arg(t, "tensor")?.inner.save_tns(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of dims; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_rank(t: *const DaonetTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.dims().len())
}

/// Number of elements; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_len(t: *const DaonetTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.len())
}

/// Copies the dims into `out`, which holds `cap` entries.
///
/// # Safety
/// `t` must be a live tensor handle and `out` point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_dims(t: *const DaonetTensor, out: *mut usize, cap: usize) -> DaonetStatus {
    guard(|| {
        let dims = ref_arg(t, "tensor")?.inner.dims();
        if out.is_null() {
            return Err(null("out"));
        }
        if cap < dims.len() {
            return Err(Fail(DaonetStatus::BufferTooSmall, format!("need {} dims, buffer holds {cap}", dims.len())));
        }
        ptr::copy_nonoverlapping(dims.as_ptr(), out, dims.len());
        Ok(())
    })
}

/// Borrowed pointer to the elements, valid while the handle lives.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_data(t: *const DaonetTensor) -> *const f32 {
    t.as_ref().map_or(ptr::null(), |t| t.inner.data().as_ptr())
}

/// Checksum of the tensor's `.tns` encoding, as printed by `daonet run`.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_checksum(t: *const DaonetTensor) -> u64 {
    t.as_ref().map_or(0, |t| t.inner.checksum())
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn daonet_tensor_free(t: *mut DaonetTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Loads a weight file.
///
/// # Safety
/// `path` must be nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn daonet_weights_load(path: *const c_char, out: *mut *mut DaonetWeights) -> DaonetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let s = WeightStore::load(str_arg(path, "path")?)?;
        *out = boxed(DaonetWeights { inner: s });
        Ok(())
    })
}

/// Randomly initialized weights for `module` (dafm, oahead, dsconv,
/// c2f_dsconv) at its default configuration.
///
/// # Safety
/// `module` must be nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn daonet_weights_init(
    module: *const c_char,
    channels: usize,
    seed: u64,
    out: *mut *mut DaonetWeights,
) -> DaonetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let kind: ModuleKind = str_arg(module, "module")?.parse()?;
        let (_, s) = Module::init(kind, channels, &mut Rng::new(seed))?;
        *out = boxed(DaonetWeights { inner: s });
        Ok(())
    })
}

/// # Safety
/// `w` must be a live weights handle and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn daonet_weights_save(w: *const DaonetWeights, path: *const c_char) -> DaonetStatus {
    guard(|| {
        ref_arg(w, "weights")?.inner.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Total scalar count; 0 for a null handle.
///
/// # Safety
/// `w` must be null or a live weights handle.
#[no_mangle]
pub unsafe extern "C" fn daonet_weights_param_count(w: *const DaonetWeights) -> u64 {
    w.as_ref().map_or(0, |w| w.inner.param_count() as u64)
}

/// # Safety
/// `w` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn daonet_weights_free(w: *mut DaonetWeights) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Forwards one module, configured from the stored weight dims.
///
/// # Safety
/// Handles must be live, `module` nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn daonet_module_forward(
    module: *const c_char,
    weights: *const DaonetWeights,
    input: *const DaonetTensor,
    out: *mut *mut DaonetTensor,
) -> DaonetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let kind: ModuleKind = str_arg(module, "module")?.parse()?;
        let store = &ref_arg(weights, "weights")?.inner;
        let x = &ref_arg(input, "input")?.inner;
        let y = Module::from_store(kind, store)?.forward(store, x)?;
        *out = boxed(DaonetTensor { inner: y });
        Ok(())
    })
}

/// Parameter and FLOP totals for a detector variant (`baseline`, `daonet`,
/// or a `+`-joined subset of dafm, oahead, dsconv) at `imgsz`.
///
/// # Safety
/// `variant` must be nul-terminated; `params` and `flops` writable.
#[no_mangle]
pub unsafe extern "C" fn daonet_cost(
    variant: *const c_char,
    imgsz: usize,
    params: *mut u64,
    flops: *mut u64,
) -> DaonetStatus {
    guard(|| {
        let v: Variant = str_arg(variant, "variant")?.parse()?;
        let (params, flops) = (out_arg(params, "params")?, out_arg(flops, "flops")?);
        let r = Model::new(ModelConfig::new(v))?.cost_at(imgsz)?;
        *params = r.total_params();
        *flops = r.total_flops();
        Ok(())
    })
}
