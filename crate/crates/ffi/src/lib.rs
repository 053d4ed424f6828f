//! C ABI over the filter laboratory: reference filters behind opaque
//! handles, space accounting, and JSON-in/JSON-out experiment runs, so
//! other languages can drive the lab or test their own parameters against
//! it.
//!
//! Conventions: every function returns an [`FlbStatus`]; outputs go through
//! out-pointers; strings returned by the library must be released with
//! [`flb_string_free`]; the last error message is thread-local and readable
//! via [`flb_last_error_message`]. All entry points catch panics.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use filterlab::experiment::{run_experiment, ExperimentConfig};
use filterlab::filter::{self, ErrorRate, FilterError, FilterParams, ImplId};
use filterlab::{acceptance, FilterInstance, RandomTape};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ContractViolation = 3,
    RunFailed = 4,
    Panic = 5,
}

/// Opaque filter handle.
pub struct FlbFilter {
    inner: FilterInstance,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).ok();
    });
}

fn status_of(err: &FilterError) -> FlbStatus {
    match err {
        FilterError::ContractViolation(_) => FlbStatus::ContractViolation,
        _ => FlbStatus::InvalidArgument,
    }
}

fn guard<F: FnOnce() -> FlbStatus>(f: F) -> FlbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic inside filterlab");
            FlbStatus::Panic
        }
    }
}

/// Last error message for this thread, or null. Owned by the library; do
/// not free.
#[no_mangle]
pub extern "C" fn flb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.as_ptr(),
        None => ptr::null(),
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn flb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn parse_impl(impl_id: *const c_char) -> Result<ImplId, FlbStatus> {
    if impl_id.is_null() {
        set_error("impl_id is null");
        return Err(FlbStatus::NullPointer);
    }
    let s = match CStr::from_ptr(impl_id).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("impl_id is not valid UTF-8");
            return Err(FlbStatus::InvalidArgument);
        }
    };
    s.parse().map_err(|e: FilterError| {
        set_error(e.to_string());
        FlbStatus::InvalidArgument
    })
}

fn make_params(
    universe: u64,
    capacity: u64,
    eps_num: u64,
    eps_den: u64,
) -> Result<FilterParams, FlbStatus> {
    let rate = ErrorRate::new(eps_num, eps_den).map_err(|e| {
        set_error(e.to_string());
        FlbStatus::InvalidArgument
    })?;
    FilterParams::new(universe, capacity, rate).map_err(|e| {
        set_error(e.to_string());
        FlbStatus::InvalidArgument
    })
}

/// Creates an empty filter. `impl_id` is one of "fingerprint",
/// "bitmap_exact", "sticky_toy"; the error rate is eps_num/eps_den.
///
/// # Safety
/// `impl_id` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn flb_filter_new(
    impl_id: *const c_char,
    universe: u64,
    capacity: u64,
    eps_num: u64,
    eps_den: u64,
    seed: u64,
    out: *mut *mut FlbFilter,
) -> FlbStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return FlbStatus::NullPointer;
        }
        let impl_id = match parse_impl(impl_id) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let params = match make_params(universe, capacity, eps_num, eps_den) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match filter::initialize(params, RandomTape::new(seed), impl_id) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FlbFilter { inner }));
                FlbStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Releases a filter handle. Null is a no-op.
///
/// # Safety
/// `filter` must be null or a pointer from `flb_filter_new`.
#[no_mangle]
pub unsafe extern "C" fn flb_filter_free(filter: *mut FlbFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// # Safety
/// Valid handle and out pointer required.
#[no_mangle]
pub unsafe extern "C" fn flb_filter_query(
    filter: *const FlbFilter,
    key: u64,
    out: *mut bool,
) -> FlbStatus {
    guard(|| {
        let (Some(filter), false) = (filter.as_ref(), out.is_null()) else {
            set_error("null pointer");
            return FlbStatus::NullPointer;
        };
        match filter.inner.query(key) {
            Ok(hit) => {
                *out = hit;
                FlbStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// Valid handle required.
#[no_mangle]
pub unsafe extern "C" fn flb_filter_insert(filter: *mut FlbFilter, key: u64) -> FlbStatus {
    guard(|| {
        let Some(filter) = filter.as_mut() else {
            set_error("null pointer");
            return FlbStatus::NullPointer;
        };
        match filter.inner.insert(key) {
            Ok(()) => FlbStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// Valid handle required.
#[no_mangle]
pub unsafe extern "C" fn flb_filter_delete(filter: *mut FlbFilter, key: u64) -> FlbStatus {
    guard(|| {
        let Some(filter) = filter.as_mut() else {
            set_error("null pointer");
            return FlbStatus::NullPointer;
        };
        match filter.inner.delete(key) {
            Ok(()) => FlbStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Current true-set size.
///
/// # Safety
/// Valid handle and out pointer required.
#[no_mangle]
pub unsafe extern "C" fn flb_filter_len(filter: *const FlbFilter, out: *mut u64) -> FlbStatus {
    guard(|| {
        let (Some(filter), false) = (filter.as_ref(), out.is_null()) else {
            set_error("null pointer");
            return FlbStatus::NullPointer;
        };
        *out = filter.inner.len();
        FlbStatus::Ok
    })
}

/// Canonical state serialization (little-endian length-prefixed memory
/// bits). Call with a null buffer to query the required size.
///
/// # Safety
/// Valid handle and size pointer required; `buf` must hold `buf_len` bytes
/// when non-null.
#[no_mangle]
pub unsafe extern "C" fn flb_filter_serialize(
    filter: *const FlbFilter,
    buf: *mut u8,
    buf_len: usize,
    written: *mut usize,
) -> FlbStatus {
    guard(|| {
        let (Some(filter), false) = (filter.as_ref(), written.is_null()) else {
            set_error("null pointer");
            return FlbStatus::NullPointer;
        };
        let bytes = filter.inner.serialize_canonical();
        *written = bytes.len();
        if buf.is_null() {
            return FlbStatus::Ok;
        }
        if buf_len < bytes.len() {
            set_error(format!("buffer of {buf_len} bytes, need {}", bytes.len()));
            return FlbStatus::InvalidArgument;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        FlbStatus::Ok
    })
}

/// Accounted state size in bits for the given implementation and
/// parameters.
///
/// # Safety
/// `impl_id` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn flb_space_bits(
    impl_id: *const c_char,
    universe: u64,
    capacity: u64,
    eps_num: u64,
    eps_den: u64,
    out: *mut f64,
) -> FlbStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return FlbStatus::NullPointer;
        }
        let impl_id = match parse_impl(impl_id) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let params = match make_params(universe, capacity, eps_num, eps_den) {
            Ok(v) => v,
            Err(s) => return s,
        };
        *out = filter::space_bits(impl_id, &params);
        FlbStatus::Ok
    })
}

/// Runs an experiment from a JSON config (the `ExperimentConfig` schema)
/// and returns the bound report as JSON. Release the string with
/// `flb_string_free`.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string, `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn flb_run_experiment_json(
    config_json: *const c_char,
    out: *mut *mut c_char,
) -> FlbStatus {
    guard(|| {
        if config_json.is_null() || out.is_null() {
            set_error("null pointer");
            return FlbStatus::NullPointer;
        }
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("config is not valid UTF-8");
                return FlbStatus::InvalidArgument;
            }
        };
        let config = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return FlbStatus::InvalidArgument;
            }
        };
        match run_experiment(&config) {
            Ok(report) => match CString::new(report.to_json()) {
                Ok(s) => {
                    *out = s.into_raw();
                    FlbStatus::Ok
                }
                Err(_) => {
                    set_error("report contained an interior NUL");
                    FlbStatus::RunFailed
                }
            },
            Err(e) => {
                set_error(e.to_string());
                FlbStatus::RunFailed
            }
        }
    })
}

/// Runs one acceptance criterion (e.g. "A3"); `out_pass` receives the
/// verdict and `out_line` the human-readable line (release with
/// `flb_string_free`).
///
/// # Safety
/// All pointers must be valid; `id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn flb_acceptance_criterion(
    id: *const c_char,
    out_pass: *mut bool,
    out_line: *mut *mut c_char,
) -> FlbStatus {
    guard(|| {
        if id.is_null() || out_pass.is_null() || out_line.is_null() {
            set_error("null pointer");
            return FlbStatus::NullPointer;
        }
        let id = match CStr::from_ptr(id).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("id is not valid UTF-8");
                return FlbStatus::InvalidArgument;
            }
        };
        match acceptance::run_criterion(id) {
            Some(result) => {
                *out_pass = result.pass;
                match CString::new(result.line()) {
                    Ok(s) => {
                        *out_line = s.into_raw();
                        FlbStatus::Ok
                    }
                    Err(_) => FlbStatus::RunFailed,
                }
            }
            None => {
                set_error(format!("unknown criterion `{id}`"));
                FlbStatus::InvalidArgument
            }
        }
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn flb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
