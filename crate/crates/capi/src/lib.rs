//! C ABI over the simulator: experiment handles are opaque, every call
//! returns a status code, and the last failure message is kept per thread.
//!
//! The generated header lands in `include/fhpm.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use fhpm_sim::harness::{run_experiment, ExperimentConfig};
use fhpm_sim::workload::{generate_trace, write_trace, TraceSpec};

/// Call outcome. Anything but OK leaves a message for
/// `fhpm_last_error_message`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum FhpmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ValidationError = 4,
    IoError = 5,
    RunError = 6,
}

/// Opaque experiment handle; create with `fhpm_experiment_from_json` or
/// `fhpm_experiment_from_file`, release with `fhpm_experiment_free`.
pub struct FhpmExperiment {
    config: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn fail(status: FhpmStatus, message: String) -> FhpmStatus {
    set_error(message);
    status
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, FhpmStatus> {
    if ptr.is_null() {
        set_error("null pointer argument".into());
        return Err(FhpmStatus::NullPointer);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|e| {
        set_error(format!("argument is not UTF-8: {e}"));
        FhpmStatus::InvalidUtf8
    })
}

fn parse_config(text: &str) -> Result<ExperimentConfig, FhpmStatus> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
        set_error(format!("config parse error: {e}"));
        FhpmStatus::ParseError
    })?;
    config.resolve().map_err(|e| {
        set_error(format!("config validation error: {e}"));
        FhpmStatus::ValidationError
    })?;
    Ok(config)
}

fn export_handle(out: *mut *mut FhpmExperiment, config: ExperimentConfig) -> FhpmStatus {
    if out.is_null() {
        return fail(FhpmStatus::NullPointer, "null output pointer".into());
    }
    let handle = Box::new(FhpmExperiment { config });
    unsafe { *out = Box::into_raw(handle) };
    FhpmStatus::Ok
}

/// Parse and validate an experiment config from a JSON string.
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn fhpm_experiment_from_json(
    json: *const c_char,
    out: *mut *mut FhpmExperiment,
) -> FhpmStatus {
    let text = match unsafe { read_str(json) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    match parse_config(text) {
        Ok(config) => export_handle(out, config),
        Err(status) => status,
    }
}

/// Load and validate an experiment config from a JSON file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn fhpm_experiment_from_file(
    path: *const c_char,
    out: *mut *mut FhpmExperiment,
) -> FhpmStatus {
    let path = match unsafe { read_str(path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    let text = match std::fs::read_to_string(Path::new(path)) {
        Ok(t) => t,
        Err(e) => return fail(FhpmStatus::IoError, format!("cannot read {path}: {e}")),
    };
    match parse_config(&text) {
        Ok(config) => export_handle(out, config),
        Err(status) => status,
    }
}

/// Override the experiment seed.
///
/// # Safety
/// `handle` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn fhpm_experiment_set_seed(
    handle: *mut FhpmExperiment,
    seed: u64,
) -> FhpmStatus {
    match unsafe { handle.as_mut() } {
        Some(h) => {
            h.config.seed = seed;
            FhpmStatus::Ok
        }
        None => fail(FhpmStatus::NullPointer, "null experiment handle".into()),
    }
}

/// Run the experiment, writing its report files under `out_dir`.
///
/// # Safety
/// `handle` must be a live handle; `out_dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fhpm_experiment_run(
    handle: *const FhpmExperiment,
    out_dir: *const c_char,
) -> FhpmStatus {
    let handle = match unsafe { handle.as_ref() } {
        Some(h) => h,
        None => return fail(FhpmStatus::NullPointer, "null experiment handle".into()),
    };
    let out_dir = match unsafe { read_str(out_dir) } {
        Ok(d) => PathBuf::from(d),
        Err(status) => return status,
    };
    let resolved = match handle.config.resolve() {
        Ok(r) => r,
        Err(e) => return fail(FhpmStatus::ValidationError, e.to_string()),
    };
    match run_experiment(&resolved, &out_dir) {
        Ok(_) => FhpmStatus::Ok,
        Err(e) => fail(FhpmStatus::RunError, e.to_string()),
    }
}

/// Release a handle. Passing null is a no-op.
///
/// # Safety
/// `handle` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn fhpm_experiment_free(handle: *mut FhpmExperiment) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Registered experiment names as a JSON array. Free with
/// `fhpm_string_free`.
#[no_mangle]
pub extern "C" fn fhpm_experiment_names_json() -> *mut c_char {
    let names = fhpm_sim::harness::EXPERIMENT_NAMES;
    let json = serde_json::to_string(&names).expect("static names");
    CString::new(json).expect("no NUL").into_raw()
}

/// Generate a binary trace file from a trace-spec JSON string.
///
/// # Safety
/// Both arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fhpm_trace_generate(
    spec_json: *const c_char,
    out_path: *const c_char,
) -> FhpmStatus {
    let spec = match unsafe { read_str(spec_json) } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let out_path = match unsafe { read_str(out_path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    let spec: TraceSpec = match serde_json::from_str(spec) {
        Ok(s) => s,
        Err(e) => return fail(FhpmStatus::ParseError, format!("trace spec: {e}")),
    };
    let trace = match generate_trace(&spec) {
        Ok(t) => t,
        Err(e) => return fail(FhpmStatus::ValidationError, e.to_string()),
    };
    let file = match std::fs::File::create(Path::new(out_path)) {
        Ok(f) => f,
        Err(e) => return fail(FhpmStatus::IoError, format!("cannot create {out_path}: {e}")),
    };
    match write_trace(std::io::BufWriter::new(file), &trace) {
        Ok(()) => FhpmStatus::Ok,
        Err(e) => fail(FhpmStatus::IoError, e.to_string()),
    }
}

/// Message from the most recent failure on this thread, or null. Free with
/// `fhpm_string_free`.
#[no_mangle]
pub extern "C" fn fhpm_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(message) => message.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Free a string returned by this library. Passing null is a no-op.
///
/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn fhpm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn fhpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cstr(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn last_error() -> String {
        let ptr = fhpm_last_error_message();
        assert!(!ptr.is_null());
        let message = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_owned();
        unsafe { fhpm_string_free(ptr) };
        message
    }

    #[test]
    fn version_is_static_utf8() {
        let v = unsafe { CStr::from_ptr(fhpm_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn names_round_trip_as_json() {
        let ptr = fhpm_experiment_names_json();
        let json = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_owned();
        unsafe { fhpm_string_free(ptr) };
        let names: Vec<String> = serde_json::from_str(&json).unwrap();
        assert_eq!(names.len(), 6);
        assert!(names.contains(&"micro-tmm".to_string()));
    }

    #[test]
    fn json_handle_lifecycle_and_run() {
        let dir = tempfile::tempdir().unwrap();
        let json = cstr(r#"{"name": "vmexit-table", "seed": 4, "sweep": {"wss_mib": [2]}}"#);
        let mut handle: *mut FhpmExperiment = ptr::null_mut();
        let status = unsafe { fhpm_experiment_from_json(json.as_ptr(), &mut handle) };
        assert!(matches!(status, FhpmStatus::Ok));
        assert!(!handle.is_null());
        assert!(matches!(
            unsafe { fhpm_experiment_set_seed(handle, 9) },
            FhpmStatus::Ok
        ));
        let out_dir = cstr(dir.path().to_str().unwrap());
        let status = unsafe { fhpm_experiment_run(handle, out_dir.as_ptr()) };
        assert!(matches!(status, FhpmStatus::Ok));
        assert!(dir.path().join("vmexits.csv").exists());
        let manifest = std::fs::read_to_string(dir.path().join("run_manifest.json")).unwrap();
        assert!(manifest.contains("\"seed\": 9"));
        unsafe { fhpm_experiment_free(handle) };
    }

    #[test]
    fn parse_and_validation_errors_set_messages() {
        let mut handle: *mut FhpmExperiment = ptr::null_mut();
        let bad = cstr(r#"{"name": "vmexit-table", "pollicy": {}}"#);
        let status = unsafe { fhpm_experiment_from_json(bad.as_ptr(), &mut handle) };
        assert!(matches!(status, FhpmStatus::ParseError));
        assert!(last_error().contains("pollicy"));

        let range = cstr(r#"{"name": "micro-share", "policy": {"f_use": 1.5}}"#);
        let status = unsafe { fhpm_experiment_from_json(range.as_ptr(), &mut handle) };
        assert!(matches!(status, FhpmStatus::ValidationError));
        assert!(last_error().contains("policy.f_use"));
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut handle: *mut FhpmExperiment = ptr::null_mut();
        let status = unsafe { fhpm_experiment_from_json(ptr::null(), &mut handle) };
        assert!(matches!(status, FhpmStatus::NullPointer));
        let status = unsafe { fhpm_experiment_run(ptr::null(), ptr::null()) };
        assert!(matches!(status, FhpmStatus::NullPointer));
        unsafe { fhpm_experiment_free(ptr::null_mut()) };
        unsafe { fhpm_string_free(ptr::null_mut()) };
    }

    #[test]
    fn trace_generation_through_the_abi() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.bin");
        let spec = cstr(r#"{"wss": 2097152, "pattern": {"kind": "sequential"}, "events": 32, "seed": 1}"#);
        let out_c = cstr(out.to_str().unwrap());
        let status = unsafe { fhpm_trace_generate(spec.as_ptr(), out_c.as_ptr()) };
        assert!(matches!(status, FhpmStatus::Ok));
        let bytes = std::fs::read(&out).unwrap();
        assert_eq!(bytes.len(), 16 + 17 * 32);

        let bad = cstr(r#"{"wss": 0, "events": 0}"#);
        let status = unsafe { fhpm_trace_generate(bad.as_ptr(), out_c.as_ptr()) };
        assert!(matches!(status, FhpmStatus::ValidationError));
    }

    #[test]
    fn file_loading_reports_io_errors() {
        let mut handle: *mut FhpmExperiment = ptr::null_mut();
        let path = cstr("/nonexistent/fhpm.json");
        let status = unsafe { fhpm_experiment_from_file(path.as_ptr(), &mut handle) };
        assert!(matches!(status, FhpmStatus::IoError));
        assert!(last_error().contains("/nonexistent/fhpm.json"));
    }

    #[test]
    fn generated_header_covers_the_surface() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("include")
            .join("fhpm.h");
        let text = std::fs::read_to_string(header).expect("header generated at build");
        for symbol in [
            "fhpm_experiment_from_json",
            "fhpm_experiment_from_file",
            "fhpm_experiment_set_seed",
            "fhpm_experiment_run",
            "fhpm_experiment_free",
            "fhpm_experiment_names_json",
            "fhpm_trace_generate",
            "fhpm_last_error_message",
            "fhpm_string_free",
            "fhpm_version",
            "FhpmStatus",
            "FhpmExperiment",
        ] {
            assert!(text.contains(symbol), "header missing {symbol}");
        }
    }
}
