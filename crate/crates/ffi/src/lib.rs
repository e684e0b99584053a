//! C ABI for parsing scenarios, running the simulator and auditing traces.
//!
//! Every fallible function returns a [`CoactStatus`]; `COACT_STATUS_OK` is zero and
//! failures are negative. On failure a message is kept per thread and can be
//! read with [`coact_last_error`].
//!
//! Handles are opaque and owned by the caller, who frees each one exactly
//! once with its `_free` function. Strings returned by accessors belong to
//! the handle and stay valid until it is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use coact::mapping::Strategy;
use coact::report::Report;
use coact::sim::{run, Scenario, SimOptions};
use coact::trace::parse_trace_file;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoactStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidUtf8 = -2,
    Parse = -3,
    Validation = -4,
    MalformedTrace = -5,
    Panic = -6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoactStrategy {
    /// Whatever the scenario configures.
    Default = 0,
    Flatten = 1,
    Nested = 2,
}

/// Overrides for one run. `use_seed` selects whether `seed` replaces the
/// scenario seed, `strategy` holds a `CoactStrategy` value and a `horizon`
/// of zero keeps the scenario horizon.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CoactRunOptions {
    pub use_seed: bool,
    pub seed: u64,
    pub strategy: u32,
    pub horizon: u64,
}

pub struct CoactScenario(Scenario);

pub struct CoactRun {
    trace: CString,
    dump: CString,
    report: CString,
    passed: bool,
}

pub struct CoactAudit {
    report: CString,
    passed: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn cstring(s: String) -> CString {
    CString::new(s.replace('\0', " ")).unwrap_or_default()
}

type Fail = (CoactStatus, String);

/// Runs `f`, turning errors and panics into a status plus the thread's error
/// message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CoactStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CoactStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CoactStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err((CoactStatus::NullPointer, "null string".into()));
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|e| (CoactStatus::InvalidUtf8, e.to_string()))
}

fn null(what: &str) -> Fail {
    (CoactStatus::NullPointer, format!("null {what}"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coact_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or an empty string. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn coact_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses and validates scenario text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coact_scenario_parse(text: *const c_char, out: *mut *mut CoactScenario) -> CoactStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        unsafe { *out = ptr::null_mut() };
        let s = unsafe { self::text(text) }?;
        let sc = Scenario::parse_unchecked(s).map_err(|e| (CoactStatus::Parse, e.to_string()))?;
        sc.validate().map_err(|e| (CoactStatus::Validation, e.to_string()))?;
        unsafe { *out = Box::into_raw(Box::new(CoactScenario(sc))) };
        Ok(())
    })
}

/// # Safety
/// `sc` must come from [`coact_scenario_parse`] and not be freed already.
#[no_mangle]
pub unsafe extern "C" fn coact_scenario_free(sc: *mut CoactScenario) {
    if !sc.is_null() {
        drop(unsafe { Box::from_raw(sc) });
    }
}

/// Options that keep the scenario configuration.
#[no_mangle]
pub extern "C" fn coact_run_options_default() -> CoactRunOptions {
    CoactRunOptions { use_seed: false, seed: 0, strategy: CoactStrategy::Default as u32, horizon: 0 }
}

/// Simulates a scenario and audits the trace. `opts` may be null.
///
/// # Safety
/// `sc` must be a live scenario handle, `opts` null or valid, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn coact_run(
    sc: *const CoactScenario,
    opts: *const CoactRunOptions,
    out: *mut *mut CoactRun,
) -> CoactStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        unsafe { *out = ptr::null_mut() };
        let sc = unsafe { sc.as_ref() }.ok_or_else(|| null("scenario"))?;
        let o = unsafe { opts.as_ref() }.copied().unwrap_or_else(|| coact_run_options_default());
        let strategy = match o.strategy {
            0 => None,
            1 => Some(Strategy::Flatten),
            2 => Some(Strategy::Nested),
            n => return Err((CoactStatus::Validation, format!("unknown strategy {n}"))),
        };
        let opts = SimOptions {
            seed: o.use_seed.then_some(o.seed),
            strategy,
            horizon: (o.horizon > 0).then_some(o.horizon),
            ..SimOptions::default()
        };
        let r = run(&sc.0, &opts).map_err(|e| (CoactStatus::Validation, e.to_string()))?;
        let rep = Report::from_run(&r).map_err(|e| (CoactStatus::MalformedTrace, e.to_string()))?;
        let handle = CoactRun {
            trace: cstring(r.trace_file()),
            dump: cstring(r.dump.clone()),
            report: cstring(rep.to_text()),
            passed: rep.passed(),
        };
        unsafe { *out = Box::into_raw(Box::new(handle)) };
        Ok(())
    })
}

/// Full trace file text, dump included, or null for a null handle.
///
/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn coact_run_trace(r: *const CoactRun) -> *const c_char {
    unsafe { r.as_ref() }.map_or(ptr::null(), |r| r.trace.as_ptr())
}

/// Final stable state in the dump format.
///
/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn coact_run_dump(r: *const CoactRun) -> *const c_char {
    unsafe { r.as_ref() }.map_or(ptr::null(), |r| r.dump.as_ptr())
}

/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn coact_run_report(r: *const CoactRun) -> *const c_char {
    unsafe { r.as_ref() }.map_or(ptr::null(), |r| r.report.as_ptr())
}

/// 1 if every audit passed, 0 if not, `COACT_STATUS_NULL_POINTER` for null.
///
/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn coact_run_passed(r: *const CoactRun) -> i32 {
    unsafe { r.as_ref() }.map_or(CoactStatus::NullPointer as i32, |r| i32::from(r.passed))
}

/// # Safety
/// `r` must come from [`coact_run`] and not be freed already.
#[no_mangle]
pub unsafe extern "C" fn coact_run_free(r: *mut CoactRun) {
    if !r.is_null() {
        drop(unsafe { Box::from_raw(r) });
    }
}

/// Audits trace file text as written by a run.
///
/// # Safety
/// `trace` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coact_audit_trace(trace: *const c_char, out: *mut *mut CoactAudit) -> CoactStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        unsafe { *out = ptr::null_mut() };
        let s = unsafe { text(trace) }?;
        let tf = parse_trace_file(s).map_err(|e| (CoactStatus::MalformedTrace, e.to_string()))?;
        let rep = Report::from_events(&tf.events, &tf.dump).map_err(|e| (CoactStatus::MalformedTrace, e.to_string()))?;
        let handle = CoactAudit { report: cstring(rep.to_text()), passed: rep.passed() };
        unsafe { *out = Box::into_raw(Box::new(handle)) };
        Ok(())
    })
}

/// # Safety
/// `a` must be null or a live audit handle.
#[no_mangle]
pub unsafe extern "C" fn coact_audit_report(a: *const CoactAudit) -> *const c_char {
    unsafe { a.as_ref() }.map_or(ptr::null(), |a| a.report.as_ptr())
}

/// 1 if every audit passed, 0 if not, `COACT_STATUS_NULL_POINTER` for null.
///
/// # Safety
/// `a` must be null or a live audit handle.
#[no_mangle]
pub unsafe extern "C" fn coact_audit_passed(a: *const CoactAudit) -> i32 {
    unsafe { a.as_ref() }.map_or(CoactStatus::NullPointer as i32, |a| i32::from(a.passed))
}

/// # Safety
/// `a` must come from [`coact_audit_trace`] and not be freed already.
#[no_mangle]
pub unsafe extern "C" fn coact_audit_free(a: *mut CoactAudit) {
    if !a.is_null() {
        drop(unsafe { Box::from_raw(a) });
    }
}
