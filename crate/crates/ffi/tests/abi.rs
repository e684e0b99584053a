use std::ffi::{CStr, CString};
use std::ptr;

use coact_ffi::*;

const SCENARIO: &str = "\
[config]
seed = 2

[nodes]
n1 n2

[objects]
x n1 10
y n2 0

[action Move]
footprint = x y
test = x + y == 10
role a:
  read x
  write x = x - 4
  emit sent
role b:
  await sent
  read y
  write y = y + 4

[clients]
c Move a n1 0
c Move b n2 0
";

fn s(p: *const std::ffi::c_char) -> String {
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn parse(text: &str) -> (CoactStatus, *mut CoactScenario) {
    let c = CString::new(text).unwrap();
    let mut sc = ptr::null_mut();
    let st = unsafe { coact_scenario_parse(c.as_ptr(), &mut sc) };
    (st, sc)
}

#[test]
fn run_and_audit_round_trip() {
    let (st, sc) = parse(SCENARIO);
    assert_eq!(st, CoactStatus::Ok);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { coact_run(sc, ptr::null(), &mut run) }, CoactStatus::Ok);
    assert_eq!(unsafe { coact_run_passed(run) }, 1);
    let dump = s(unsafe { coact_run_dump(run) });
    assert!(dump.contains("x") && dump.contains("y"), "{dump}");
    assert!(s(unsafe { coact_run_report(run) }).contains("committed"));

    let trace = CString::new(s(unsafe { coact_run_trace(run) })).unwrap();
    let mut audit = ptr::null_mut();
    assert_eq!(unsafe { coact_audit_trace(trace.as_ptr(), &mut audit) }, CoactStatus::Ok);
    assert_eq!(unsafe { coact_audit_passed(audit) }, 1);
    unsafe {
        coact_audit_free(audit);
        coact_run_free(run);
        coact_scenario_free(sc);
    }
}

#[test]
fn options_select_seed_and_strategy() {
    let (_, sc) = parse(SCENARIO);
    let dumps: Vec<(String, String)> = [(7, 1), (7, 1), (8, 2)]
        .into_iter()
        .map(|(seed, strategy)| {
            let opts = CoactRunOptions { use_seed: true, seed, strategy, horizon: 0 };
            let mut run = ptr::null_mut();
            assert_eq!(unsafe { coact_run(sc, &opts, &mut run) }, CoactStatus::Ok);
            let out = (s(unsafe { coact_run_trace(run) }), s(unsafe { coact_run_dump(run) }));
            unsafe { coact_run_free(run) };
            out
        })
        .collect();
    assert_eq!(dumps[0], dumps[1]);
    assert_eq!(dumps[0].1, dumps[2].1);

    let bad = CoactRunOptions { strategy: 9, ..coact_run_options_default() };
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { coact_run(sc, &bad, &mut run) }, CoactStatus::Validation);
    assert!(run.is_null());
    assert!(s(coact_last_error()).contains("strategy"));
    unsafe { coact_scenario_free(sc) };
}

#[test]
fn error_codes() {
    let (st, sc) = parse("[nodes]\nn1\n[bogus]\n");
    assert_eq!(st, CoactStatus::Parse);
    assert!(sc.is_null());
    assert!(!s(coact_last_error()).is_empty());

    let (st, _) = parse("[nodes]\nn1\n[clients]\nc Missing r n1 0\n");
    assert_eq!(st, CoactStatus::Validation);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { coact_scenario_parse(ptr::null(), &mut out) }, CoactStatus::NullPointer);
    let c = CString::new("x").unwrap();
    assert_eq!(unsafe { coact_scenario_parse(c.as_ptr(), ptr::null_mut()) }, CoactStatus::NullPointer);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { coact_run(ptr::null(), ptr::null(), &mut run) }, CoactStatus::NullPointer);

    let bytes = [0x66u8, 0xff, 0x00];
    assert_eq!(unsafe { coact_scenario_parse(bytes.as_ptr().cast(), &mut out) }, CoactStatus::InvalidUtf8);

    let junk = CString::new("not a trace\n").unwrap();
    let mut audit = ptr::null_mut();
    assert_eq!(unsafe { coact_audit_trace(junk.as_ptr(), &mut audit) }, CoactStatus::MalformedTrace);
    assert!(audit.is_null());
}

#[test]
fn null_handles_are_tolerated() {
    assert!(unsafe { coact_run_trace(ptr::null()) }.is_null());
    assert!(unsafe { coact_audit_report(ptr::null()) }.is_null());
    assert_eq!(unsafe { coact_run_passed(ptr::null()) }, CoactStatus::NullPointer as i32);
    unsafe {
        coact_scenario_free(ptr::null_mut());
        coact_run_free(ptr::null_mut());
        coact_audit_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_the_crate() {
    assert_eq!(s(coact_version()), env!("CARGO_PKG_VERSION"));
}
