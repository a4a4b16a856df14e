//! C ABI over the governance engine.
//!
//! Every fallible function returns an [`AgStatus`]; on failure the message is
//! available from [`ag_last_error_message`] on the same thread. Strings handed
//! out by this library are released with [`ag_string_free`], engines with
//! [`ag_engine_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use agentgov::drift::stats::js_divergence;
use agentgov::{compute_ari, Engine, EngineOptions, EnforcementMode, Policy, Report, ScoreSheet};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    PolicyError = 3,
    ParseError = 4,
    InvalidArgument = 5,
    WrongState = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgMode {
    Observe = 0,
    Enforce = 1,
}

enum State {
    Running(Box<Engine>),
    Finished(Box<Report>),
    Poisoned,
}

/// Opaque engine handle.
pub struct AgEngine {
    state: State,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: AgStatus, msg: impl Into<String>) -> AgStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> AgStatus) -> AgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(AgStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, AgStatus> {
    if p.is_null() {
        return Err(fail(AgStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AgStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> AgStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            AgStatus::Ok
        }
        Err(_) => fail(AgStatus::Panic, "output contained a nul byte"),
    }
}

/// Message of the last failure on this thread; empty when none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ag_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an engine. `policy_toml` may be null for the bundled default
/// policy; `mode` is an [`AgMode`] value.
///
/// # Safety
/// `policy_toml` is null or a valid nul-terminated string; `out` is a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn ag_engine_new(policy_toml: *const c_char, mode: i32, out: *mut *mut AgEngine) -> AgStatus {
    guard(|| {
        if out.is_null() {
            return fail(AgStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let policy = if policy_toml.is_null() {
            Policy::default_policy()
        } else {
            let text = match str_arg(policy_toml, "policy_toml") {
                Ok(t) => t,
                Err(s) => return s,
            };
            match Policy::from_toml(text, "<ffi>") {
                Ok(p) => p,
                Err(e) => return fail(AgStatus::PolicyError, e.to_string()),
            }
        };
        let mode = match mode {
            m if m == AgMode::Observe as i32 => EnforcementMode::Observe,
            m if m == AgMode::Enforce as i32 => EnforcementMode::Enforce,
            m => return fail(AgStatus::InvalidArgument, format!("unknown mode {m}")),
        };
        let opts = EngineOptions {
            mode,
            ..Default::default()
        };
        let engine = AgEngine {
            state: State::Running(Box::new(Engine::new(policy, opts))),
        };
        *out = Box::into_raw(Box::new(engine));
        AgStatus::Ok
    })
}

/// Pushes one JSONL event line (no trace header).
///
/// # Safety
/// `engine` comes from [`ag_engine_new`]; `line` is a valid nul-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn ag_engine_push_line(engine: *mut AgEngine, line: *const c_char) -> AgStatus {
    guard(|| {
        let Some(engine) = engine.as_mut() else {
            return fail(AgStatus::NullPointer, "engine is null");
        };
        let line = match str_arg(line, "line") {
            Ok(l) => l,
            Err(s) => return s,
        };
        let State::Running(e) = &mut engine.state else {
            return fail(AgStatus::WrongState, "engine already finished");
        };
        match e.push_line(line) {
            Ok(()) => AgStatus::Ok,
            Err(err) => fail(AgStatus::ParseError, err.to_string()),
        }
    })
}

/// Drains buffered events and fires outstanding deadlines. Further pushes
/// fail with `AG_STATUS_WRONG_STATE`.
///
/// # Safety
/// `engine` comes from [`ag_engine_new`].
#[no_mangle]
pub unsafe extern "C" fn ag_engine_finish(engine: *mut AgEngine) -> AgStatus {
    guard(|| {
        let Some(engine) = engine.as_mut() else {
            return fail(AgStatus::NullPointer, "engine is null");
        };
        match std::mem::replace(&mut engine.state, State::Poisoned) {
            State::Running(e) => {
                engine.state = State::Finished(Box::new(e.finish()));
                AgStatus::Ok
            }
            other => {
                engine.state = other;
                fail(AgStatus::WrongState, "engine already finished")
            }
        }
    })
}

unsafe fn finished<'a>(engine: *const AgEngine) -> Result<&'a Report, AgStatus> {
    let Some(engine) = engine.as_ref() else {
        return Err(fail(AgStatus::NullPointer, "engine is null"));
    };
    match &engine.state {
        State::Finished(r) => Ok(r),
        _ => Err(fail(AgStatus::WrongState, "call ag_engine_finish first")),
    }
}

/// The report as JSON. Release with [`ag_string_free`].
///
/// # Safety
/// `engine` comes from [`ag_engine_new`]; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ag_engine_report_json(engine: *const AgEngine, out: *mut *mut c_char) -> AgStatus {
    guard(|| {
        if out.is_null() {
            return fail(AgStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        match finished(engine) {
            Ok(r) => out_string(serde_json::to_string(r).expect("report serializes"), out),
            Err(s) => s,
        }
    })
}

/// Number of detections in the finished report.
///
/// # Safety
/// `engine` comes from [`ag_engine_new`]; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ag_engine_detection_count(engine: *const AgEngine, out: *mut u64) -> AgStatus {
    guard(|| {
        if out.is_null() {
            return fail(AgStatus::NullPointer, "out is null");
        }
        match finished(engine) {
            Ok(r) => {
                *out = r.detections.len() as u64;
                AgStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// # Safety
/// `engine` is null or comes from [`ag_engine_new`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn ag_engine_free(engine: *mut AgEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// # Safety
/// `s` is null or a string returned by this library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn ag_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// ARI of a 3x4 score sheet in row-major order (autonomy, adaptability,
/// continuity). Writes the index and the tier (1..=4).
///
/// # Safety
/// `scores` points at 12 bytes; `ari` and `tier` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ag_compute_ari(scores: *const u8, ari: *mut f64, tier: *mut u8) -> AgStatus {
    guard(|| {
        if scores.is_null() || ari.is_null() || tier.is_null() {
            return fail(AgStatus::NullPointer, "null argument");
        }
        let flat = std::slice::from_raw_parts(scores, 12);
        let mut rows = [[0u8; 4]; 3];
        for (i, v) in flat.iter().enumerate() {
            rows[i / 4][i % 4] = *v;
        }
        match ScoreSheet::new(rows) {
            Ok(sheet) => {
                let r = compute_ari(&sheet);
                *ari = r.ari;
                *tier = r.tier.value();
                AgStatus::Ok
            }
            Err(e) => fail(AgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Base-2 Jensen-Shannon divergence of two distributions of length `n`.
///
/// # Safety
/// `p` and `q` point at `n` doubles; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ag_js_divergence(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> AgStatus {
    guard(|| {
        if p.is_null() || q.is_null() || out.is_null() {
            return fail(AgStatus::NullPointer, "null argument");
        }
        let (p, q) = (std::slice::from_raw_parts(p, n), std::slice::from_raw_parts(q, n));
        match js_divergence(p, q) {
            Ok(v) => {
                *out = v;
                AgStatus::Ok
            }
            Err(e) => fail(AgStatus::InvalidArgument, e.to_string()),
        }
    })
}
