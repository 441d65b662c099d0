//! C ABI for vitrine.
//!
//! Every function returns a [`VtrStatus`]. On failure the message is
//! available from [`vtr_last_error`] on the same thread until the next call.
//! Strings returned through `out` parameters are owned by the caller and must
//! be released with [`vtr_string_free`]. Timestamps are Unix seconds, UTC.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vitrine_core::audit::{run_audit, AuditThresholds, EngineSubject, SyntheticShopSpec};
use vitrine_core::cco::llr;
use vitrine_core::events::IngestMode;
use vitrine_core::rules::{
    check_rules, compile_rules_document, parse_rules_document, protective_rules,
};
use vitrine_core::service::{Service, ServiceConfig, ServiceError};
use vitrine_core::Timestamp;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    ModelNotLoaded = 5,
    Io = 6,
    AuditFailed = 7,
    Internal = 8,
}

/// Opaque service handle.
pub struct VtrService {
    inner: Service,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(VtrStatus, String);

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::UnknownFrame(_) | ServiceError::UnknownUser(_) => VtrStatus::NotFound,
            ServiceError::ModelNotLoaded => VtrStatus::ModelNotLoaded,
            ServiceError::Storage(_) => VtrStatus::Io,
            ServiceError::BadRequest(_)
            | ServiceError::UserDeleted(_)
            | ServiceError::Event(_)
            | ServiceError::Config(_) => VtrStatus::InvalidArgument,
            _ => VtrStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure(VtrStatus::InvalidArgument, msg.to_string())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<VtrStatus, Failure>) -> VtrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            VtrStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(VtrStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(VtrStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn service<'a>(h: *const VtrService) -> Result<&'a Service, Failure> {
    h.as_ref()
        .map(|s| &s.inner)
        .ok_or_else(|| Failure(VtrStatus::NullPointer, "service handle is null".into()))
}

unsafe fn write_out(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(
            VtrStatus::NullPointer,
            "out pointer is null".into(),
        ));
    }
    let c =
        CString::new(s).map_err(|_| Failure(VtrStatus::Internal, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next vitrine call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn vtr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vtr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn vtr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Current time in Unix seconds.
#[no_mangle]
pub extern "C" fn vtr_now() -> i64 {
    Timestamp::now().secs()
}

/// Log-likelihood ratio of a 2×2 contingency table.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn vtr_llr(
    k11: u64,
    k12: u64,
    k21: u64,
    k22: u64,
    out: *mut f64,
) -> VtrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(
                VtrStatus::NullPointer,
                "out pointer is null".into(),
            ));
        }
        *out = llr(k11, k12, k21, k22).map_err(invalid)?;
        Ok(VtrStatus::Ok)
    })
}

/// Open a service from a JSON config file. On success `*out` owns the handle.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vtr_service_open(
    config_path: *const c_char,
    now: i64,
    out: *mut *mut VtrService,
) -> VtrStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        if out.is_null() {
            return Err(Failure(
                VtrStatus::NullPointer,
                "out pointer is null".into(),
            ));
        }
        let cfg = ServiceConfig::load(Path::new(path))?;
        let svc = Service::open(cfg, Timestamp(now))?;
        *out = Box::into_raw(Box::new(VtrService { inner: svc }));
        Ok(VtrStatus::Ok)
    })
}

/// Close a service handle. NULL is ignored.
///
/// # Safety
/// `svc` must come from [`vtr_service_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vtr_service_free(svc: *mut VtrService) {
    if !svc.is_null() {
        drop(Box::from_raw(svc));
    }
}

/// Ingest a JSON Lines batch. `*out_summary` receives a JSON summary.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_ingest_jsonl(
    svc: *const VtrService,
    body: *const c_char,
    lenient: bool,
    now: i64,
    out_summary: *mut *mut c_char,
) -> VtrStatus {
    guard(|| {
        let svc = service(svc)?;
        let mode = if lenient {
            IngestMode::Lenient
        } else {
            IngestMode::Strict
        };
        let summary = svc.ingest(str_arg(body, "body")?, mode, Timestamp(now))?;
        write_out(
            out_summary,
            serde_json::to_string(&summary).expect("summary serializes"),
        )?;
        Ok(VtrStatus::Ok)
    })
}

/// Retrain as of `as_of` and swap the serving snapshot.
///
/// # Safety
/// Pointers must be valid. `out_summary` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn vtr_train(
    svc: *const VtrService,
    as_of: i64,
    out_summary: *mut *mut c_char,
) -> VtrStatus {
    guard(|| {
        let summary = service(svc)?.retrain(Timestamp(as_of))?;
        if !out_summary.is_null() {
            write_out(
                out_summary,
                serde_json::to_string(&summary).expect("summary serializes"),
            )?;
        }
        Ok(VtrStatus::Ok)
    })
}

/// Serve a frame. `context_json` is an optional JSON object of string values.
/// `*out_json` receives the frame result including its disclosure.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_recommend(
    svc: *const VtrService,
    frame_id: *const c_char,
    user_id: *const c_char,
    context_json: *const c_char,
    now: i64,
    out_json: *mut *mut c_char,
) -> VtrStatus {
    guard(|| {
        let svc = service(svc)?;
        let context: BTreeMap<String, String> = match opt_str_arg(context_json, "context_json")? {
            Some(s) => {
                serde_json::from_str(s).map_err(|e| invalid(format!("context_json: {e}")))?
            }
            None => BTreeMap::new(),
        };
        let result = svc.recommend(
            str_arg(frame_id, "frame_id")?,
            str_arg(user_id, "user_id")?,
            &context,
            Timestamp(now),
        )?;
        let mut value = serde_json::to_value(&result).expect("frame serializes");
        value["disclosure_text"] = result.disclosure.render_text().into();
        write_out(out_json, value.to_string())?;
        Ok(VtrStatus::Ok)
    })
}

/// Static ranking-criteria sheet for a frame.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_criteria(
    svc: *const VtrService,
    frame_id: *const c_char,
    out_json: *mut *mut c_char,
) -> VtrStatus {
    guard(|| {
        let sheet = service(svc)?.criteria(str_arg(frame_id, "frame_id")?)?;
        write_out(
            out_json,
            serde_json::to_string(&sheet).expect("sheet serializes"),
        )?;
        Ok(VtrStatus::Ok)
    })
}

/// Set or clear the personalization opt-out; durable before returning.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_set_optout(
    svc: *const VtrService,
    user_id: *const c_char,
    opt_out: bool,
    now: i64,
) -> VtrStatus {
    guard(|| {
        service(svc)?.set_optout(str_arg(user_id, "user_id")?, opt_out, Timestamp(now))?;
        Ok(VtrStatus::Ok)
    })
}

/// Export a user's controls and events as JSON Lines.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_export_user(
    svc: *const VtrService,
    user_id: *const c_char,
    now: i64,
    out_jsonl: *mut *mut c_char,
) -> VtrStatus {
    guard(|| {
        let archive =
            service(svc)?.export_user_data(str_arg(user_id, "user_id")?, Timestamp(now))?;
        write_out(out_jsonl, archive)?;
        Ok(VtrStatus::Ok)
    })
}

/// Delete a user's data (tombstone plus log rewrite). Idempotent.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_delete_user(
    svc: *const VtrService,
    user_id: *const c_char,
    now: i64,
) -> VtrStatus {
    guard(|| {
        service(svc)?.delete_user_data(str_arg(user_id, "user_id")?, Timestamp(now))?;
        Ok(VtrStatus::Ok)
    })
}

/// Run the audit benchmark against the built-in engine. Any JSON argument may
/// be NULL for defaults (`rules_json` NULL = protective rules). The report is
/// written to `*out_report` either way; returns `AUDIT_FAILED` on a FAIL verdict.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_audit_run(
    spec_json: *const c_char,
    thresholds_json: *const c_char,
    rules_json: *const c_char,
    out_report: *mut *mut c_char,
) -> VtrStatus {
    guard(|| {
        let spec: SyntheticShopSpec = match opt_str_arg(spec_json, "spec_json")? {
            Some(s) => serde_json::from_str(s).map_err(|e| invalid(format!("spec_json: {e}")))?,
            None => SyntheticShopSpec::default(),
        };
        let thresholds: AuditThresholds = match opt_str_arg(thresholds_json, "thresholds_json")? {
            Some(s) => {
                serde_json::from_str(s).map_err(|e| invalid(format!("thresholds_json: {e}")))?
            }
            None => AuditThresholds::default(),
        };
        let rules = match opt_str_arg(rules_json, "rules_json")? {
            Some(s) => compile_rules_document(s).map_err(invalid)?,
            None => protective_rules(),
        };
        let report =
            run_audit(&mut EngineSubject::new(rules), &spec, &thresholds).map_err(invalid)?;
        write_out(out_report, report.to_json())?;
        if report.passed() {
            Ok(VtrStatus::Ok)
        } else {
            set_last_error(&format!(
                "failing checks: {}",
                report.failing_checks.join(", ")
            ));
            Ok(VtrStatus::AuditFailed)
        }
    })
}

/// Validate a rules document. `*out_errors` receives a JSON array of error
/// messages (empty when valid); returns `INVALID_ARGUMENT` if any.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtr_rules_check(
    rules_json: *const c_char,
    out_errors: *mut *mut c_char,
) -> VtrStatus {
    guard(|| {
        let errors: Vec<String> = match parse_rules_document(str_arg(rules_json, "rules_json")?) {
            Ok(raw) => check_rules(&raw)
                .1
                .iter()
                .map(ToString::to_string)
                .collect(),
            Err(e) => vec![e.to_string()],
        };
        write_out(
            out_errors,
            serde_json::to_string(&errors).expect("strings serialize"),
        )?;
        if errors.is_empty() {
            Ok(VtrStatus::Ok)
        } else {
            set_last_error(&errors.join("; "));
            Ok(VtrStatus::InvalidArgument)
        }
    })
}
