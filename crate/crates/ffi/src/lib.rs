//! C ABI over the attack-search engine.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`AsStatus`]; on failure, [`as_last_error`] describes the problem for
//! the calling thread. Strings returned through out-parameters are owned by
//! the caller and released with [`as_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use attack_search::attack::Budget;
use attack_search::dsl::{self, AttackProgram};
use attack_search::metrics::{evaluate, EvalOptions};
use attack_search::model::{Classifier, Dataset};
use attack_search::search::{greedy_sequence_search, SearchConfig};
use attack_search::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Range = 4,
    Config = 5,
    Io = 6,
    Runtime = 7,
    Panic = 8,
}

/// Parsed attack program.
pub struct AsProgram(AttackProgram);

/// Classifier, optionally with a detector.
pub struct AsModel(Classifier);

/// Labeled samples.
pub struct AsDataset(Dataset);

/// Evaluation options. Non-positive `budget_seconds` and zero
/// `budget_queries` mean "no limit"; with both unset the limit is one
/// second per sample and attack.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AsEvalOptions {
    pub eps: f64,
    pub seed: u64,
    pub draws: usize,
    pub budget_seconds: f64,
    pub budget_queries: u64,
    pub jobs: usize,
}

/// Headline numbers of an evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AsEvalSummary {
    pub rerr: f64,
    pub robust_accuracy: f64,
    pub clean_accuracy: f64,
    /// NaN when no sample was attacked.
    pub asr: f64,
    pub samples: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AsStatus {
    match e {
        Error::Parse { .. } => AsStatus::Parse,
        Error::Range(_) => AsStatus::Range,
        Error::Config(_) | Error::InvalidParam(_) => AsStatus::Config,
        Error::Io { .. } | Error::Format { .. } => AsStatus::Io,
        _ => AsStatus::Runtime,
    }
}

fn fail(status: AsStatus, message: &str) -> AsStatus {
    set_error(message);
    status
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard<F: FnOnce() -> Result<(), (AsStatus, String)>>(f: F) -> AsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AsStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, &m),
        Err(_) => fail(AsStatus::Panic, "internal panic"),
    }
}

fn lift(e: Error) -> (AsStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (AsStatus, String)> {
    if p.is_null() {
        return Err((AsStatus::NullArgument, format!("{name} is null")));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (AsStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, (AsStatus, String)> {
    // SAFETY: non-null handles come from this library and are still live.
    unsafe { p.as_ref() }.ok_or_else(|| (AsStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), (AsStatus, String)> {
    if p.is_null() {
        Err((AsStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn as_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn as_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn as_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Parses and validates an attack program.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_program_parse(text: *const c_char, out: *mut *mut AsProgram) -> AsStatus {
    guard(|| {
        out_arg(out, "out")?;
        let text = unsafe { str_arg(text, "text") }?;
        let p = dsl::parse(text).map_err(lift)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(AsProgram(p))) };
        Ok(())
    })
}

/// Canonical text of a program.
///
/// # Safety
/// `program` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_program_format(program: *const AsProgram, out: *mut *mut c_char) -> AsStatus {
    guard(|| {
        out_arg(out, "out")?;
        let p = unsafe { ref_arg(program, "program") }?;
        // SAFETY: checked non-null above.
        unsafe { *out = to_c(dsl::format(&p.0)) };
        Ok(())
    })
}

/// Number of attacks in a program; 0 for null.
///
/// # Safety
/// `program` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn as_program_len(program: *const AsProgram) -> usize {
    // SAFETY: null or live per the contract.
    unsafe { program.as_ref() }.map_or(0, |p| p.0.attacks.len())
}

/// # Safety
/// `program` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_program_free(program: *mut AsProgram) {
    if !program.is_null() {
        // SAFETY: produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(program) });
    }
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_model_load(path: *const c_char, out: *mut *mut AsModel) -> AsStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = unsafe { str_arg(path, "path") }?;
        let m = Classifier::load(Path::new(path)).map_err(lift)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(AsModel(m))) };
        Ok(())
    })
}

/// Number of classes of a model; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn as_model_num_classes(model: *const AsModel) -> usize {
    // SAFETY: null or live per the contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.0.num_classes())
}

/// # Safety
/// `model` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_model_free(model: *mut AsModel) {
    if !model.is_null() {
        // SAFETY: produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Loads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_dataset_load(path: *const c_char, out: *mut *mut AsDataset) -> AsStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = unsafe { str_arg(path, "path") }?;
        let d = Dataset::load(Path::new(path)).map_err(lift)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(AsDataset(d))) };
        Ok(())
    })
}

/// Number of samples; 0 for null.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn as_dataset_len(data: *const AsDataset) -> usize {
    // SAFETY: null or live per the contract.
    unsafe { data.as_ref() }.map_or(0, |d| d.0.len())
}

/// # Safety
/// `data` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_dataset_free(data: *mut AsDataset) {
    if !data.is_null() {
        // SAFETY: produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(data) });
    }
}

/// Runs `program` against `model` on `data` and fills `summary`. The
/// attack differentiates `surrogate` when given, else the model itself.
/// When `report_json` is non-null it receives the full report as JSON.
///
/// # Safety
/// Handles must be live (`surrogate` may be null); `options` and
/// `summary` must be valid pointers; `report_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn as_evaluate(
    model: *const AsModel,
    surrogate: *const AsModel,
    program: *const AsProgram,
    data: *const AsDataset,
    options: *const AsEvalOptions,
    summary: *mut AsEvalSummary,
    report_json: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        out_arg(summary, "summary")?;
        let model = unsafe { ref_arg(model, "model") }?;
        let program = unsafe { ref_arg(program, "program") }?;
        let data = unsafe { ref_arg(data, "data") }?;
        let o = unsafe { ref_arg(options, "options") }?;
        // SAFETY: null or live per the contract.
        let surrogate = unsafe { surrogate.as_ref() }.map_or(&model.0.graph, |s| &s.0.graph);
        let budget = match (o.budget_seconds > 0.0, o.budget_queries > 0) {
            (false, false) => Budget::seconds(1.0),
            (s, q) => Budget {
                seconds: s.then_some(o.budget_seconds),
                queries: q.then_some(o.budget_queries),
            },
        };
        let options = EvalOptions {
            eps: o.eps,
            seed: o.seed,
            draws: o.draws.max(1),
            budget,
            jobs: o.jobs,
        };
        let (report, _) = evaluate(&model.0, surrogate, &program.0, &data.0, &options).map_err(lift)?;
        let a = &report.aggregates;
        let s = AsEvalSummary {
            rerr: a.rerr,
            robust_accuracy: a.robust_accuracy,
            clean_accuracy: a.clean_accuracy,
            asr: a.asr.unwrap_or(f64::NAN),
            samples: a.samples,
        };
        // SAFETY: checked non-null above.
        unsafe { *summary = s };
        if !report_json.is_null() {
            let json = report.to_json().map_err(lift)?;
            // SAFETY: non-null per the check.
            unsafe { *report_json = to_c(json) };
        }
        Ok(())
    })
}

/// Runs the full search. `config_toml` (nullable) holds search settings in
/// the same form as the CLI's `--config` file. On success `program`
/// receives the winning sequence and `surrogate` the transformed model.
/// `report_json` (nullable) receives the search report.
///
/// # Safety
/// Handles must be live; out-pointers must be writable or, for
/// `surrogate` and `report_json`, null.
#[no_mangle]
pub unsafe extern "C" fn as_search(
    model: *const AsModel,
    data: *const AsDataset,
    config_toml: *const c_char,
    program: *mut *mut AsProgram,
    surrogate: *mut *mut AsModel,
    report_json: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        out_arg(program, "program")?;
        let model = unsafe { ref_arg(model, "model") }?;
        let data = unsafe { ref_arg(data, "data") }?;
        let config = if config_toml.is_null() {
            SearchConfig::default()
        } else {
            let text = unsafe { str_arg(config_toml, "config_toml") }?;
            toml::from_str::<SearchConfig>(text).map_err(|e| (AsStatus::Config, e.to_string()))?
        };
        let outcome = greedy_sequence_search(&model.0, &data.0, &config).map_err(lift)?;
        if !report_json.is_null() {
            let json = serde_json::to_string_pretty(&outcome.report).map_err(|e| (AsStatus::Runtime, e.to_string()))?;
            // SAFETY: non-null per the check.
            unsafe { *report_json = to_c(json) };
        }
        if !surrogate.is_null() {
            let s = Classifier::new(outcome.surrogate, model.0.detector);
            // SAFETY: non-null per the check.
            unsafe { *surrogate = Box::into_raw(Box::new(AsModel(s))) };
        }
        // SAFETY: checked non-null above.
        unsafe { *program = Box::into_raw(Box::new(AsProgram(outcome.program))) };
        Ok(())
    })
}
