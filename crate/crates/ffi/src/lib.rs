//! C ABI over the icl-dst library.
//!
//! Conventions:
//! - every fallible call returns an [`IclStatus`]; on failure a message is
//!   available from `icl_last_error()` on the same thread
//! - strings handed out (`char **out`) are owned by the caller and released
//!   with `icl_string_free()`
//! - structured results are JSON text
//! - `IclStore` is opaque; create with `icl_store_load()`, release with
//!   `icl_store_free()`. A store may be queried from several threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use icl_dst::corpus::Utterance;
use icl_dst::embedder::{load_store, mock_embed, EmbeddingVector};
use icl_dst::eval::micro_metrics;
use icl_dst::harness::{run_experiment, ExperimentConfig, RunOptions};
use icl_dst::{render_history, repair_and_parse, DialogueState, HistoryMode, Prediction, Retriever};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Failed = 6,
    Panic = 7,
}

/// Loaded embedding store with a retriever over all of its vectors.
pub struct IclStore {
    retriever: Retriever,
    dim: usize,
    len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Error(IclStatus, String);

impl Error {
    fn arg(message: impl Into<String>) -> Self {
        Error(IclStatus::InvalidArgument, message.into())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> IclStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IclStatus::Ok,
        Ok(Err(Error(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {message}"));
            IclStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Error> {
    if p.is_null() {
        return Err(Error(IclStatus::NullPointer, format!("{name} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Error(IclStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, text: String) -> Result<(), Error> {
    if out.is_null() {
        return Err(Error(IclStatus::NullPointer, "out is NULL".into()));
    }
    let c = CString::new(text).map_err(|_| Error(IclStatus::Failed, "result contains a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn put_json(out: *mut *mut c_char, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string(value).map_err(|e| Error(IclStatus::Failed, e.to_string()))?;
    put_string(out, text)
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, name: &str) -> Result<T, Error> {
    serde_json::from_str(text).map_err(|e| Error(IclStatus::Parse, format!("{name}: {e}")))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on this thread; do not free.
#[no_mangle]
pub extern "C" fn icl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version; static, do not free.
#[no_mangle]
pub extern "C" fn icl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` is NULL or a string returned through an `out` parameter of this library.
#[no_mangle]
pub unsafe extern "C" fn icl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Repairs and parses model output. `*out` receives
/// `{"status", "value", "repaired_text", "applied_fixes"}`.
///
/// # Safety
/// `text` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn icl_repair_parse(text: *const c_char, out: *mut *mut c_char) -> IclStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        put_json(out, &repair_and_parse(text))
    })
}

/// Writes the `dim`-dimensional hashing embedding of `text` into `out`.
///
/// # Safety
/// `out` has room for `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn icl_mock_embed(text: *const c_char, dim: usize, out: *mut f32) -> IclStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if dim < 8 {
            return Err(Error::arg("dim must be at least 8"));
        }
        if out.is_null() {
            return Err(Error(IclStatus::NullPointer, "out is NULL".into()));
        }
        let v = mock_embed(text, dim);
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(v.values());
        Ok(())
    })
}

/// Renders a history given as a JSON array of `{"speaker", "text"}`.
/// `mode` is `user_only` or `user_agent`.
///
/// # Safety
/// Pointer arguments are nul-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn icl_render_history(
    history_json: *const c_char,
    mode: *const c_char,
    speaker_tags: bool,
    out: *mut *mut c_char,
) -> IclStatus {
    guard(|| {
        let history: Vec<Utterance> = parse_json(str_arg(history_json, "history_json")?, "history_json")?;
        let mode: HistoryMode = str_arg(mode, "mode")?.parse().map_err(Error::arg)?;
        put_string(out, render_history(&history, mode, speaker_tags))
    })
}

/// Micro precision/recall. Both arguments are JSON objects from sample id
/// to state (`{domain: {key: value}}`) with the same ids. `*out` receives
/// `{"precision", "recall", "correct", "predicted_total", "gold_total"}`.
///
/// # Safety
/// Pointer arguments are nul-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn icl_metrics(
    predicted_json: *const c_char,
    gold_json: *const c_char,
    out: *mut *mut c_char,
) -> IclStatus {
    guard(|| {
        let predicted: std::collections::BTreeMap<String, DialogueState> =
            parse_json(str_arg(predicted_json, "predicted_json")?, "predicted_json")?;
        let gold = parse_json(str_arg(gold_json, "gold_json")?, "gold_json")?;
        let predicted = predicted.into_iter().map(|(id, s)| (id, Prediction::from(s))).collect();
        let metrics = micro_metrics(&predicted, &gold).map_err(|e| Error::arg(e.to_string()))?;
        put_json(out, &metrics)
    })
}

/// Loads an emb-jsonl store.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn icl_store_load(path: *const c_char, out: *mut *mut IclStore) -> IclStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(Error(IclStatus::NullPointer, "out is NULL".into()));
        }
        let store = load_store(Path::new(path)).map_err(|e| Error(IclStatus::Io, e.to_string()))?;
        let handle = IclStore { retriever: Retriever::new(&store), dim: store.dimension(), len: store.len() };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `store` is NULL or a handle from `icl_store_load()` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icl_store_free(store: *mut IclStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of vectors, 0 for NULL.
///
/// # Safety
/// `store` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn icl_store_len(store: *const IclStore) -> usize {
    store.as_ref().map_or(0, |s| s.len)
}

/// Vector dimension, 0 for NULL.
///
/// # Safety
/// `store` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn icl_store_dim(store: *const IclStore) -> usize {
    store.as_ref().map_or(0, |s| s.dim)
}

/// Top-`k` neighbours of `query` (normalized here). `*out` receives
/// `[{"sample_id", "score"}, ...]`, most similar first.
///
/// # Safety
/// `store` is a live handle; `query` points to `dim` floats; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn icl_store_retrieve(
    store: *const IclStore,
    query: *const f32,
    dim: usize,
    k: usize,
    out: *mut *mut c_char,
) -> IclStatus {
    guard(|| {
        let store = store.as_ref().ok_or_else(|| Error(IclStatus::NullPointer, "store is NULL".into()))?;
        if query.is_null() {
            return Err(Error(IclStatus::NullPointer, "query is NULL".into()));
        }
        if dim != store.dim {
            return Err(Error::arg(format!("query has dimension {dim}, store has {}", store.dim)));
        }
        let values = std::slice::from_raw_parts(query, dim).to_vec();
        let query = EmbeddingVector::normalized(values).map_err(|e| Error::arg(e.to_string()))?;
        let result = store.retriever.retrieve(&query, k).map_err(|e| Error::arg(e.to_string()))?;
        put_json(out, &result)
    })
}

/// Runs (or resumes) the experiment described by a TOML config file.
/// `*out` receives the run report.
///
/// # Safety
/// `config_path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn icl_run_experiment(config_path: *const c_char, out: *mut *mut c_char) -> IclStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let config = ExperimentConfig::load(path).map_err(|e| Error::arg(e.to_string()))?;
        let report =
            run_experiment(&config, RunOptions::default()).map_err(|e| Error(IclStatus::Failed, e.to_string()))?;
        put_json(out, &report)
    })
}
