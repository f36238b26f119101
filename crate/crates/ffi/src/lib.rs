//! C ABI over the `tinyllama` crate.
//!
//! Models are opaque `TlModel` handles created by `tl_model_load` or
//! `tl_model_init` and released with `tl_model_free`. Every fallible call
//! returns a `TlStatus`; on failure the message is kept per thread and can be
//! copied out with `tl_last_error`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tinyllama::eval::choice_loglik;
use tinyllama::infer::{generate, GenerationConfig};
use tinyllama::model::{count_params, Model, ModelConfig};
use tinyllama::optim::LrSchedule;
use tinyllama::train::Checkpoint;
use tinyllama::Error;

/// Status codes. 2, 3 and 4 match the command line's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TlStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Bad configuration, argument or range.
    Usage = 2,
    /// Unreadable or malformed input data.
    Data = 3,
    Numerical = 4,
    /// The output buffer is too small; the needed length was written.
    BufferTooSmall = 5,
    /// A Rust panic was caught.
    Internal = 6,
}

/// A loaded model. Opaque to C.
pub struct TlModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(err: Error) -> TlStatus {
    let status = match err.exit_code() {
        2 => TlStatus::Usage,
        4 => TlStatus::Numerical,
        _ => TlStatus::Data,
    };
    set_error(err.to_string());
    status
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> TlStatus) -> TlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TlStatus::Internal
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            set_error(concat!(stringify!($p), " is null"));
            return TlStatus::NullPointer;
        })+
    };
}

/// # Safety
/// `ptr` must be valid for `len` reads, or `len` must be 0.
unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> &'a [T] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(ptr, len)
    }
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, TlStatus> {
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        TlStatus::Usage
    })
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `cap`. Returns the full message
/// length without the terminator; 0 when there is no error.
///
/// # Safety
/// `buf` must be valid for `cap` writes or be null.
#[no_mangle]
pub unsafe extern "C" fn tl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the weights of a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_model_load(path: *const c_char, out: *mut *mut TlModel) -> TlStatus {
    non_null!(path, out);
    guard(|| {
        let path = match c_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(Path::new(path)).and_then(|ck| Model::new(ck.model, ck.params)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(TlModel { model }));
                TlStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Freshly initialized model from a preset name (`desk`, `full`, `full-16h`).
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_model_init(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut TlModel,
) -> TlStatus {
    non_null!(preset, out);
    guard(|| {
        let name = match c_str(preset) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ModelConfig::preset(name).and_then(|cfg| Model::init(cfg, seed)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(TlModel { model }));
                TlStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_model_free(model: *mut TlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tl_model_vocab_size(model: *const TlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.vocab)
}

/// Context window, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tl_model_context_len(model: *const TlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.context_len)
}

/// Parameter count of a preset.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_preset_param_count(preset: *const c_char, out: *mut u64) -> TlStatus {
    non_null!(preset, out);
    guard(|| {
        let name = match c_str(preset) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ModelConfig::preset(name) {
            Ok(cfg) => {
                *out = count_params(&cfg);
                TlStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Warmup-cosine learning rate at `step`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_lr_at(
    lr_max: f64,
    lr_min: f64,
    warmup_steps: u64,
    total_steps: u64,
    step: u64,
    out: *mut f64,
) -> TlStatus {
    non_null!(out);
    guard(
        || match LrSchedule::new(lr_max, lr_min, warmup_steps, total_steps) {
            Ok(s) => {
                *out = s.lr_at(step);
                TlStatus::Ok
            }
            Err(e) => fail(e),
        },
    )
}

/// Continues a prompt. `temperature` 0 is greedy; `top_k` 0 disables top-k.
/// Generation stops at the end-of-sequence token or after `max_new`
/// tokens. New tokens go to `out_tokens`; their count to `out_len`. If
/// `out_cap` is smaller than `max_new`, nothing is generated, `out_len`
/// receives `max_new` and the call returns `BufferTooSmall`.
///
/// # Safety
/// `prompt` must be valid for `prompt_len` reads, `out_tokens` for `out_cap`
/// writes, and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn tl_generate(
    model: *const TlModel,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    temperature: f32,
    top_k: usize,
    seed: u64,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> TlStatus {
    non_null!(model, prompt, out_tokens, out_len);
    guard(|| {
        if out_cap < max_new {
            *out_len = max_new;
            set_error(format!(
                "output buffer holds {out_cap} tokens, {max_new} needed"
            ));
            return TlStatus::BufferTooSmall;
        }
        let m = &(*model).model;
        let prompt = slice(prompt, prompt_len);
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= m.cfg.vocab) {
            set_error(format!("token {bad} outside vocabulary of {}", m.cfg.vocab));
            return TlStatus::Usage;
        }
        let gen = GenerationConfig {
            max_new_tokens: max_new,
            temperature,
            top_k: (top_k > 0).then_some(top_k),
            seed,
            ..GenerationConfig::default()
        };
        match generate(m, prompt, &gen) {
            Ok(tokens) => {
                std::ptr::copy_nonoverlapping(tokens.as_ptr(), out_tokens, tokens.len());
                *out_len = tokens.len();
                TlStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Summed and per-token mean log-likelihood of `choice` after `context`.
///
/// # Safety
/// The token pointers must be valid for their lengths; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn tl_choice_loglik(
    model: *const TlModel,
    context: *const u32,
    context_len: usize,
    choice: *const u32,
    choice_len: usize,
    out_sum: *mut f64,
    out_mean: *mut f64,
) -> TlStatus {
    non_null!(model, context, choice, out_sum, out_mean);
    guard(|| {
        let m = &(*model).model;
        let (ctx, ch) = (slice(context, context_len), slice(choice, choice_len));
        if let Some(&bad) = ctx.iter().chain(ch).find(|&&t| t as usize >= m.cfg.vocab) {
            set_error(format!("token {bad} outside vocabulary of {}", m.cfg.vocab));
            return TlStatus::Usage;
        }
        match choice_loglik(m, ctx, ch) {
            Ok((sum, mean)) => {
                *out_sum = sum;
                *out_mean = mean;
                TlStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
