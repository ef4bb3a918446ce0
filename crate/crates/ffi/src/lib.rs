//! C ABI for the Top-W sampler.
//!
//! Metrics live behind integer handles in a process-wide registry, so a
//! stale or repeated release is reported as [`TopwStatus::InvalidHandle`]
//! instead of touching freed memory. Every entry point returns a
//! [`TopwStatus`]; on failure, [`topw_last_error`] yields a message for the
//! calling thread. Panics never cross the boundary.
//!
//! Buffers are borrowed for the duration of a call only. Token ids and
//! lengths are `size_t`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, LazyLock, RwLock};

use topw::harness::Rule;
use topw::{build_metric, process_logits, sample_from_masked, EmbeddingMatrix, Error, Regime, TokenMetric, TopWConfig};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopwStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A parameter or configuration value is out of range or malformed.
    InvalidArgument = 2,
    /// A configuration key is not recognized; the message lists valid keys.
    UnknownKey = 3,
    /// Buffer lengths disagree with each other or with the metric.
    Dimension = 4,
    /// Input data is unusable (zero-norm row, non-finite value, no finite logit).
    InvalidData = 5,
    /// The handle was never issued or has already been released.
    InvalidHandle = 6,
    /// The crop did not fit into the caller's buffer; the report is still filled.
    BufferTooSmall = 7,
    /// An internal panic was caught.
    Internal = 8,
}

/// Opaque metric handle. Zero is never issued.
pub type TopwMetric = u64;

/// Final regime of a decode step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopwRegime {
    Prefix = 0,
    Singleton = 1,
}

/// Per-step report filled by [`topw_process_logits`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopwReport {
    pub crop_len: usize,
    pub pool_size: usize,
    pub iterations_used: usize,
    pub converged_early: bool,
    pub regime: TopwRegime,
    /// Retained probability mass of the crop.
    pub gamma: f64,
    /// Entropy of the renormalized crop, in nats.
    pub crop_entropy: f64,
    pub elapsed_us: f64,
}

static NEXT_HANDLE: AtomicU64 = AtomicU64::new(1);
static METRICS: LazyLock<RwLock<HashMap<u64, Arc<TokenMetric>>>> = LazyLock::new(Default::default);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure {
    status: TopwStatus,
    message: String,
}

impl Failure {
    fn new(status: TopwStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownConfigKey { .. } => TopwStatus::UnknownKey,
            Error::Dimension(_) | Error::IndexOutOfRange { .. } => TopwStatus::Dimension,
            e if e.is_data_error() => TopwStatus::InvalidData,
            _ => TopwStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> TopwStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            TopwStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("internal error: panic caught at the C boundary");
            TopwStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(TopwStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be valid for reads of `len` values, or may be null when `len == 0`.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be valid for writes of `len` values.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(TopwStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn lookup(handle: TopwMetric) -> Result<Arc<TokenMetric>, Failure> {
    let map = METRICS.read().unwrap_or_else(|e| e.into_inner());
    map.get(&handle)
        .cloned()
        .ok_or_else(|| Failure::new(TopwStatus::InvalidHandle, format!("metric handle {handle} is not live")))
}

/// Message describing the last failure on the calling thread, or an empty
/// string after a successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn topw_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn topw_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Comma-separated list of the keys accepted by [`topw_process_logits`], as a
/// static NUL-terminated string.
#[no_mangle]
pub extern "C" fn topw_config_keys() -> *const c_char {
    static KEYS: LazyLock<CString> =
        LazyLock::new(|| CString::new(TopWConfig::KEYS.join(",")).expect("keys contain no NUL"));
    KEYS.as_ptr()
}

/// Builds a whitened metric from `n * m` row-major embeddings.
///
/// `data_len` is the number of floats behind `data` and must equal `n * m`.
///
/// # Safety
/// `data` must be valid for reads of `data_len` floats and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn topw_metric_new(
    data: *const f32,
    data_len: usize,
    n: usize,
    m: usize,
    epsilon: f64,
    out: *mut TopwMetric,
) -> TopwStatus {
    guard(|| {
        non_null(out, "out")?;
        let expected = n.checked_mul(m).ok_or_else(|| {
            Failure::new(TopwStatus::Dimension, format!("{n} x {m} embedding matrix overflows"))
        })?;
        if data_len != expected {
            return Err(Failure::new(
                TopwStatus::Dimension,
                format!("expected {expected} floats for a {n} x {m} matrix, got {data_len}"),
            ));
        }
        let values = slice(data, data_len, "data")?;
        let metric = build_metric(&EmbeddingMatrix::new(n, m, values.to_vec())?, epsilon)?;
        let handle = NEXT_HANDLE.fetch_add(1, Ordering::Relaxed);
        METRICS
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(handle, Arc::new(metric));
        *out = handle;
        Ok(())
    })
}

/// Releases a metric. Releasing an unknown or already released handle
/// returns [`TopwStatus::InvalidHandle`] and has no other effect. Calls
/// already running on the metric finish normally.
#[no_mangle]
pub extern "C" fn topw_metric_free(handle: TopwMetric) -> TopwStatus {
    guard(|| {
        METRICS
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&handle)
            .map(drop)
            .ok_or_else(|| Failure::new(TopwStatus::InvalidHandle, format!("metric handle {handle} is not live")))
    })
}

/// Vocabulary size of a metric.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn topw_metric_len(handle: TopwMetric, out: *mut usize) -> TopwStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = lookup(handle)?.len();
        Ok(())
    })
}

/// Distance between tokens `i` and `j`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn topw_metric_distance(handle: TopwMetric, i: usize, j: usize, out: *mut f64) -> TopwStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = lookup(handle)?.distance(i, j)?;
        Ok(())
    })
}

/// Runs the Top-W decoder on one logits vector.
///
/// Configuration is given as `n_pairs` key/value strings applied on top of
/// the defaults; see [`topw_config_keys`]. `masked_out` receives `n_logits`
/// floats: the original logit inside the crop and negative infinity outside.
/// When `crop_out` is non-null it receives the crop in selection order; if
/// `crop_capacity` is too small the call returns
/// [`TopwStatus::BufferTooSmall`] with `masked_out` and `report` filled.
///
/// # Safety
/// Every non-null pointer must be valid for the stated number of elements;
/// keys and values must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn topw_process_logits(
    handle: TopwMetric,
    logits: *const f32,
    n_logits: usize,
    keys: *const *const c_char,
    values: *const *const c_char,
    n_pairs: usize,
    masked_out: *mut f32,
    crop_out: *mut usize,
    crop_capacity: usize,
    report: *mut TopwReport,
) -> TopwStatus {
    guard(|| {
        non_null(report, "report")?;
        let metric = lookup(handle)?;
        let logits = slice(logits, n_logits, "logits")?;
        let masked_out = slice_mut(masked_out, n_logits, "masked_out")?;
        let keys = slice(keys, n_pairs, "keys")?;
        let values = slice(values, n_pairs, "values")?;
        let mut pairs = Vec::with_capacity(n_pairs);
        for (&k, &v) in keys.iter().zip(values) {
            pairs.push((text(k, "config key")?, text(v, "config value")?));
        }
        let config = TopWConfig::from_pairs(&pairs)?;
        if pairs.iter().any(|(k, _)| *k == "epsilon_whiten") && config.epsilon_whiten != metric.epsilon() {
            return Err(Failure::new(
                TopwStatus::InvalidArgument,
                format!(
                    "epsilon_whiten={} differs from the metric's epsilon {}; it is fixed when the metric is built",
                    config.epsilon_whiten,
                    metric.epsilon()
                ),
            ));
        }
        let (masked, step) = process_logits(logits, &metric, &config)?;
        masked_out.copy_from_slice(&masked);
        let members = step.crop.members();
        *report = TopwReport {
            crop_len: members.len(),
            pool_size: step.pool_size,
            iterations_used: step.iterations_used,
            converged_early: step.converged_early,
            regime: match step.regime() {
                Regime::Prefix => TopwRegime::Prefix,
                Regime::Singleton => TopwRegime::Singleton,
            },
            gamma: step.gamma,
            crop_entropy: step.crop_entropy,
            elapsed_us: step.elapsed.as_secs_f64() * 1e6,
        };
        write_crop(members, crop_out, crop_capacity)
    })
}

unsafe fn write_crop(members: &[usize], crop_out: *mut usize, capacity: usize) -> Result<(), Failure> {
    if crop_out.is_null() {
        return Ok(());
    }
    if capacity < members.len() {
        return Err(Failure::new(
            TopwStatus::BufferTooSmall,
            format!("crop has {} tokens but the buffer holds {capacity}", members.len()),
        ));
    }
    slice_mut(crop_out, members.len(), "crop_out")?.copy_from_slice(members);
    Ok(())
}

/// Applies a baseline truncation rule: `top_k:K`, `top_p:P`, `min_p:R` or
/// `top_h:A`. Crop handling matches [`topw_process_logits`]; `crop_len`
/// receives the crop size when non-null.
///
/// # Safety
/// As for [`topw_process_logits`]; `rule` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn topw_apply_baseline(
    logits: *const f32,
    n_logits: usize,
    rule: *const c_char,
    sel_temperature: f64,
    masked_out: *mut f32,
    crop_out: *mut usize,
    crop_capacity: usize,
    crop_len: *mut usize,
) -> TopwStatus {
    guard(|| {
        let logits = slice(logits, n_logits, "logits")?;
        let masked_out = slice_mut(masked_out, n_logits, "masked_out")?;
        let rule_text = text(rule, "rule")?;
        let config = match Rule::parse(rule_text, sel_temperature)? {
            Rule::Baseline(c) => c,
            Rule::TopW(_) => {
                return Err(Failure::new(
                    TopwStatus::InvalidArgument,
                    "topw is not a baseline rule; use topw_process_logits",
                ))
            }
        };
        let (masked, crop) = topw::apply_baseline(logits, &config)?;
        masked_out.copy_from_slice(&masked);
        if !crop_len.is_null() {
            *crop_len = crop.len();
        }
        write_crop(crop.members(), crop_out, crop_capacity)
    })
}

/// Draws a token from the softmax of masked logits at `temperature`.
/// Deterministic for a given seed.
///
/// # Safety
/// `masked` must be valid for `n` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn topw_sample(masked: *const f32, n: usize, temperature: f64, seed: u64, out: *mut usize) -> TopwStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = sample_from_masked(slice(masked, n, "masked")?, temperature, seed)?;
        Ok(())
    })
}
