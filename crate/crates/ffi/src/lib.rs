//! C interface to the arousal detector.
//!
//! Every function returns an [`ArousalStatus`]; on failure a message is
//! available from [`arousal_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use arousal::dsp::preprocess_record;
use arousal::evalstats::{kruskal_wallis, mann_whitney_u};
use arousal::events::{iou, Interval, ScoredEvent};
use arousal::experiments::{load_run, RunRecord};
use arousal::model::DetectionModel;
use arousal::nncore::{focal, huber};
use arousal::synthdata::{Channel, SignalRecord};
use arousal::training::predict_record;
use arousal::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArousalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Dependency = 6,
    Numerical = 7,
    Internal = 8,
}

fn status_of(e: &Error) -> ArousalStatus {
    match e {
        Error::Io { .. } => ArousalStatus::Io,
        Error::Parse { .. } | Error::Version { .. } | Error::Json(_) | Error::Toml(_) | Error::Validation(_) => {
            ArousalStatus::Format
        }
        Error::Shape(_) | Error::Alignment(_) | Error::Sampling(_) => ArousalStatus::Shape,
        Error::Dependency(_) => ArousalStatus::Dependency,
        Error::Divergence { .. } | Error::Design(_) => ArousalStatus::Numerical,
        Error::State(_) => ArousalStatus::Internal,
        _ => ArousalStatus::InvalidArgument,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F>(f: F) -> ArousalStatus
where
    F: FnOnce() -> Result<(), (ArousalStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArousalStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ArousalStatus::Internal
        }
    }
}

fn fail<T>(status: ArousalStatus, msg: impl Into<String>) -> Result<T, (ArousalStatus, String)> {
    Err((status, msg.into()))
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (ArousalStatus, String)>;
}

impl<T> IntoFfi<T> for arousal::Result<T> {
    fn ffi(self) -> Result<T, (ArousalStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ArousalStatus, String)> {
    if p.is_null() {
        return fail(ArousalStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(ArousalStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (ArousalStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(ArousalStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the most recent failure on this thread, or null. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn arousal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library name and version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn arousal_version() -> *const c_char {
    concat!("arousal ", env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A trained detector loaded from a run directory.
pub struct ArousalModel {
    run: RunRecord,
    model: DetectionModel,
}

/// Detections returned by [`arousal_detect`].
pub struct ArousalEvents {
    events: Vec<ScoredEvent>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ArousalEvent {
    pub start_s: f64,
    pub duration_s: f64,
    pub probability: f64,
}

/// Loads the run directory written by `arousal train`.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arousal_model_load(run_dir: *const c_char, out: *mut *mut ArousalModel) -> ArousalStatus {
    guard(|| {
        if out.is_null() {
            return fail(ArousalStatus::NullPointer, "out is null");
        }
        let dir = c_str(run_dir, "run_dir")?;
        let (run, model) = load_run(Path::new(dir)).ffi()?;
        *out = Box::into_raw(Box::new(ArousalModel { run, model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`arousal_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn arousal_model_free(model: *mut ArousalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input channels the model expects.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn arousal_model_channels(model: *const ArousalModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.channels)
}

/// Detection threshold selected on the run's evaluation split.
///
/// # Safety
/// `model` must be a live handle or null (returns NaN).
#[no_mangle]
pub unsafe extern "C" fn arousal_model_threshold(model: *const ArousalModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.run.tau())
}

/// Name of input channel `index`, or null when out of range.
///
/// # Safety
/// `model` must be a live handle or null. The string lives as long as the handle.
#[no_mangle]
pub unsafe extern "C" fn arousal_model_channel_name(model: *const ArousalModel, index: usize) -> *const c_char {
    thread_local! {
        static NAMES: RefCell<Vec<CString>> = const { RefCell::new(Vec::new()) };
    }
    let Some(m) = model.as_ref() else {
        return ptr::null();
    };
    let Some(name) = m.run.spec.channels.get(index) else {
        return ptr::null();
    };
    NAMES.with(|n| {
        let mut n = n.borrow_mut();
        if let Some(c) = n.iter().find(|c| c.to_bytes() == name.as_bytes()) {
            return c.as_ptr();
        }
        n.push(CString::new(name.as_str()).unwrap_or_default());
        n.last().map_or(ptr::null(), |c| c.as_ptr())
    })
}

/// Detects arousals in a raw recording.
///
/// `samples` holds `n_channels` rows of `n_samples` values each (row-major),
/// in the order reported by [`arousal_model_channel_name`], sampled at
/// `sample_rate_hz`. The signal is preprocessed exactly as in training.
/// A negative `threshold` uses the model's own.
///
/// # Safety
/// `samples` must point to `n_channels * n_samples` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn arousal_detect(
    model: *mut ArousalModel,
    samples: *const f64,
    n_channels: usize,
    n_samples: usize,
    sample_rate_hz: f64,
    threshold: f64,
    out: *mut *mut ArousalEvents,
) -> ArousalStatus {
    guard(|| {
        let Some(m) = model.as_mut() else {
            return fail(ArousalStatus::NullPointer, "model is null");
        };
        if out.is_null() {
            return fail(ArousalStatus::NullPointer, "out is null");
        }
        if n_channels != m.model.config.channels {
            return fail(
                ArousalStatus::Shape,
                format!("model expects {} channels, got {n_channels}", m.model.config.channels),
            );
        }
        if !(sample_rate_hz > 0.0) {
            return fail(ArousalStatus::InvalidArgument, "sample rate must be positive");
        }
        let data = slice(samples, n_channels * n_samples, "samples")?;
        let channels = m
            .run
            .spec
            .channels
            .iter()
            .zip(data.chunks(n_samples.max(1)))
            .map(|(name, row)| Channel {
                name: name.clone(),
                samples: row.to_vec(),
            })
            .collect();
        let record = SignalRecord {
            record_id: "input".into(),
            sample_rate_hz,
            channels,
            events: Vec::new(),
            duration_s: n_samples as f64 / sample_rate_hz,
        };
        let pre = preprocess_record(&record, &m.run.config.pipeline).ffi()?;
        let train = &m.run.config.train;
        let preds = predict_record(&mut m.model, &pre.record, train, train.batch_size).ffi()?;
        let tau = if threshold < 0.0 { m.run.tau() } else { threshold };
        let events = preds.detections(tau, train.iou_threshold);
        *out = Box::into_raw(Box::new(ArousalEvents { events }));
        Ok(())
    })
}

/// # Safety
/// `events` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn arousal_events_len(events: *const ArousalEvents) -> usize {
    events.as_ref().map_or(0, |e| e.events.len())
}

/// # Safety
/// `events` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn arousal_events_get(
    events: *const ArousalEvents,
    index: usize,
    out: *mut ArousalEvent,
) -> ArousalStatus {
    guard(|| {
        let Some(e) = events.as_ref() else {
            return fail(ArousalStatus::NullPointer, "events is null");
        };
        if out.is_null() {
            return fail(ArousalStatus::NullPointer, "out is null");
        }
        let Some(ev) = e.events.get(index) else {
            return fail(
                ArousalStatus::InvalidArgument,
                format!("index {index} out of range ({} events)", e.events.len()),
            );
        };
        *out = ArousalEvent {
            start_s: ev.start_s,
            duration_s: ev.duration_s,
            probability: ev.probability,
        };
        Ok(())
    })
}

/// # Safety
/// `events` must come from [`arousal_detect`] or be null.
#[no_mangle]
pub unsafe extern "C" fn arousal_events_free(events: *mut ArousalEvents) {
    if !events.is_null() {
        drop(Box::from_raw(events));
    }
}

/// Intersection over union of two intervals given as start and duration.
#[no_mangle]
pub extern "C" fn arousal_iou(a_start: f64, a_duration: f64, b_start: f64, b_duration: f64) -> f64 {
    iou(Interval::new(a_start, a_duration), Interval::new(b_start, b_duration))
}

#[no_mangle]
pub extern "C" fn arousal_huber(u: f64) -> f64 {
    huber(u)
}

/// `-alpha (1 - p)^gamma ln p`
#[no_mangle]
pub extern "C" fn arousal_focal(p: f64, alpha: f64, gamma: f64) -> f64 {
    focal(p, alpha, gamma)
}

/// Two-sided Mann-Whitney U test.
///
/// # Safety
/// `a` and `b` must point to `n_a` and `n_b` doubles; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn arousal_mann_whitney(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    u: *mut f64,
    p: *mut f64,
) -> ArousalStatus {
    guard(|| {
        if u.is_null() || p.is_null() {
            return fail(ArousalStatus::NullPointer, "output pointer is null");
        }
        let r = mann_whitney_u(slice(a, n_a, "a")?, slice(b, n_b, "b")?).ffi()?;
        *u = r.u;
        *p = r.p;
        Ok(())
    })
}

/// Kruskal-Wallis H test over `n_groups` groups stored back to back in
/// `values`, with sizes in `group_sizes`.
///
/// # Safety
/// `group_sizes` must hold `n_groups` entries and `values` their sum.
#[no_mangle]
pub unsafe extern "C" fn arousal_kruskal_wallis(
    values: *const f64,
    group_sizes: *const usize,
    n_groups: usize,
    h: *mut f64,
    p: *mut f64,
) -> ArousalStatus {
    guard(|| {
        if h.is_null() || p.is_null() || group_sizes.is_null() {
            return fail(ArousalStatus::NullPointer, "pointer argument is null");
        }
        let sizes = std::slice::from_raw_parts(group_sizes, n_groups);
        let all = slice(values, sizes.iter().sum(), "values")?;
        let mut groups = Vec::with_capacity(n_groups);
        let mut at = 0;
        for &s in sizes {
            groups.push(all[at..at + s].to_vec());
            at += s;
        }
        let r = kruskal_wallis(&groups).ffi()?;
        *h = r.h;
        *p = r.p;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_functions() {
        assert_eq!(arousal_huber(0.5), 0.125);
        assert!((arousal_focal(0.5, 0.25, 2.0) - 0.0433217).abs() < 1e-6);
        assert!((arousal_iou(0.0, 10.0, 5.0, 10.0) - 1.0 / 3.0).abs() < 1e-15);
        let v = unsafe { CStr::from_ptr(arousal_version()) }.to_str().unwrap();
        assert!(v.starts_with("arousal "));
    }

    #[test]
    fn statistics() {
        let (mut u, mut p) = (0.0, 0.0);
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let s = unsafe { arousal_mann_whitney(a.as_ptr(), 2, b.as_ptr(), 2, &mut u, &mut p) };
        assert_eq!(s, ArousalStatus::Ok);
        assert_eq!(u, 0.0);
        assert!((p - 1.0 / 3.0).abs() < 1e-12);

        let values = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let sizes = [2usize, 2, 2];
        let (mut h, mut p) = (0.0, 0.0);
        let s = unsafe { arousal_kruskal_wallis(values.as_ptr(), sizes.as_ptr(), 3, &mut h, &mut p) };
        assert_eq!(s, ArousalStatus::Ok);
        assert!((h - 4.571428).abs() < 1e-5);
    }

    #[test]
    fn errors_set_message() {
        let (mut u, mut p) = (0.0, 0.0);
        let s = unsafe { arousal_mann_whitney(ptr::null(), 0, ptr::null(), 0, &mut u, &mut p) };
        assert_eq!(s, ArousalStatus::Format);
        let msg = unsafe { CStr::from_ptr(arousal_last_error()) }.to_str().unwrap();
        assert!(msg.contains("non-empty"), "{msg}");

        let mut handle = ptr::null_mut();
        let dir = CString::new("/nonexistent/run").unwrap();
        let s = unsafe { arousal_model_load(dir.as_ptr(), &mut handle) };
        assert_eq!(s, ArousalStatus::Dependency);
        assert!(handle.is_null());
        assert_eq!(unsafe { arousal_model_load(ptr::null(), &mut handle) }, ArousalStatus::NullPointer);
    }
}
