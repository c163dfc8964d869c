//! C ABI over the incrementality engine.
//!
//! Handles are opaque and owned by the caller, who frees them with the
//! matching `*_free`. Every entry point returns an [`IncrStatus`]; on
//! failure the message is available from [`incr_last_error`] on the same
//! thread. Inputs are NUL-terminated UTF-8 JSON.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use incrementality::attribution::{default_as_of, Attribution, SliceFilter};
use incrementality::bidding::{BidContext, BidPolicy, Bidder};
use incrementality::estimators::CoefficientSet;
use incrementality::events::ingest;
use incrementality::features::{FeatureKey, FeatureSet};
use incrementality::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IncrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON input.
    Parse = 3,
    Config = 4,
    Domain = 5,
    /// Event log failed validation.
    Validation = 6,
    /// Estimation or numeric failure.
    Numeric = 7,
    Io = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(IncrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::UnsupportedFamily(_) => IncrStatus::Config,
            Error::Domain(_) => IncrStatus::Domain,
            Error::Validation(_) => IncrStatus::Validation,
            Error::Io(_) => IncrStatus::Io,
            Error::Json(_) | Error::Csv(_) => IncrStatus::Parse,
            _ => IncrStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(IncrStatus::Parse, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure and never unwinds across the boundary.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IncrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IncrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IncrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(IncrStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(IncrStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(IncrStatus::NullPointer, format!("{name} is null")))
}

/// Features with fitted coefficients.
pub struct IncrModel {
    features: FeatureSet,
    coefficients: CoefficientSet,
    beta: Vec<f64>,
}

/// A bid generator over one model snapshot.
pub struct IncrBidder {
    inner: Bidder,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IncrBidDecision {
    pub ghost_bid: f64,
    pub bid: f64,
    pub submitted: bool,
    /// The valuation was negative and was clamped to zero.
    pub negative_value: bool,
    /// Bootstrap draw used, or -1.
    pub draw_index: i64,
}

/// Message of the last failure on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn incr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn incr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from a JSON array of feature keys and a coefficient set
/// as written by `incr fit`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn incr_model_new(
    features_json: *const c_char,
    coefficients_json: *const c_char,
    out: *mut *mut IncrModel,
) -> IncrStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let keys: Vec<FeatureKey> = serde_json::from_str(str_arg(features_json, "features_json")?)?;
        let features = FeatureSet::new(keys)?;
        let coefficients = CoefficientSet::read_json(str_arg(coefficients_json, "coefficients_json")?.as_bytes())?;
        let beta = coefficients.aligned(&features)?;
        *out = Box::into_raw(Box::new(IncrModel { features, coefficients, beta }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`incr_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn incr_model_free(model: *mut IncrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Ex-ante expected incremental conversions of one bid context.
///
/// # Safety
/// `model` must be live; `context_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incr_model_incremental_value(
    model: *const IncrModel,
    context_json: *const c_char,
    out: *mut f64,
) -> IncrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure(IncrStatus::NullPointer, "model is null".into()))?;
        let out = mut_arg(out, "out")?;
        let ctx: BidContext = serde_json::from_str(str_arg(context_json, "context_json")?)?;
        let bid = ctx.as_bid();
        *out = model.features.incremental_value(&bid, &ctx.retargets, &model.beta)?;
        Ok(())
    })
}

/// Attribution report over an NDJSON event log. `slices_json` may be null
/// for the single `all` slice; a NaN `as_of` means the latest window end.
/// The returned JSON string is freed with [`incr_string_free`].
///
/// # Safety
/// `model` must be live; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incr_model_report(
    model: *const IncrModel,
    events_ndjson: *const c_char,
    slices_json: *const c_char,
    as_of: f64,
    out: *mut *mut c_char,
) -> IncrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure(IncrStatus::NullPointer, "model is null".into()))?;
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let timelines = ingest(str_arg(events_ndjson, "events_ndjson")?.as_bytes())?.timelines;
        let slices: Vec<SliceFilter> = if slices_json.is_null() {
            vec![SliceFilter::all()]
        } else {
            serde_json::from_str(str_arg(slices_json, "slices_json")?)?
        };
        let as_of = if as_of.is_nan() { default_as_of(&timelines) } else { as_of };
        let attribution = Attribution::new(&model.features, &model.coefficients)?;
        let rows = attribution.campaign_rollup(&timelines, as_of, &slices)?;
        let text = serde_json::to_string(&rows)?;
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn incr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A bidder over a snapshot of `model` with the policy given as JSON. The
/// bidder does not borrow the model.
///
/// # Safety
/// `model` must be live; `policy_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incr_bidder_new(
    model: *const IncrModel,
    policy_json: *const c_char,
    out: *mut *mut IncrBidder,
) -> IncrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure(IncrStatus::NullPointer, "model is null".into()))?;
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let policy: BidPolicy = serde_json::from_str(str_arg(policy_json, "policy_json")?)?;
        let inner = Bidder::new(&model.features, &model.coefficients, policy)?;
        *out = Box::into_raw(Box::new(IncrBidder { inner }));
        Ok(())
    })
}

/// # Safety
/// `bidder` must come from [`incr_bidder_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn incr_bidder_free(bidder: *mut IncrBidder) {
    if !bidder.is_null() {
        drop(Box::from_raw(bidder));
    }
}

/// Bid for one context. A bidder is not thread-safe; use one per thread.
///
/// # Safety
/// `bidder` must be live; `context_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incr_bidder_compute_bid(
    bidder: *mut IncrBidder,
    context_json: *const c_char,
    out: *mut IncrBidDecision,
) -> IncrStatus {
    guard(|| {
        let bidder = mut_arg(bidder, "bidder")?;
        let out = mut_arg(out, "out")?;
        let ctx: BidContext = serde_json::from_str(str_arg(context_json, "context_json")?)?;
        let d = bidder.inner.compute_bid(&ctx)?;
        *out = IncrBidDecision {
            ghost_bid: d.ghost_bid,
            bid: d.bid,
            submitted: d.submitted,
            negative_value: d.negative_value,
            draw_index: d.draw_index.map_or(-1, |i| i as i64),
        };
        Ok(())
    })
}
