//! C ABI over the statistics, budget, theory and monitoring calculators.
//!
//! Every function returns a [`B3itStatus`] and writes results through out
//! pointers. On failure a message is stored per thread and can be read with
//! [`b3it_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use b3it_core::{budget, engine, stats, theory};
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum B3itStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    BufferTooSmall = 4,
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

struct Failure(B3itStatus, String);

impl Failure {
    fn invalid(e: impl std::fmt::Display) -> Self {
        Failure(B3itStatus::InvalidArgument, e.to_string())
    }
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> B3itStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            B3itStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            B3itStatus::Panic
        }
    }
}

fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: caller guarantees a valid, writable pointer when non-null.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(B3itStatus::NullPointer, format!("{name} is null")))
}

fn in_slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(B3itStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Copies the calling thread's last error message (UTF-8, NUL-terminated)
/// into `buf`. Returns the message length without the terminator; if that is
/// `>= len` the message was truncated.
#[no_mangle]
pub extern "C" fn b3it_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            // SAFETY: caller guarantees `len` writable bytes at `buf`.
            unsafe {
                std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        e.len()
    })
}

/// Token-count table built incrementally from C.
pub struct B3itDistribution {
    counts: BTreeMap<String, u64>,
}

impl B3itDistribution {
    fn to_core(&self) -> Result<stats::EmpiricalDistribution, Failure> {
        stats::EmpiricalDistribution::from_counts(self.counts.iter().map(|(k, v)| (k.clone(), *v))).map_err(Failure::invalid)
    }
}

fn dist_ref<'a>(p: *const B3itDistribution, name: &str) -> Result<&'a B3itDistribution, Failure> {
    // SAFETY: non-null handles come from `b3it_distribution_new`.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(B3itStatus::NullPointer, format!("{name} is null")))
}

/// Creates an empty distribution. Free with [`b3it_distribution_free`].
#[no_mangle]
pub extern "C" fn b3it_distribution_new() -> *mut B3itDistribution {
    Box::into_raw(Box::new(B3itDistribution { counts: BTreeMap::new() }))
}

/// Frees a distribution; null is ignored.
///
/// # Safety
/// `dist` must come from [`b3it_distribution_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn b3it_distribution_free(dist: *mut B3itDistribution) {
    if !dist.is_null() {
        drop(unsafe { Box::from_raw(dist) });
    }
}

/// Adds `count` observations of the NUL-terminated UTF-8 `token`.
#[no_mangle]
pub extern "C" fn b3it_distribution_add(dist: *mut B3itDistribution, token: *const c_char, count: u64) -> B3itStatus {
    run(|| {
        let d = out_ref(dist, "dist")?;
        if token.is_null() {
            return Err(Failure(B3itStatus::NullPointer, "token is null".into()));
        }
        // SAFETY: caller guarantees a NUL-terminated string.
        let t = unsafe { CStr::from_ptr(token) }
            .to_str()
            .map_err(|e| Failure(B3itStatus::InvalidUtf8, e.to_string()))?;
        if count > 0 {
            *d.counts.entry(t.to_owned()).or_insert(0) += count;
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_distribution_total(dist: *const B3itDistribution, out: *mut u64) -> B3itStatus {
    run(|| {
        *out_ref(out, "out")? = dist_ref(dist, "dist")?.counts.values().sum();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_distribution_support_size(dist: *const B3itDistribution, out: *mut usize) -> B3itStatus {
    run(|| {
        *out_ref(out, "out")? = dist_ref(dist, "dist")?.counts.len();
        Ok(())
    })
}

/// Total variation distance between two nonempty distributions.
#[no_mangle]
pub extern "C" fn b3it_tv_distance(p: *const B3itDistribution, q: *const B3itDistribution, out: *mut f64) -> B3itStatus {
    run(|| {
        let (p, q) = (dist_ref(p, "p")?.to_core()?, dist_ref(q, "q")?.to_core()?);
        *out_ref(out, "out")? = stats::tv_distance(&p, &q);
        Ok(())
    })
}

/// Whether the supports differ.
#[no_mangle]
pub extern "C" fn b3it_support_mismatch(
    reference: *const B3itDistribution,
    detection: *const B3itDistribution,
    out: *mut bool,
) -> B3itStatus {
    run(|| {
        let r = dist_ref(reference, "reference")?.to_core()?;
        let d = dist_ref(detection, "detection")?.to_core()?;
        *out_ref(out, "out")? = stats::support_mismatch(&r, &d);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_aggregate_statistic(values: *const f64, len: usize, out: *mut f64) -> B3itStatus {
    run(|| {
        let v = in_slice(values, len, "values")?;
        *out_ref(out, "out")? = stats::aggregate_statistic(v).map_err(Failure::invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_type1_bound(k: u64, n1: u64, n2: u64, out: *mut f64) -> B3itStatus {
    run(|| {
        *out_ref(out, "out")? = stats::type1_bound(k, n1, n2).map_err(Failure::invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_type2_bound(k1: u64, k2: u64, intersection: u64, n1: u64, n2: u64, out: *mut f64) -> B3itStatus {
    run(|| {
        let inputs = stats::ErrorBoundInputs::new(k1, k2, intersection, n1, n2).map_err(Failure::invalid)?;
        *out_ref(out, "out")? = stats::type2_bound(&inputs);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_risk_lower_bound(n: u64, out: *mut f64) -> B3itStatus {
    run(|| {
        *out_ref(out, "out")? = stats::risk_lower_bound(n).map_err(Failure::invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_roc_auc(
    positive: *const f64,
    positive_len: usize,
    negative: *const f64,
    negative_len: usize,
    out: *mut f64,
) -> B3itStatus {
    run(|| {
        let pos = in_slice(positive, positive_len, "positive")?;
        let neg = in_slice(negative, negative_len, "negative")?;
        *out_ref(out, "out")? = stats::roc_auc(pos, neg).map_err(Failure::invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_cost_per_bi(m: u32, f_b: f64, out: *mut f64) -> B3itStatus {
    run(|| {
        *out_ref(out, "out")? = budget::cost_per_bi(m, f_b).map_err(Failure::invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_optimal_m(f_b: f64, m_max: u32, out: *mut u32) -> B3itStatus {
    run(|| {
        *out_ref(out, "out")? = budget::optimal_m(f_b, m_max).map_err(Failure::invalid)?;
        Ok(())
    })
}

/// SNR^2 of a softmax head with `d` logits, a row-major `d x q` logit
/// Jacobian and a unit direction of length `q`.
#[no_mangle]
pub extern "C" fn b3it_snr_squared(
    logits: *const f64,
    d: usize,
    temperature: f64,
    jacobian_row_major: *const f64,
    q: usize,
    direction: *const f64,
    out: *mut f64,
) -> B3itStatus {
    run(|| {
        let z = in_slice(logits, d, "logits")?;
        let j = in_slice(jacobian_row_major, d * q, "jacobian")?;
        let h = in_slice(direction, q, "direction")?;
        let head = theory::SoftmaxHead::new(DVector::from_column_slice(z), temperature)
            .and_then(|hd| hd.with_jacobian(DMatrix::from_row_slice(d, q, j)))
            .map_err(Failure::invalid)?;
        let dir = theory::Direction::new(DVector::from_column_slice(h)).map_err(Failure::invalid)?;
        *out_ref(out, "out")? = theory::snr_squared(&head, &dir).map_err(Failure::invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn b3it_asymptotic_type2(alpha: f64, s: f64, snr_squared: f64, out: *mut f64) -> B3itStatus {
    run(|| {
        *out_ref(out, "out")? = theory::asymptotic_type2(alpha, s, snr_squared).map_err(Failure::invalid)?;
        Ok(())
    })
}

/// Writes the onset indices of change events into `indices` (capacity
/// `capacity`) and their number into `count`. Returns
/// `BufferTooSmall` with `count` set when the capacity is insufficient.
#[no_mangle]
pub extern "C" fn b3it_change_event_scan(
    series: *const f64,
    len: usize,
    threshold: f64,
    window: usize,
    indices: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> B3itStatus {
    run(|| {
        let s = in_slice(series, len, "series")?;
        let events = engine::change_event_scan(s, threshold, window);
        *out_ref(count, "count")? = events.len();
        if events.len() > capacity {
            return Err(Failure(
                B3itStatus::BufferTooSmall,
                format!("{} events, capacity {capacity}", events.len()),
            ));
        }
        if !events.is_empty() {
            if indices.is_null() {
                return Err(Failure(B3itStatus::NullPointer, "indices is null".into()));
            }
            for (i, e) in events.iter().enumerate() {
                // SAFETY: capacity checked above; caller guarantees the buffer.
                unsafe { *indices.add(i) = e.index };
            }
        }
        Ok(())
    })
}

/// Yearly monitoring cost in USD for one endpoint, assuming one output token
/// per request. Prices are per million tokens.
#[no_mangle]
pub extern "C" fn b3it_yearly_cost(
    prompt_count: u64,
    n2: u64,
    rounds_per_day: f64,
    input_tokens_per_request: f64,
    price_in: f64,
    price_out: f64,
    out: *mut f64,
) -> B3itStatus {
    run(|| {
        if price_in < 0.0 || price_out < 0.0 {
            return Err(Failure::invalid("prices must be nonnegative"));
        }
        let config = b3it_core::client::EndpointConfig {
            price_in,
            price_out,
            ..b3it_core::client::EndpointConfig::new("", "")
        };
        let protocol = engine::MonitoringProtocol {
            prompt_count,
            n2,
            rounds_per_day,
        };
        *out_ref(out, "out")? = engine::estimate_yearly_cost(&config, &protocol, input_tokens_per_request).cost;
        Ok(())
    })
}
