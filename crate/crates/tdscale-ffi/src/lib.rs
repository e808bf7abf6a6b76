//! C ABI over the statistics and scaling core: opaque handles, integer
//! status codes, out-parameters for every fallible query. The generated
//! header lands in `include/tdscale.h` at build time.
//!
//! Ownership rules: every `*_new` hands the caller an owned handle that
//! must be released with the matching `*_free`; `*_free(NULL)` is a
//! no-op. All other functions borrow. Passing a handle to a mismatched
//! function family is undefined behaviour, as usual for C.

use std::slice;

use tdscale::error::TdScaleError;
use tdscale::scaling::{
    clip_reward, popart_observe, popart_preserve, signed_hyperbolic, signed_hyperbolic_inv,
    PopArtState,
};
use tdscale::stats::{
    brownian_var_g, var_gamma_closed_form, EpisodeTrace, ReturnStats, RunningMoments,
};

/// Status code returned by every fallible function.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdscaleStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = -1,
    /// An input or internal value was NaN or infinite.
    NonFinite = -2,
    /// Not enough observations to answer the query.
    InsufficientSamples = -3,
    /// A parameter was out of its documented range.
    InvalidParam = -4,
    /// Two array arguments had different lengths.
    LengthMismatch = -5,
    /// Any other error.
    Internal = -99,
}

fn status_of(e: &TdScaleError) -> TdscaleStatus {
    match e {
        TdScaleError::NonFinite(_) => TdscaleStatus::NonFinite,
        TdScaleError::InsufficientSamples { .. } => TdscaleStatus::InsufficientSamples,
        TdScaleError::InvalidParam(_) => TdscaleStatus::InvalidParam,
        TdScaleError::ShapeMismatch { .. } => TdscaleStatus::LengthMismatch,
        _ => TdscaleStatus::Internal,
    }
}

macro_rules! nonnull {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(r) => r,
            None => return TdscaleStatus::NullPointer,
        }
    };
}

macro_rules! nonnull_mut {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(r) => r,
            None => return TdscaleStatus::NullPointer,
        }
    };
}

// ---------------------------------------------------------------------
// Running moments

/// Opaque streaming mean/variance accumulator.
pub struct TdscaleMoments(RunningMoments);

/// Create an empty moments accumulator. Never fails.
#[no_mangle]
pub extern "C" fn tdscale_moments_new() -> *mut TdscaleMoments {
    Box::into_raw(Box::new(TdscaleMoments(RunningMoments::new())))
}

/// Release an accumulator. NULL is a no-op.
#[no_mangle]
pub extern "C" fn tdscale_moments_free(m: *mut TdscaleMoments) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Fold one observation into the accumulator.
#[no_mangle]
pub extern "C" fn tdscale_moments_update(m: *mut TdscaleMoments, x: f64) -> TdscaleStatus {
    let m = nonnull_mut!(m);
    match m.0.update(x) {
        Ok(()) => TdscaleStatus::Ok,
        Err(e) => status_of(&e),
    }
}

/// Merge `other` into `m` (parallel-reduction step); `other` is unchanged.
#[no_mangle]
pub extern "C" fn tdscale_moments_merge(
    m: *mut TdscaleMoments,
    other: *const TdscaleMoments,
) -> TdscaleStatus {
    let other = nonnull!(other);
    let m = nonnull_mut!(m);
    m.0 = m.0.merge(&other.0);
    TdscaleStatus::Ok
}

/// Number of observations folded in so far.
#[no_mangle]
pub extern "C" fn tdscale_moments_count(m: *const TdscaleMoments, out: *mut u64) -> TdscaleStatus {
    let m = nonnull!(m);
    let out = nonnull_mut!(out);
    *out = m.0.count;
    TdscaleStatus::Ok
}

/// Mean of the observations; needs at least one sample.
#[no_mangle]
pub extern "C" fn tdscale_moments_mean(m: *const TdscaleMoments, out: *mut f64) -> TdscaleStatus {
    let m = nonnull!(m);
    let out = nonnull_mut!(out);
    if m.0.count == 0 {
        return TdscaleStatus::InsufficientSamples;
    }
    *out = m.0.mean;
    TdscaleStatus::Ok
}

/// Population variance; needs at least one sample.
#[no_mangle]
pub extern "C" fn tdscale_moments_variance(
    m: *const TdscaleMoments,
    out: *mut f64,
) -> TdscaleStatus {
    let m = nonnull!(m);
    let out = nonnull_mut!(out);
    match m.0.variance() {
        Ok(v) => {
            *out = v;
            TdscaleStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

// ---------------------------------------------------------------------
// Return statistics

/// Opaque accumulator of reward/discount/return moments over episodes.
pub struct TdscaleReturnStats(ReturnStats);

/// Create an empty return-statistics accumulator. Never fails.
#[no_mangle]
pub extern "C" fn tdscale_return_stats_new() -> *mut TdscaleReturnStats {
    Box::into_raw(Box::new(TdscaleReturnStats(ReturnStats::new())))
}

/// Release the accumulator. NULL is a no-op.
#[no_mangle]
pub extern "C" fn tdscale_return_stats_free(s: *mut TdscaleReturnStats) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Fold one complete episode into the statistics. `rewards` and
/// `discounts` are arrays of length `len`; `truncated` nonzero marks an
/// episode cut off by a time-out rather than termination (its returns
/// are excluded from the G moments).
#[no_mangle]
pub extern "C" fn tdscale_return_stats_accumulate(
    s: *mut TdscaleReturnStats,
    rewards: *const f64,
    discounts: *const f64,
    len: usize,
    truncated: i32,
) -> TdscaleStatus {
    let s = nonnull_mut!(s);
    if rewards.is_null() || discounts.is_null() {
        return TdscaleStatus::NullPointer;
    }
    let rewards = unsafe { slice::from_raw_parts(rewards, len) }.to_vec();
    let discounts = unsafe { slice::from_raw_parts(discounts, len) }.to_vec();
    let trace = match EpisodeTrace::new(rewards, discounts, truncated != 0) {
        Ok(t) => t,
        Err(e) => return status_of(&e),
    };
    match s.0.accumulate_episode(&trace) {
        Ok(()) => TdscaleStatus::Ok,
        Err(e) => status_of(&e),
    }
}

/// Merge `other` into `s`; `other` is unchanged.
#[no_mangle]
pub extern "C" fn tdscale_return_stats_merge(
    s: *mut TdscaleReturnStats,
    other: *const TdscaleReturnStats,
) -> TdscaleStatus {
    let other = nonnull!(other);
    let s = nonnull_mut!(s);
    s.0 = s.0.merge(&other.0);
    TdscaleStatus::Ok
}

/// The scale estimate sigma^2 = V[R] + V[gamma]·E[G^2] and its parts.
/// Any out pointer may be NULL to skip that component.
#[no_mangle]
pub extern "C" fn tdscale_return_stats_sigma(
    s: *const TdscaleReturnStats,
    out_sigma: *mut f64,
    out_var_r: *mut f64,
    out_var_gamma: *mut f64,
    out_e_g2: *mut f64,
) -> TdscaleStatus {
    let s = nonnull!(s);
    let est = match s.0.sigma_squared() {
        Ok(e) => e,
        Err(e) => return status_of(&e),
    };
    unsafe {
        if let Some(o) = out_sigma.as_mut() {
            *o = est.sigma;
        }
        if let Some(o) = out_var_r.as_mut() {
            *o = est.var_r;
        }
        if let Some(o) = out_var_gamma.as_mut() {
            *o = est.var_gamma;
        }
        if let Some(o) = out_e_g2.as_mut() {
            *o = est.e_g2;
        }
    }
    TdscaleStatus::Ok
}

/// The effective scale max(sigma, sigma_v, sigma_batch) used as the
/// TD-error divisor.
#[no_mangle]
pub extern "C" fn tdscale_return_stats_sigma_effective(
    s: *const TdscaleReturnStats,
    sigma_v: f64,
    sigma_batch: f64,
    out: *mut f64,
) -> TdscaleStatus {
    let s = nonnull!(s);
    let out = nonnull_mut!(out);
    match s.0.sigma_squared() {
        Ok(est) => {
            *out = est.effective(sigma_v, sigma_batch);
            TdscaleStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

// ---------------------------------------------------------------------
// Pop-Art

/// Opaque Pop-Art target-normalization state.
pub struct TdscalePopart(PopArtState);

/// Create a Pop-Art state; `step_size` in (0,1], `0 < lower <= upper`.
/// Returns NULL on invalid parameters.
#[no_mangle]
pub extern "C" fn tdscale_popart_new(
    step_size: f64,
    lower: f64,
    upper: f64,
) -> *mut TdscalePopart {
    match PopArtState::new(step_size, lower, upper) {
        Ok(st) => Box::into_raw(Box::new(TdscalePopart(st))),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Create a Pop-Art state with the customary parameters
/// (step size 1e-3, bounds [1e-3, 1e3]). Never fails.
#[no_mangle]
pub extern "C" fn tdscale_popart_new_default() -> *mut TdscalePopart {
    Box::into_raw(Box::new(TdscalePopart(PopArtState::with_defaults())))
}

/// Release the state. NULL is a no-op.
#[no_mangle]
pub extern "C" fn tdscale_popart_free(p: *mut TdscalePopart) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Observe one unnormalized target, update (mu, nu, sigma), and rescale
/// the `len` last-layer weights `w` and bias `*b` in place so that
/// unnormalized outputs are preserved. `w`/`b` may be NULL when there
/// are no parameters to correct.
#[no_mangle]
pub extern "C" fn tdscale_popart_observe_preserve(
    p: *mut TdscalePopart,
    target: f64,
    w: *mut f64,
    len: usize,
    b: *mut f64,
) -> TdscaleStatus {
    let p = nonnull_mut!(p);
    let corr = match popart_observe(&mut p.0, target) {
        Ok(c) => c,
        Err(e) => return status_of(&e),
    };
    if !w.is_null() || !b.is_null() {
        let w_slice: &mut [f64] =
            if w.is_null() { &mut [] } else { unsafe { slice::from_raw_parts_mut(w, len) } };
        let b_val = if b.is_null() { 0.0 } else { unsafe { *b } };
        let (w2, b2) = popart_preserve(&corr, w_slice, b_val);
        w_slice.copy_from_slice(&w2);
        if let Some(b) = unsafe { b.as_mut() } {
            *b = b2;
        }
    }
    TdscaleStatus::Ok
}

/// Current normalization statistics. Out pointers may be NULL.
#[no_mangle]
pub extern "C" fn tdscale_popart_stats(
    p: *const TdscalePopart,
    out_mu: *mut f64,
    out_sigma: *mut f64,
) -> TdscaleStatus {
    let p = nonnull!(p);
    unsafe {
        if let Some(o) = out_mu.as_mut() {
            *o = p.0.mu;
        }
        if let Some(o) = out_sigma.as_mut() {
            *o = p.0.sigma;
        }
    }
    TdscaleStatus::Ok
}

// ---------------------------------------------------------------------
// Pure helpers

/// Clamp a reward to [-1, 1].
#[no_mangle]
pub extern "C" fn tdscale_clip_reward(r: f64) -> f64 {
    clip_reward(r)
}

/// Signed hyperbolic squashing sign(x)(sqrt(|x|+1)-1).
#[no_mangle]
pub extern "C" fn tdscale_signed_hyperbolic(x: f64) -> f64 {
    signed_hyperbolic(x)
}

/// Inverse of the signed hyperbolic squashing.
#[no_mangle]
pub extern "C" fn tdscale_signed_hyperbolic_inv(y: f64) -> f64 {
    signed_hyperbolic_inv(y)
}

/// Closed-form V[gamma] for complete episodes of `episode_len` steps
/// with constant in-episode discount `gamma` and a terminal zero.
#[no_mangle]
pub extern "C" fn tdscale_var_gamma_closed_form(
    gamma: f64,
    episode_len: u64,
    out: *mut f64,
) -> TdscaleStatus {
    let out = nonnull_mut!(out);
    match var_gamma_closed_form(gamma, episode_len) {
        Ok(v) => {
            *out = v;
            TdscaleStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Brownian-motion return-variance approximation V[G] = V[R]/(1-gamma_bar).
#[no_mangle]
pub extern "C" fn tdscale_brownian_var_g(
    var_r: f64,
    gamma_bar: f64,
    out: *mut f64,
) -> TdscaleStatus {
    let out = nonnull_mut!(out);
    match brownian_var_g(var_r, gamma_bar) {
        Ok(v) => {
            *out = v;
            TdscaleStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_round_trip_through_c_abi() {
        let m = tdscale_moments_new();
        for x in [1.0, 2.0, 3.0, 4.0] {
            assert_eq!(tdscale_moments_update(m, x), TdscaleStatus::Ok);
        }
        let mut mean = 0.0;
        let mut var = 0.0;
        let mut count = 0u64;
        assert_eq!(tdscale_moments_mean(m, &mut mean), TdscaleStatus::Ok);
        assert_eq!(tdscale_moments_variance(m, &mut var), TdscaleStatus::Ok);
        assert_eq!(tdscale_moments_count(m, &mut count), TdscaleStatus::Ok);
        assert_eq!(mean, 2.5);
        assert_eq!(var, 1.25);
        assert_eq!(count, 4);
        tdscale_moments_free(m);
    }

    #[test]
    fn null_and_error_codes() {
        let mut out = 0.0;
        assert_eq!(
            tdscale_moments_mean(std::ptr::null(), &mut out),
            TdscaleStatus::NullPointer
        );
        let m = tdscale_moments_new();
        assert_eq!(tdscale_moments_update(m, f64::NAN), TdscaleStatus::NonFinite);
        assert_eq!(tdscale_moments_mean(m, &mut out), TdscaleStatus::InsufficientSamples);
        tdscale_moments_free(m);
        tdscale_moments_free(std::ptr::null_mut());
        assert_eq!(
            tdscale_var_gamma_closed_form(0.9, 0, &mut out),
            TdscaleStatus::InvalidParam
        );
        assert_eq!(tdscale_brownian_var_g(1.0, 1.0, &mut out), TdscaleStatus::InvalidParam);
    }

    #[test]
    fn merge_matches_single_stream() {
        let a = tdscale_moments_new();
        let b = tdscale_moments_new();
        let whole = tdscale_moments_new();
        for i in 0..100 {
            let x = (i as f64).sin() * 10.0;
            let part = if i < 37 { a } else { b };
            assert_eq!(tdscale_moments_update(part, x), TdscaleStatus::Ok);
            assert_eq!(tdscale_moments_update(whole, x), TdscaleStatus::Ok);
        }
        assert_eq!(tdscale_moments_merge(a, b), TdscaleStatus::Ok);
        let (mut va, mut vw) = (0.0, 0.0);
        assert_eq!(tdscale_moments_variance(a, &mut va), TdscaleStatus::Ok);
        assert_eq!(tdscale_moments_variance(whole, &mut vw), TdscaleStatus::Ok);
        assert!((va - vw).abs() <= 1e-12 * vw.abs());
        tdscale_moments_free(a);
        tdscale_moments_free(b);
        tdscale_moments_free(whole);
    }

    #[test]
    fn return_stats_sigma_through_c_abi() {
        let s = tdscale_return_stats_new();
        // two-step episodes, constant reward 2, gamma 0.5, terminal zero
        let rewards = [2.0, 2.0];
        let discounts = [0.5, 0.0];
        for _ in 0..4 {
            assert_eq!(
                tdscale_return_stats_accumulate(s, rewards.as_ptr(), discounts.as_ptr(), 2, 0),
                TdscaleStatus::Ok
            );
        }
        let mut sigma = 0.0;
        let mut var_r = -1.0;
        assert_eq!(
            tdscale_return_stats_sigma(s, &mut sigma, &mut var_r, std::ptr::null_mut(), std::ptr::null_mut()),
            TdscaleStatus::Ok
        );
        // V[R]=0; gammas {0.5,0}: V=1/16; returns {3,2}: E[G^2]=6.5
        assert_eq!(var_r, 0.0);
        assert!((sigma - (6.5f64 / 16.0).sqrt()).abs() < 1e-12);
        let mut eff = 0.0;
        assert_eq!(tdscale_return_stats_sigma_effective(s, 10.0, 0.0, &mut eff), TdscaleStatus::Ok);
        assert_eq!(eff, 10.0);
        tdscale_return_stats_free(s);
    }

    #[test]
    fn popart_observe_preserves_outputs() {
        let p = tdscale_popart_new(1e-3, 1e-3, 1e3);
        assert!(!p.is_null());
        let mut w = [0.3, -0.7, 1.1];
        let mut b = 0.25;
        let (mut mu0, mut s0) = (0.0, 0.0);
        tdscale_popart_stats(p, &mut mu0, &mut s0);
        let feats = [1.0, 2.0, -1.0];
        let q0: f64 = w.iter().zip(&feats).map(|(w, f)| w * f).sum::<f64>() + b;
        let unnorm0 = s0 * q0 + mu0;
        assert_eq!(
            tdscale_popart_observe_preserve(p, 42.0, w.as_mut_ptr(), 3, &mut b),
            TdscaleStatus::Ok
        );
        let (mut mu1, mut s1) = (0.0, 0.0);
        tdscale_popart_stats(p, &mut mu1, &mut s1);
        let q1: f64 = w.iter().zip(&feats).map(|(w, f)| w * f).sum::<f64>() + b;
        let unnorm1 = s1 * q1 + mu1;
        assert!((unnorm0 - unnorm1).abs() < 1e-10 * unnorm0.abs().max(1.0));
        tdscale_popart_free(p);
        assert!(tdscale_popart_new(0.0, 1.0, 0.5).is_null());
    }

    #[test]
    fn pure_helpers_match_core() {
        assert_eq!(tdscale_clip_reward(7.0), 1.0);
        assert_eq!(tdscale_clip_reward(-3.0), -1.0);
        let x = 8.0;
        let y = tdscale_signed_hyperbolic(x);
        assert!((tdscale_signed_hyperbolic_inv(y) - x).abs() < 1e-12);
    }

    #[test]
    fn generated_header_covers_every_export() {
        let header = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/include/tdscale.h"
        ))
        .expect("header generated at build time");
        for name in [
            "tdscale_moments_new",
            "tdscale_moments_free",
            "tdscale_moments_update",
            "tdscale_moments_merge",
            "tdscale_moments_count",
            "tdscale_moments_mean",
            "tdscale_moments_variance",
            "tdscale_return_stats_new",
            "tdscale_return_stats_free",
            "tdscale_return_stats_accumulate",
            "tdscale_return_stats_merge",
            "tdscale_return_stats_sigma",
            "tdscale_return_stats_sigma_effective",
            "tdscale_popart_new",
            "tdscale_popart_new_default",
            "tdscale_popart_free",
            "tdscale_popart_observe_preserve",
            "tdscale_popart_stats",
            "tdscale_clip_reward",
            "tdscale_signed_hyperbolic",
            "tdscale_signed_hyperbolic_inv",
            "tdscale_var_gamma_closed_form",
            "tdscale_brownian_var_g",
        ] {
            assert!(header.contains(name), "header is missing {name}");
        }
    }
}
