//! C ABI over the `varband` learners and confidence radii.
//!
//! Every fallible call returns a [`VbStatus`]; on failure the message is
//! available from [`vb_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DVector;
use varband::bandit::{Branch, Choice, SaveConfig, SaveLearner};
use varband::confidence::{
    freedman_radius, mdp_radius, save_radius, MdpRadiusInput, SaveRadiusInput,
};
use varband::linalg::PsdAccumulator;
use varband::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParameter = 2,
    DimensionMismatch = 3,
    EmptyDecisionSet = 4,
    Internal = 5,
    /// No pending selection to update from.
    NoPendingChoice = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbBranch {
    Exploit = 0,
    Explore = 1,
    Ucb = 2,
    Oracle = 3,
}

/// Result of one SAVE selection.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VbChoice {
    pub arm: usize,
    pub branch: VbBranch,
    /// 1-based layer at which the selection stopped.
    pub layer: usize,
    /// Insertion weight, or 0 when the round is not explored.
    pub weight: f64,
}

/// Opaque weighted ridge accumulator.
pub struct VbAccumulator(PsdAccumulator);

/// Opaque SAVE learner; remembers its last selection until it is updated.
pub struct VbSave {
    learner: SaveLearner,
    dim: usize,
    pending: Option<Choice>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> VbStatus {
    match err {
        Error::InvalidParameter { .. } | Error::Config { .. } => VbStatus::InvalidParameter,
        Error::DimensionMismatch { .. } => VbStatus::DimensionMismatch,
        Error::EmptyDecisionSet => VbStatus::EmptyDecisionSet,
        _ => VbStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (VbStatus, String)>) -> VbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VbStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside varband".into());
            VbStatus::Panic
        }
    }
}

fn lift<T>(r: varband::Result<T>) -> Result<T, (VbStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (VbStatus, String) {
    (VbStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn slice<'a>(
    p: *const f64,
    len: usize,
    what: &str,
) -> Result<&'a [f64], (VbStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), (VbStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Accumulator
// ---------------------------------------------------------------------------

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn vb_accumulator_new(
    dim: usize,
    reg: f64,
    out: *mut *mut VbAccumulator,
) -> VbStatus {
    guard(|| {
        let acc = lift(PsdAccumulator::new(dim, reg))?;
        write(out, Box::into_raw(Box::new(VbAccumulator(acc))), "out")
    })
}

/// # Safety
/// `acc` must be null or a handle from [`vb_accumulator_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vb_accumulator_free(acc: *mut VbAccumulator) {
    if !acc.is_null() {
        drop(Box::from_raw(acc));
    }
}

/// Adds `w^2 x x^T` to the Gram matrix and `w^2 y x` to the moment vector.
///
/// # Safety
/// `acc` must be a live handle and `x` must point to `dim` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn vb_accumulator_update(
    acc: *mut VbAccumulator,
    w: f64,
    x: *const f64,
    dim: usize,
    y: f64,
) -> VbStatus {
    guard(|| {
        let acc = acc.as_mut().ok_or_else(|| null("acc"))?;
        let x = DVector::from_column_slice(slice(x, dim, "x")?);
        lift(acc.0.rank_one_update(w, &x, y))
    })
}

/// `sqrt(x^T Sigma^{-1} x)`.
///
/// # Safety
/// `acc` must be a live handle, `x` must point to `dim` doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn vb_accumulator_norm(
    acc: *const VbAccumulator,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> VbStatus {
    guard(|| {
        let acc = acc.as_ref().ok_or_else(|| null("acc"))?;
        if dim != acc.0.dim() {
            return lift(Err(Error::DimensionMismatch {
                expected: acc.0.dim(),
                actual: dim,
            }));
        }
        let x = DVector::from_column_slice(slice(x, dim, "x")?);
        write(out, acc.0.elliptical_norm(&x), "out")
    })
}

/// Writes the ridge estimate `Sigma^{-1} b` into `out[0..dim]`.
///
/// # Safety
/// `acc` must be a live handle and `out` must point to `dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vb_accumulator_theta(
    acc: *const VbAccumulator,
    out: *mut f64,
    dim: usize,
) -> VbStatus {
    guard(|| {
        let acc = acc.as_ref().ok_or_else(|| null("acc"))?;
        if dim != acc.0.dim() {
            return lift(Err(Error::DimensionMismatch {
                expected: acc.0.dim(),
                actual: dim,
            }));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let theta = acc.0.solve_theta();
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(theta.as_slice());
        Ok(())
    })
}

/// Number of updates applied so far, or 0 for a null handle.
///
/// # Safety
/// `acc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vb_accumulator_count(acc: *const VbAccumulator) -> u64 {
    acc.as_ref().map_or(0, |a| a.0.count())
}

// ---------------------------------------------------------------------------
// SAVE learner
// ---------------------------------------------------------------------------

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn vb_save_new(
    dim: usize,
    alpha: f64,
    delta: f64,
    big_r: f64,
    out: *mut *mut VbSave,
) -> VbStatus {
    guard(|| {
        let learner = lift(SaveLearner::new(
            dim,
            SaveConfig {
                alpha,
                delta,
                big_r,
            },
        ))?;
        let handle = VbSave {
            learner,
            dim,
            pending: None,
        };
        write(out, Box::into_raw(Box::new(handle)), "out")
    })
}

/// # Safety
/// `save` must be null or a handle from [`vb_save_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vb_save_free(save: *mut VbSave) {
    if !save.is_null() {
        drop(Box::from_raw(save));
    }
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `save` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vb_save_layers(save: *const VbSave) -> usize {
    save.as_ref().map_or(0, |s| s.learner.big_l())
}

/// Picks an arm from `n_arms` row-major arms of length `dim` each. The choice
/// is kept until the matching [`vb_save_update`].
///
/// # Safety
/// `save` must be a live handle, `arms` must point to `n_arms * dim` doubles
/// and `out` to one writable [`VbChoice`].
#[no_mangle]
pub unsafe extern "C" fn vb_save_select(
    save: *mut VbSave,
    arms: *const f64,
    n_arms: usize,
    dim: usize,
    out: *mut VbChoice,
) -> VbStatus {
    guard(|| {
        let save = save.as_mut().ok_or_else(|| null("save"))?;
        if dim != save.dim {
            return lift(Err(Error::DimensionMismatch {
                expected: save.dim,
                actual: dim,
            }));
        }
        let flat = slice(arms, n_arms * dim, "arms")?;
        let set: Vec<DVector<f64>> = flat
            .chunks(dim.max(1))
            .map(DVector::from_column_slice)
            .collect();
        let choice = lift(save.learner.save_select(&set))?;
        let c = VbChoice {
            arm: choice.arm,
            branch: match choice.stop.branch {
                Branch::Exploit => VbBranch::Exploit,
                Branch::Explore => VbBranch::Explore,
                Branch::Ucb => VbBranch::Ucb,
                Branch::Oracle => VbBranch::Oracle,
            },
            layer: choice.stop.layer,
            weight: choice.stop.weight.unwrap_or(0.0),
        };
        write(out, c, "out")?;
        save.pending = Some(choice);
        Ok(())
    })
}

/// Feeds back the reward of the arm returned by the last [`vb_save_select`] at
/// round `k`. `arm` holds that arm's `dim` coordinates.
///
/// # Safety
/// `save` must be a live handle and `arm` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn vb_save_update(
    save: *mut VbSave,
    k: u64,
    arm: *const f64,
    dim: usize,
    reward: f64,
) -> VbStatus {
    guard(|| {
        let save = save.as_mut().ok_or_else(|| null("save"))?;
        if dim != save.dim {
            return lift(Err(Error::DimensionMismatch {
                expected: save.dim,
                actual: dim,
            }));
        }
        let x = DVector::from_column_slice(slice(arm, dim, "arm")?);
        let Some(choice) = save.pending.take() else {
            return Err((
                VbStatus::NoPendingChoice,
                "update without a pending selection".into(),
            ));
        };
        lift(save.learner.save_update(k, &x, reward, &choice.stop))
    })
}

/// Writes per-layer sample counts into `out[0..len]`; `len` must equal the layer count.
///
/// # Safety
/// `save` must be a live handle and `out` must point to `len` writable integers.
#[no_mangle]
pub unsafe extern "C" fn vb_save_counts(
    save: *const VbSave,
    out: *mut u64,
    len: usize,
) -> VbStatus {
    guard(|| {
        let save = save.as_ref().ok_or_else(|| null("save"))?;
        let counts = save.learner.psi_counts();
        if len != counts.len() {
            return lift(Err(Error::DimensionMismatch {
                expected: counts.len(),
                actual: len,
            }));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&counts);
        Ok(())
    })
}

/// Confidence radius of SAVE layer `ell` after round `k`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn vb_save_radius(
    ell: usize,
    k: u64,
    big_l: usize,
    delta: f64,
    big_r: f64,
    varhat: f64,
    psi_count: u64,
    out: *mut f64,
) -> VbStatus {
    guard(|| {
        let r = lift(save_radius(&SaveRadiusInput {
            ell,
            k,
            big_l,
            delta,
            big_r,
            varhat,
            psi_count,
        }))?;
        write(out, r, "out")
    })
}

/// Confidence radius of UCRL-AVE layer `ell` at episode `k`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn vb_mdp_radius(
    ell: usize,
    k: u64,
    big_l: usize,
    delta: f64,
    big_h: usize,
    lambda: f64,
    big_b: f64,
    varhat: f64,
    psi_count: u64,
    out: *mut f64,
) -> VbStatus {
    guard(|| {
        let r = lift(mdp_radius(&MdpRadiusInput {
            ell,
            k,
            big_l,
            delta,
            big_h,
            lambda,
            big_b,
            varhat,
            psi_count,
        }))?;
        write(out, r, "out")
    })
}

/// Freedman-style deviation bound for variance proxy `v` and increment bound `m`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn vb_freedman_radius(v: f64, m: f64, delta: f64, out: *mut f64) -> VbStatus {
    guard(|| write(out, lift(freedman_radius(v, m, delta))?, "out"))
}
