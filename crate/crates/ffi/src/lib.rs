//! C ABI over the `hpsem` solver.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns an
//! [`HpsemStatus`] and leaves a message for [`hpsem_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use hpsem::harness::{
    broken_error, builtin_case, case_for_spec, consistency_check, error_order, rng, solve, HarnessError,
    ManufacturedCase, ProblemSpec, SolveOptions, SolveOutcome,
};
use hpsem::solver::{evaluate_solution, SolverError};

const SPOT_CHECKS: usize = 16;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpsemStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed or inconsistent problem description.
    Spec = 3,
    /// Singular system or another failure of the discrete problem.
    Numerical = 4,
    /// Evaluation point outside the domain.
    Outside = 5,
    /// The requested quantity needs a known exact solution.
    Unavailable = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A problem description, possibly tied to a builtin manufactured case.
pub struct HpsemProblem {
    spec: ProblemSpec,
    case: Option<ManufacturedCase>,
}

pub struct HpsemSolution {
    outcome: SolveOutcome,
    h1_error: Option<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: HpsemStatus, msg: impl Into<String>) -> HpsemStatus {
    set_error(msg);
    status
}

fn harness_status(e: &HarnessError) -> HpsemStatus {
    if e.is_numerical() {
        HpsemStatus::Numerical
    } else if matches!(e, HarnessError::Solver(SolverError::Outside(_))) {
        HpsemStatus::Outside
    } else {
        HpsemStatus::Spec
    }
}

fn guard(f: impl FnOnce() -> Result<(), (HpsemStatus, String)>) -> HpsemStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HpsemStatus::Ok
        }
        Ok(Err((s, msg))) => fail(s, msg),
        Err(_) => fail(HpsemStatus::Panic, "internal panic"),
    }
}

fn harness(e: HarnessError) -> (HpsemStatus, String) {
    (harness_status(&e), e.to_string())
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, (HpsemStatus, String)> {
    if p.is_null() {
        return Err((HpsemStatus::NullPointer, "null string".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (HpsemStatus::InvalidUtf8, e.to_string()))
}

fn null(what: &str) -> (HpsemStatus, String) {
    (HpsemStatus::NullPointer, format!("null {what}"))
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn hpsem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a JSON problem spec.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hpsem_problem_from_json(json: *const c_char, out: *mut *mut HpsemProblem) -> HpsemStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output handle"));
        }
        let spec = ProblemSpec::from_json(read_str(json)?).map_err(harness)?;
        spec.build().map_err(harness)?;
        let case = case_for_spec(&spec).map_err(harness)?;
        *out = Box::into_raw(Box::new(HpsemProblem { spec, case }));
        Ok(())
    })
}

/// Loads one of the builtin manufactured cases by name.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hpsem_problem_from_case(name: *const c_char, out: *mut *mut HpsemProblem) -> HpsemStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output handle"));
        }
        let case = builtin_case(read_str(name)?).map_err(harness)?;
        *out = Box::into_raw(Box::new(HpsemProblem {
            spec: case.spec.clone(),
            case: Some(case),
        }));
        Ok(())
    })
}

/// Sets the layer count `m` and polynomial degree `w`.
///
/// # Safety
/// `problem` must come from `hpsem_problem_from_*` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn hpsem_problem_set_discretization(problem: *mut HpsemProblem, m: usize, w: usize) -> HpsemStatus {
    guard(|| {
        let p = problem.as_mut().ok_or_else(|| null("problem"))?;
        let mut spec = p.spec.clone();
        spec.discretization.m = m;
        spec.discretization.w = w;
        spec.build().map_err(harness)?;
        p.spec = spec;
        if let Some(c) = p.case.as_mut() {
            c.spec = p.spec.clone();
        }
        Ok(())
    })
}

/// # Safety
/// `problem` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hpsem_problem_free(problem: *mut HpsemProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Assembles and solves the least-squares system. For builtin cases the
/// data is spot-checked against the exact solution first and the broken
/// H¹ error is recorded.
///
/// # Safety
/// `problem` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hpsem_solve(problem: *const HpsemProblem, out: *mut *mut HpsemSolution) -> HpsemStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if out.is_null() {
            return Err(null("output handle"));
        }
        let built = p.spec.build().map_err(harness)?;
        if let Some(c) = &p.case {
            consistency_check(&built, &c.exact, SPOT_CHECKS, &mut rng(0)).map_err(harness)?;
        }
        let outcome = solve(&built, SolveOptions::default()).map_err(harness)?;
        let h1_error = match &p.case {
            Some(c) => Some(
                broken_error(&outcome.mesh, &outcome.solution, &c.exact, error_order(built.w))
                    .map_err(harness)?
                    .h1,
            ),
            None => None,
        };
        *out = Box::into_raw(Box::new(HpsemSolution { outcome, h1_error }));
        Ok(())
    })
}

/// Number of unknowns of the solved system, 0 for a null handle.
///
/// # Safety
/// `solution` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hpsem_solution_unknowns(solution: *const HpsemSolution) -> usize {
    solution.as_ref().map_or(0, |s| s.outcome.layout.len())
}

/// Value of the least-squares functional at the solution.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hpsem_solution_functional(solution: *const HpsemSolution, out: *mut f64) -> HpsemStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        *out.as_mut().ok_or_else(|| null("output"))? = s.outcome.breakdown.total;
        Ok(())
    })
}

/// Broken H¹ error against the exact solution; `Unavailable` when the
/// problem did not come from a builtin case.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hpsem_solution_h1_error(solution: *const HpsemSolution, out: *mut f64) -> HpsemStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        let out = out.as_mut().ok_or_else(|| null("output"))?;
        *out = s
            .h1_error
            .ok_or((HpsemStatus::Unavailable, "no exact solution for this problem".into()))?;
        Ok(())
    })
}

/// Value at `(x, y)`. On element boundaries the one-sided values are
/// averaged.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hpsem_solution_eval(solution: *const HpsemSolution, x: f64, y: f64, out: *mut f64) -> HpsemStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        let out = out.as_mut().ok_or_else(|| null("output"))?;
        let pv = evaluate_solution(&s.outcome.mesh, &s.outcome.solution, &[[x, y]])
            .map_err(|e| harness(e.into()))?
            .remove(0);
        *out = pv.values.iter().map(|v| v.1).sum::<f64>() / pv.values.len() as f64;
        Ok(())
    })
}

/// Copies the unknown vector into `buf`. `needed` always receives its
/// length; with a short or null buffer the call returns `BufferTooSmall`.
///
/// # Safety
/// `buf` must hold `len` doubles (or be null), `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hpsem_solution_coefficients(
    solution: *const HpsemSolution,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> HpsemStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        let u = &s.outcome.unknowns;
        *needed.as_mut().ok_or_else(|| null("length output"))? = u.len();
        if buf.is_null() || len < u.len() {
            return Err((HpsemStatus::BufferTooSmall, format!("need {} doubles, got {len}", u.len())));
        }
        std::slice::from_raw_parts_mut(buf, u.len()).copy_from_slice(u);
        Ok(())
    })
}

/// # Safety
/// `solution` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hpsem_solution_free(solution: *mut HpsemSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(harness_status(&HarnessError::Spec("x".into())), HpsemStatus::Spec);
        assert_eq!(
            harness_status(&HarnessError::Solver(SolverError::Outside([2.0, 2.0]))),
            HpsemStatus::Outside
        );
        assert_eq!(harness_status(&HarnessError::Solver(SolverError::InteriorSingular)), HpsemStatus::Numerical);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, HpsemStatus::Panic);
        let msg = unsafe { CStr::from_ptr(hpsem_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
    }
}
