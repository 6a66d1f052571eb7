use std::ffi::{CStr, CString};
use std::ptr;

use hpsem_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hpsem_last_error()) }.to_string_lossy().into_owned()
}

const ONE_ELEMENT: &str = r#"{
  "version": 1,
  "vertices": [[0, 0], [1, 0], [1, 1], [0, 1]],
  "dirichlet": [1, 2, 3, 4],
  "neumann": [],
  "data": {"f": "-4", "g0": {"1": "x^2 + y^2", "2": "x^2 + y^2", "3": "x^2 + y^2", "4": "x^2 + y^2"}},
  "discretization": {"M": 1, "W": 2},
  "mode": "nonconforming"
}"#;

#[test]
fn spec_round_trip_through_handles() {
    let json = CString::new(ONE_ELEMENT).unwrap();
    let mut p = ptr::null_mut();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(hpsem_problem_from_json(json.as_ptr(), &mut p), HpsemStatus::Ok, "{}", last_error());
        assert_eq!(hpsem_solve(p, &mut s), HpsemStatus::Ok, "{}", last_error());
        let mut f = f64::NAN;
        assert_eq!(hpsem_solution_functional(s, &mut f), HpsemStatus::Ok);
        assert!(f < 1e-16, "{f}");
        let mut e = 0.0;
        assert_eq!(hpsem_solution_h1_error(s, &mut e), HpsemStatus::Unavailable);
        let mut v = 0.0;
        assert_eq!(hpsem_solution_eval(s, 0.25, 0.5, &mut v), HpsemStatus::Ok);
        assert!((v - 0.3125).abs() < 1e-10, "{v}");
        assert_eq!(hpsem_solution_eval(s, 2.0, 0.5, &mut v), HpsemStatus::Outside);

        let n = hpsem_solution_unknowns(s);
        assert!(n > 0);
        let mut needed = 0;
        let mut buf = vec![0.0; n];
        assert_eq!(hpsem_solution_coefficients(s, buf.as_mut_ptr(), 1, &mut needed), HpsemStatus::BufferTooSmall);
        assert_eq!(needed, n);
        assert_eq!(hpsem_solution_coefficients(s, buf.as_mut_ptr(), n, &mut needed), HpsemStatus::Ok);
        assert!(buf.iter().all(|x| x.is_finite()));

        hpsem_solution_free(s);
        hpsem_problem_free(p);
    }
}

#[test]
fn builtin_case_reports_error() {
    let name = CString::new("lshape_rz").unwrap();
    let mut p = ptr::null_mut();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(hpsem_problem_from_case(name.as_ptr(), &mut p), HpsemStatus::Ok);
        assert_eq!(hpsem_problem_set_discretization(p, 3, 3), HpsemStatus::Ok);
        assert_eq!(hpsem_solve(p, &mut s), HpsemStatus::Ok, "{}", last_error());
        let mut e = 0.0;
        assert_eq!(hpsem_solution_h1_error(s, &mut e), HpsemStatus::Ok);
        assert!(e > 0.0 && e < 0.2, "{e}");
        assert_eq!(hpsem_problem_set_discretization(p, 3, 0), HpsemStatus::Spec);
        assert!(!last_error().is_empty());
        hpsem_solution_free(s);
        hpsem_problem_free(p);
    }
}

#[test]
fn bad_input_is_reported() {
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(hpsem_problem_from_json(ptr::null(), &mut p), HpsemStatus::NullPointer);
        let bad = CString::new("{\"vertices\": [").unwrap();
        assert_eq!(hpsem_problem_from_json(bad.as_ptr(), &mut p), HpsemStatus::Spec);
        assert!(last_error().contains("line 1"), "{}", last_error());
        let utf = [0xffu8, 0xfe, 0];
        assert_eq!(hpsem_problem_from_json(utf.as_ptr().cast(), &mut p), HpsemStatus::InvalidUtf8);
        assert!(p.is_null());
        assert_eq!(hpsem_solve(ptr::null(), &mut ptr::null_mut()), HpsemStatus::NullPointer);
        assert_eq!(hpsem_solution_unknowns(ptr::null()), 0);
        hpsem_problem_free(ptr::null_mut());
        hpsem_solution_free(ptr::null_mut());
    }
}
