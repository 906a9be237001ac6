use std::ffi::{c_char, CString};
use std::ptr;

use hypokernel_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { hk_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let k = n.min(255);
    buf[..k].iter().map(|&c| c as u8 as char).collect()
}

fn model(name: &str, params: &str) -> *mut HkModel {
    let n = CString::new(name).unwrap();
    let p = CString::new(params).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { hk_model_new(n.as_ptr(), p.as_ptr(), &mut m) }, HkStatus::Ok);
    m
}

#[test]
fn model_lifecycle_and_rank() {
    let m = model("kolmogorov", "mu1=2");
    let mut dim = 0;
    let mut depth = 0;
    unsafe {
        assert_eq!(hk_model_dim(m, &mut dim), HkStatus::Ok);
        assert_eq!(dim, 2);
        assert_eq!(hk_rank_depth(m, [0.3, -0.2].as_ptr(), 2, 3, &mut depth), HkStatus::Ok);
        assert_eq!(depth, 1);
        hk_model_free(m);
    }
}

#[test]
fn trotter_matches_exact_kernel() {
    let m = model("kolmogorov", "");
    let grid = CString::new("-1.5:2.5:161,-4:6:81").unwrap();
    let y = [0.0, 1.0];
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    let (mut tv, mut mass, mut len) = (0.0, 0.0, 0usize);
    unsafe {
        assert_eq!(hk_trotter_density(m, y.as_ptr(), 2, 0.5, 32, grid.as_ptr(), &mut a), HkStatus::Ok);
        assert_eq!(hk_exact_linear_density(m, y.as_ptr(), 2, 0.5, grid.as_ptr(), &mut b), HkStatus::Ok);
        assert_eq!(hk_density_tv(a, b, &mut tv), HkStatus::Ok);
        assert_eq!(hk_density_mass(a, &mut mass), HkStatus::Ok);
        assert_eq!(hk_density_len(a, &mut len), HkStatus::Ok);
        let mut v = vec![0.0; len];
        assert_eq!(hk_density_values(a, v.as_mut_ptr(), len), HkStatus::Ok);
        assert_eq!(hk_density_values(a, v.as_mut_ptr(), len - 1), HkStatus::InvalidArgument);
        assert!(v.iter().all(|x| x.is_finite()));
        hk_density_free(a);
        hk_density_free(b);
        hk_model_free(m);
    }
    assert_eq!(len, 161 * 81);
    assert!(tv < 0.05, "tv {tv}");
    assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
}

#[test]
fn parametrix_density_has_unit_mass() {
    let m = model("sine_1d", "");
    let grid = CString::new("-6:6:121").unwrap();
    let mut d = ptr::null_mut();
    let mut mass = 0.0;
    unsafe {
        assert_eq!(hk_parametrix_density(m, [0.0].as_ptr(), 1, 0.25, 1, grid.as_ptr(), &mut d), HkStatus::Ok);
        assert_eq!(hk_density_mass(d, &mut mass), HkStatus::Ok);
        hk_density_free(d);
        hk_model_free(m);
    }
    assert!((mass - 1.0).abs() < 1e-2);
}

#[test]
fn errors_are_reported() {
    let mut m = ptr::null_mut();
    let bad = CString::new("nosuch").unwrap();
    unsafe {
        assert_eq!(hk_model_new(bad.as_ptr(), ptr::null(), &mut m), HkStatus::InvalidArgument);
        assert!(last_error().contains("nosuch"));
        assert_eq!(hk_model_new(ptr::null(), ptr::null(), &mut m), HkStatus::NullPointer);
        assert!(last_error().contains("name"));
        let p = CString::new("mu1").unwrap();
        let k = CString::new("kolmogorov").unwrap();
        assert_eq!(hk_model_new(k.as_ptr(), p.as_ptr(), &mut m), HkStatus::InvalidArgument);
    }
    let m = model("kolmogorov", "");
    let mut d = ptr::null_mut();
    let grid = CString::new("-1:1:11,-1:1:11").unwrap();
    let mut depth = 0;
    unsafe {
        // dimension mismatch
        assert_eq!(hk_rank_depth(m, [0.0].as_ptr(), 1, 3, &mut depth), HkStatus::InvalidArgument);
        // witness failure at y = 0 is a runtime error
        assert_eq!(hk_trotter_density(m, [0.0, 0.0].as_ptr(), 2, 0.5, 8, grid.as_ptr(), &mut d), HkStatus::Runtime);
        assert!(d.is_null());
        let g = CString::new("garbage").unwrap();
        assert_eq!(hk_exact_linear_density(m, [0.0, 1.0].as_ptr(), 2, 0.5, g.as_ptr(), &mut d), HkStatus::InvalidArgument);
        assert_eq!(hk_density_mass(ptr::null(), ptr::null_mut()), HkStatus::NullPointer);
        hk_model_free(m);
        hk_model_free(ptr::null_mut());
    }
}

#[test]
fn error_buffer_truncates() {
    let bad = CString::new("nosuch-model-with-a-long-name").unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        hk_model_new(bad.as_ptr(), ptr::null(), &mut m);
        let mut buf = [0 as c_char; 8];
        let n = hk_last_error_message(buf.as_mut_ptr(), buf.len());
        assert!(n > 8);
        assert_eq!(buf[7], 0);
        assert_eq!(hk_last_error_message(ptr::null_mut(), 0), n);
    }
}

#[test]
fn header_is_valid_c() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = format!("{dir}/include/hypokernel.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["hk_model_new", "hk_trotter_density", "hk_density_tv", "hk_last_error_message", "HK_STATUS_PANIC"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    // syntax check when a C compiler is around
    if let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", &header]).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
