use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use nalgebra::DMatrix;
use osse_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { osse_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn null_pointers_are_reported() {
    let st = unsafe { osse_case_build_default(ptr::null_mut()) };
    assert_eq!(st, OsseStatus::NullPointer);
    assert!(last_error().contains("null"));
    let mut out = 0.0;
    let st = unsafe { osse_rmse(ptr::null(), ptr::null(), 3, ptr::null(), ptr::null(), 0, &mut out) };
    assert_eq!(st, OsseStatus::NullPointer);
}

#[test]
fn last_error_truncates() {
    unsafe { osse_case_build_default(ptr::null_mut()) };
    let mut buf = [1 as c_char; 4];
    let n = unsafe { osse_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn case_handle_roundtrip() {
    let mut case = ptr::null_mut();
    assert_eq!(unsafe { osse_case_build_default(&mut case) }, OsseStatus::Ok);
    let (mut nx, mut ny, mut z, mut s) = (0, 0, 0, 0);
    assert_eq!(unsafe { osse_case_dims(case, &mut nx, &mut ny, &mut z, &mut s) }, OsseStatus::Ok);
    assert_eq!((nx, ny, z, s), (240, 48, 3, 4));
    let dir = tempfile::tempdir().unwrap();
    let p = cstr(dir.path());
    assert_eq!(unsafe { osse_case_write(case, p.as_ptr()) }, OsseStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { osse_case_read(p.as_ptr(), &mut back) }, OsseStatus::Ok);
    let mut nx2 = 0;
    unsafe { osse_case_dims(back, &mut nx2, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(nx2, 240);
    unsafe {
        osse_case_free(case);
        osse_case_free(back);
        osse_case_free(ptr::null_mut());
    }
    let missing = cstr(&dir.path().join("nope"));
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { osse_case_read(missing.as_ptr(), &mut h) }, OsseStatus::Io);
}

#[test]
fn gain_matches_explicit_inverse() {
    let (n, d, m) = (5usize, 2usize, 2usize);
    let x = [1.0, 0.5, 2.0, -0.3, 0.4, 1.1, -1.0, 0.2, 0.7, 0.9];
    let y = [0.9, 0.1, 2.2, 0.4, 0.3, -0.5, -1.1, 0.8, 0.5, 0.2];
    let r = [0.3, 0.7];
    let mut k = [0.0; 4];
    let st = unsafe { osse_enkf_gain(n, d, m, x.as_ptr(), y.as_ptr(), r.as_ptr(), k.as_mut_ptr()) };
    assert_eq!(st, OsseStatus::Ok);
    let xm = DMatrix::from_row_slice(n, d, &x);
    let ym = DMatrix::from_row_slice(n, m, &y);
    let center = |a: &DMatrix<f64>| {
        let mean = a.row_mean();
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - mean[j])
    };
    let (xa, ya) = (center(&xm), center(&ym));
    let cyy = ya.transpose() * &ya / 4.0 + DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&r));
    let kb = xa.transpose() * &ya / 4.0 * cyy.try_inverse().unwrap();
    for i in 0..d {
        for j in 0..m {
            assert!((k[i * m + j] - kb[(i, j)]).abs() < 1e-12);
        }
    }
}

#[test]
fn analysis_is_seeded_and_handles_missing() {
    let (n, d, m) = (5usize, 1usize, 1usize);
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    // one of five missing is within the fill limit
    let y_eq = [1.0, 2.0, f64::NAN, 4.0, 5.0];
    let (y, r, seeds) = ([3.0], [0.5], [1u64, 2, 3, 4, 5]);
    let mut a = [0.0; 5];
    let mut b = [0.0; 5];
    unsafe {
        assert_eq!(osse_enkf_analysis(n, d, m, x.as_ptr(), y_eq.as_ptr(), y.as_ptr(), r.as_ptr(), seeds.as_ptr(), a.as_mut_ptr()), OsseStatus::Ok);
        assert_eq!(osse_enkf_analysis(n, d, m, x.as_ptr(), y_eq.as_ptr(), y.as_ptr(), r.as_ptr(), seeds.as_ptr(), b.as_mut_ptr()), OsseStatus::Ok);
    }
    assert_eq!(a, b);
    assert_ne!(a, x);
    // two of five missing exceeds it: the observation is dropped
    let sparse = [1.0, f64::NAN, f64::NAN, 4.0, 5.0];
    unsafe { osse_enkf_analysis(n, d, m, x.as_ptr(), sparse.as_ptr(), y.as_ptr(), r.as_ptr(), seeds.as_ptr(), a.as_mut_ptr()) };
    assert_eq!(a, x);
    let bad_r = [-1.0];
    let st = unsafe { osse_enkf_analysis(n, d, m, x.as_ptr(), y_eq.as_ptr(), y.as_ptr(), bad_r.as_ptr(), seeds.as_ptr(), a.as_mut_ptr()) };
    assert_eq!(st, OsseStatus::InvalidArgument);
}

#[test]
fn rmse_and_csi() {
    let t = [0.0, 10.0];
    let (p, tr) = ([1.3, 1.6], [1.0, 2.0]);
    let mut v = 0.0;
    assert_eq!(unsafe { osse_rmse(t.as_ptr(), p.as_ptr(), 2, t.as_ptr(), tr.as_ptr(), 2, &mut v) }, OsseStatus::Ok);
    assert!((v - 0.125f64.sqrt()).abs() < 1e-12);

    let pred = [1u8, 1, 0, 1, 1, 0, 0, 0, 0];
    let truth = [1u8, 1, 0, 1, 0, 1, 0, 0, 0];
    let mut counts = [0usize; 4];
    let mut csi = 0.0;
    let st = unsafe { osse_csi(pred.as_ptr(), truth.as_ptr(), ptr::null(), 9, counts.as_mut_ptr(), &mut csi) };
    assert_eq!(st, OsseStatus::Ok);
    assert_eq!(counts, [3, 1, 1, 4]);
    assert!((csi - 0.6).abs() < 1e-15);
    let dry = [0u8; 9];
    let st = unsafe { osse_csi(dry.as_ptr(), dry.as_ptr(), ptr::null(), 9, counts.as_mut_ptr(), &mut csi) };
    assert_eq!(st, OsseStatus::Undefined);
    assert!(csi.is_nan());
}

#[test]
fn small_pipeline_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = osse_core::case::CaseSpec { nx: 60, ny: 24, ..Default::default() };
    osse_core::case::build_synthetic_reach(&spec).unwrap().write(&root.join("case")).unwrap();
    std::fs::write(
        root.join("exp.toml"),
        "experiment = \"IDA\"\n[event]\nduration_h = 4.0\nspinup_h = 1.0\n[plan]\ns1_times_h = [2.0]\neval_times_h = [3.0]\nswot_first_h = 1.5\nswot_interval_h = 2.0\n[enkf]\nmembers = 4\ncycle_h = 2.0\n",
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(osse_config_load(cstr(&root.join("exp.toml")).as_ptr(), &mut cfg), OsseStatus::Ok);
        let set = CString::new("enkf.seed=5").unwrap();
        assert_eq!(osse_config_set(cfg, set.as_ptr()), OsseStatus::Ok);
        let bogus = CString::new("enkf.nope=1").unwrap();
        assert_eq!(osse_config_set(cfg, bogus.as_ptr()), OsseStatus::InvalidArgument);
        assert_eq!(osse_truth_run(cfg, cstr(&root.join("case")).as_ptr(), cstr(&root.join("truth")).as_ptr()), OsseStatus::Ok);
        assert_eq!(osse_obs_generate(cfg, cstr(&root.join("truth")).as_ptr(), cstr(&root.join("obs")).as_ptr()), OsseStatus::Ok);
        assert_eq!(osse_experiment_run(cfg, cstr(&root.join("run")).as_ptr()), OsseStatus::Ok);
        osse_config_free(cfg);
    }
    for f in ["stations_wse.csv", "controls.csv", "extent_10800.asc", "analysis_0.csv"] {
        assert!(root.join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/osse.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["osse_enkf_analysis", "osse_csi", "osse_last_error", "OSSE_STATUS_UNDEFINED"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
