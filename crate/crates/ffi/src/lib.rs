//! C ABI over the twin-experiment toolkit.
//!
//! Every entry point returns an `OsseStatus`; on failure the message is kept
//! per thread and can be fetched with `osse_last_error`. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use osse_core::case::{build_synthetic_reach, CaseSpec, DomainCase};
use osse_core::enkf::{self, AnalysisBatch, ObsMeta, ObsRow, Source};
use osse_core::metrics;
use osse_core::obs::FloodExtentMap;
use osse_core::osse::{self, Config, ObsArchive, PassPlan, TruthOutput};
use osse_core::OsseError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OsseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    /// The result is mathematically undefined, e.g. CSI of two dry maps.
    Undefined = 5,
    Panic = 6,
}

/// Loaded domain case.
pub struct OsseCase {
    inner: DomainCase,
}

/// Parsed experiment configuration.
pub struct OsseConfig {
    inner: Config,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &OsseError) -> OsseStatus {
    if e.is_numerical() {
        OsseStatus::Numerical
    } else if matches!(e, OsseError::Io { .. }) {
        OsseStatus::Io
    } else {
        OsseStatus::InvalidArgument
    }
}

fn guard(f: impl FnOnce() -> Result<(), (OsseStatus, String)>) -> OsseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OsseStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OsseStatus::Panic
        }
    }
}

fn core_err(e: OsseError) -> (OsseStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (OsseStatus, String) {
    (OsseStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (OsseStatus, String) {
    (OsseStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg(p: *const c_char, what: &str) -> Result<String, (OsseStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (OsseStatus, String)> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (OsseStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (OsseStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn osse_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Build the default synthetic reach.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn osse_case_build_default(out: *mut *mut OsseCase) -> OsseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = build_synthetic_reach(&CaseSpec::default()).map_err(core_err)?;
        *out = Box::into_raw(Box::new(OsseCase { inner }));
        Ok(())
    })
}

/// Read a case directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn osse_case_read(dir: *const c_char, out: *mut *mut OsseCase) -> OsseStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = DomainCase::read(&dir).map_err(core_err)?;
        *out = Box::into_raw(Box::new(OsseCase { inner }));
        Ok(())
    })
}

/// Write a case to a directory.
///
/// # Safety
/// `case` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn osse_case_write(case: *const OsseCase, dir: *const c_char) -> OsseStatus {
    guard(|| {
        let case = case.as_ref().ok_or_else(|| null("case"))?;
        let dir = path_arg(dir, "dir")?;
        case.inner.write(&dir).map_err(core_err)
    })
}

/// Grid dimensions plus the number of friction zones and floodplain
/// subdomains. Any output pointer may be null.
///
/// # Safety
/// `case` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn osse_case_dims(
    case: *const OsseCase,
    nx: *mut usize,
    ny: *mut usize,
    zones: *mut usize,
    subdomains: *mut usize,
) -> OsseStatus {
    guard(|| {
        let c = &case.as_ref().ok_or_else(|| null("case"))?.inner;
        for (p, v) in [(nx, c.grid.nx), (ny, c.grid.ny), (zones, c.zone_count()), (subdomains, c.subdomain_count())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `case` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn osse_case_free(case: *mut OsseCase) {
    if !case.is_null() {
        drop(Box::from_raw(case));
    }
}

/// Load a TOML experiment configuration. Relative directories resolve
/// against the file's directory.
///
/// # Safety
/// `path` must be NUL-terminated; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn osse_config_load(path: *const c_char, out: *mut *mut OsseConfig) -> OsseStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Config::load(&path, &[]).map_err(core_err)?;
        *out = Box::into_raw(Box::new(OsseConfig { inner }));
        Ok(())
    })
}

/// Apply one `key.path=value` override to a loaded configuration.
///
/// # Safety
/// `cfg` must come from this library; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn osse_config_set(cfg: *mut OsseConfig, assignment: *const c_char) -> OsseStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let a = str_arg(assignment, "assignment")?;
        // the serialized config already carries resolved directories
        let next = Config::from_toml(&cfg.inner.to_toml(), &[a]).map_err(core_err)?;
        cfg.inner = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn osse_config_free(cfg: *mut OsseConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Reference run with the configured true control, written to `out_dir`.
///
/// # Safety
/// Handles must come from this library; `case_dir` and `out_dir` must be
/// NUL-terminated. The case is re-read from `case_dir` so the truth manifest
/// can point at it.
#[no_mangle]
pub unsafe extern "C" fn osse_truth_run(cfg: *const OsseConfig, case_dir: *const c_char, out_dir: *const c_char) -> OsseStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.inner;
        let case_dir = path_arg(case_dir, "case_dir")?;
        let out = path_arg(out_dir, "out_dir")?;
        let case = DomainCase::read(&case_dir).map_err(core_err)?;
        let truth = osse::run_truth(cfg, &case).map_err(core_err)?;
        truth.write(&out, &case, &case_dir).map_err(core_err)
    })
}

/// Synthetic observations of the truth in `truth_dir`, written to `out_dir`.
///
/// # Safety
/// `cfg` must come from this library; paths must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn osse_obs_generate(cfg: *const OsseConfig, truth_dir: *const c_char, out_dir: *const c_char) -> OsseStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.inner;
        let truth_dir = path_arg(truth_dir, "truth_dir")?;
        let out = path_arg(out_dir, "out_dir")?;
        let (truth, case_dir) = TruthOutput::read(&truth_dir).map_err(core_err)?;
        let case = DomainCase::read(&case_dir).map_err(core_err)?;
        let plan = PassPlan::new(cfg, &case).map_err(core_err)?;
        let obs = osse::generate_observations(cfg, &case, &truth, &plan).map_err(core_err)?;
        obs.write(&out, &case).map_err(core_err)
    })
}

/// Run the configured experiment against the config's truth and
/// observation directories, writing the run tree to `out_dir`.
///
/// # Safety
/// `cfg` must come from this library; `out_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn osse_experiment_run(cfg: *const OsseConfig, out_dir: *const c_char) -> OsseStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.inner;
        let out = path_arg(out_dir, "out_dir")?;
        let (truth, case_dir) = TruthOutput::read(&cfg.truth_dir).map_err(core_err)?;
        let case = DomainCase::read(&case_dir).map_err(core_err)?;
        let obs = ObsArchive::read(&cfg.obs_dir).map_err(core_err)?;
        let res = osse::run_experiment(cfg, &case, &obs, &truth).map_err(core_err)?;
        res.write(&out, &case).map_err(core_err)
    })
}

unsafe fn batch_from_raw(
    n: usize,
    d: usize,
    m: usize,
    x: *const f64,
    y_eq: *const f64,
    y: *const f64,
    r: *const f64,
) -> Result<AnalysisBatch, (OsseStatus, String)> {
    let x = slice(x, n * d, "x")?;
    let y_eq = slice(y_eq, n * m, "y_eq")?;
    let y = slice(y, m, "y")?;
    let r = slice(r, m, "r")?;
    let xm = nalgebra::DMatrix::from_row_slice(n, d, x);
    let rows = (0..m)
        .map(|j| ObsRow {
            meta: ObsMeta { source: Source::Gauge, id: j.to_string(), t: 0.0 },
            y: y[j],
            r: r[j],
            equivalents: (0..n).map(|i| Some(y_eq[i * m + j]).filter(|v| !v.is_nan())).collect(),
        })
        .collect();
    AnalysisBatch::new(xm, rows).map_err(core_err)
}

/// Stochastic EnKF analysis on raw row-major arrays.
///
/// `x` is N x d (one member per row), `y_eq` is N x m with NaN marking a
/// missing equivalent, `y` and `r` have m entries, `seeds` has N entries.
/// The analysed controls are written to `x_out` (N x d, row-major, no
/// clipping).
///
/// # Safety
/// All pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn osse_enkf_analysis(
    n: usize,
    d: usize,
    m: usize,
    x: *const f64,
    y_eq: *const f64,
    y: *const f64,
    r: *const f64,
    seeds: *const u64,
    x_out: *mut f64,
) -> OsseStatus {
    guard(|| {
        let batch = batch_from_raw(n, d, m, x, y_eq, y, r)?;
        let seeds = slice(seeds, n, "seeds")?;
        let xa = enkf::analysis(&batch, seeds).map_err(core_err)?;
        let out = slice_mut(x_out, n * d, "x_out")?;
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xa[(i, j)];
            }
        }
        Ok(())
    })
}

/// Kalman gain (d x m, row-major) of a batch with no missing equivalents.
///
/// # Safety
/// All pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn osse_enkf_gain(
    n: usize,
    d: usize,
    m: usize,
    x: *const f64,
    y_eq: *const f64,
    r: *const f64,
    k_out: *mut f64,
) -> OsseStatus {
    guard(|| {
        let zeros = vec![0.0; m];
        let batch = batch_from_raw(n, d, m, x, y_eq, zeros.as_ptr(), r)?;
        if batch.obs_count() != m {
            return Err(invalid("gain needs every equivalent to be present"));
        }
        let k = enkf::gain(&batch).map_err(core_err)?;
        let out = slice_mut(k_out, d * m, "k_out")?;
        for i in 0..d {
            for j in 0..m {
                out[i * m + j] = k[(i, j)];
            }
        }
        Ok(())
    })
}

/// RMSE of a predicted series against a truth series; the prediction is
/// linearly interpolated onto the truth times.
///
/// # Safety
/// All pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn osse_rmse(
    pred_t: *const f64,
    pred_v: *const f64,
    n_pred: usize,
    truth_t: *const f64,
    truth_v: *const f64,
    n_truth: usize,
    out: *mut f64,
) -> OsseStatus {
    guard(|| {
        let zip = |t: &[f64], v: &[f64]| t.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
        let pred = zip(slice(pred_t, n_pred, "pred_t")?, slice(pred_v, n_pred, "pred_v")?);
        let truth = zip(slice(truth_t, n_truth, "truth_t")?, slice(truth_v, n_truth, "truth_v")?);
        let v = metrics::rmse(&pred, &truth).map_err(core_err)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Contingency counts and CSI of two wet/dry maps of `n` cells (nonzero =
/// wet). `mask` may be null to score every cell. `counts` receives hits,
/// misses, false alarms and correct negatives. Returns `Undefined` with
/// `csi` set to NaN when both maps are dry inside the mask.
///
/// # Safety
/// Arrays must hold `n` entries; `counts` must hold 4.
#[no_mangle]
pub unsafe extern "C" fn osse_csi(
    pred: *const u8,
    truth: *const u8,
    mask: *const u8,
    n: usize,
    counts: *mut usize,
    csi: *mut f64,
) -> OsseStatus {
    let mut undefined = false;
    let status = guard(|| {
        let wet = |s: &[u8]| s.iter().map(|&v| v != 0).collect::<Vec<_>>();
        let p = FloodExtentMap { t: 0.0, wet: wet(slice(pred, n, "pred")?) };
        let t = FloodExtentMap { t: 0.0, wet: wet(slice(truth, n, "truth")?) };
        let mask = if mask.is_null() { vec![true; n] } else { wet(slice(mask, n, "mask")?) };
        let map = metrics::contingency(&p, &t, &mask).map_err(core_err)?;
        let c = map.counts();
        if !counts.is_null() {
            let out = slice_mut(counts, 4, "counts")?;
            out.copy_from_slice(&[c.hits, c.misses, c.false_alarms, c.correct_negatives]);
        }
        let v = metrics::csi(&map);
        undefined = v.is_none();
        *csi.as_mut().ok_or_else(|| null("csi"))? = v.unwrap_or(f64::NAN);
        Ok(())
    });
    if status == OsseStatus::Ok && undefined {
        set_error("CSI undefined: both maps are dry");
        return OsseStatus::Undefined;
    }
    status
}
