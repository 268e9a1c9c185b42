//! C ABI for the cubelet solver.
//!
//! Every entry point returns a [`CubeletStatus`]; results come back through
//! out-pointers. Cases and finished runs are opaque handles owned by the
//! caller and released with their `_free` function. The message of the most
//! recent failure on the calling thread is available from
//! [`cubelet_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cubelet::cli::config::CaseConfig;
use cubelet::cli::run::{run_case, Case, RunOptions, RunSummary};
use cubelet::io::{compress_cube, decompress_cube, read_header, Mode};
use cubelet::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeletStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Bad configuration, argument or string encoding.
    InvalidArgument = 2,
    /// Mesh generation or geometry failed.
    Mesh = 3,
    /// The time loop diverged or broke a numerical limit.
    Numerics = 4,
    /// File system failure.
    Io = 5,
    /// Corrupt or incompatible checkpoint.
    Checkpoint = 6,
    /// Any other solver error.
    Internal = 7,
    /// A bug: the library panicked.
    Panic = 8,
}

/// A parsed case description.
pub struct CubeletCase {
    cfg: CaseConfig,
}

/// Outcome of a finished run.
pub struct CubeletRun {
    summary: RunSummary,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CubeletMeshStats {
    pub cubes: u64,
    pub cells: u64,
    pub levels: u32,
    pub particles: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CubeletCheckpointInfo {
    pub cubes: u64,
    pub cells_per_edge: u32,
    pub fields: u32,
    pub particles: u64,
    pub step: u64,
    pub time: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CubeletStatus {
    match e {
        Error::Config(_) | Error::InvalidRank { .. } | Error::OutOfRange { .. } => {
            CubeletStatus::InvalidArgument
        }
        Error::Mesh(_) | Error::Grading { .. } | Error::Geometry(_) => CubeletStatus::Mesh,
        Error::Numerics(_) => CubeletStatus::Numerics,
        Error::Io(_) => CubeletStatus::Io,
        Error::Checkpoint(_) => CubeletStatus::Checkpoint,
        _ => CubeletStatus::Internal,
    }
}

/// Run `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (CubeletStatus, String)>) -> CubeletStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CubeletStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CubeletStatus::Panic
        }
    }
}

fn lift<T>(r: cubelet::Result<T>) -> Result<T, (CubeletStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CubeletStatus, String) {
    (CubeletStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CubeletStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        (
            CubeletStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn case_ref<'a>(
    case: *const CubeletCase,
) -> Result<&'a CubeletCase, (CubeletStatus, String)> {
    case.as_ref().ok_or_else(|| null("case"))
}

unsafe fn case_mut<'a>(
    case: *mut CubeletCase,
) -> Result<&'a mut CubeletCase, (CubeletStatus, String)> {
    case.as_mut().ok_or_else(|| null("case"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cubelet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cubelet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parse a case from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cubelet_case_from_toml(
    toml: *const c_char,
    out: *mut *mut CubeletCase,
) -> CubeletStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(toml, "toml")?;
        let cfg = lift(CaseConfig::from_toml(text))?;
        lift(cfg.validate())?;
        *out = Box::into_raw(Box::new(CubeletCase { cfg }));
        Ok(())
    })
}

/// Load a case file; relative body paths resolve against its folder.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cubelet_case_load(
    path: *const c_char,
    out: *mut *mut CubeletCase,
) -> CubeletStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let cfg = lift(CaseConfig::load(path.as_ref()))?;
        lift(cfg.validate())?;
        *out = Box::into_raw(Box::new(CubeletCase { cfg }));
        Ok(())
    })
}

/// Release a case. Null is ignored.
///
/// # Safety
/// `case` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cubelet_case_free(case: *mut CubeletCase) {
    if !case.is_null() {
        drop(Box::from_raw(case));
    }
}

/// Set the rank count and worker threads per rank.
///
/// # Safety
/// `case` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cubelet_case_set_parallel(
    case: *mut CubeletCase,
    ranks: u32,
    threads: u32,
) -> CubeletStatus {
    guard(|| {
        let c = case_mut(case)?;
        let mut cfg = c.cfg.clone();
        cfg.parallel.ranks = ranks as usize;
        cfg.parallel.threads = threads as usize;
        lift(cfg.validate())?;
        c.cfg = cfg;
        Ok(())
    })
}

/// Set the end time of the run.
///
/// # Safety
/// `case` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cubelet_case_set_end_time(
    case: *mut CubeletCase,
    end_time: f64,
) -> CubeletStatus {
    guard(|| {
        let c = case_mut(case)?;
        let mut cfg = c.cfg.clone();
        cfg.time.end_time = end_time;
        lift(cfg.validate())?;
        c.cfg = cfg;
        Ok(())
    })
}

/// Set the folder for forces, logs and checkpoints.
///
/// # Safety
/// `case` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cubelet_case_set_output_dir(
    case: *mut CubeletCase,
    dir: *const c_char,
) -> CubeletStatus {
    guard(|| {
        let c = case_mut(case)?;
        c.cfg.output.dir = PathBuf::from(str_arg(dir, "dir")?);
        Ok(())
    })
}

/// Build the mesh and particles of a case and report their size.
///
/// # Safety
/// `case` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cubelet_case_mesh_stats(
    case: *const CubeletCase,
    out: *mut CubeletMeshStats,
) -> CubeletStatus {
    guard(|| {
        let c = case_ref(case)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let built = lift(Case::build(&c.cfg))?;
        let st = built.mesh.stats();
        *out = CubeletMeshStats {
            cubes: st.total_cubes as u64,
            cells: st.total_cells as u64,
            levels: st.cubes_per_level.len() as u32,
            particles: built.particle_count() as u64,
        };
        Ok(())
    })
}

/// Run a case to its end time, optionally resuming from a checkpoint
/// (`restart` may be null).
///
/// # Safety
/// `case` must be a live handle; `restart` null or a NUL-terminated string;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cubelet_run(
    case: *const CubeletCase,
    restart: *const c_char,
    out: *mut *mut CubeletRun,
) -> CubeletStatus {
    guard(|| {
        let c = case_ref(case)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let restart = if restart.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(restart, "restart")?))
        };
        let opts = RunOptions {
            restart,
            ..Default::default()
        };
        let summary = lift(run_case(&c.cfg, &opts))?;
        *out = Box::into_raw(Box::new(CubeletRun { summary }));
        Ok(())
    })
}

/// Release a run. Null is ignored.
///
/// # Safety
/// `run` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cubelet_run_free(run: *mut CubeletRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Final step number and time of a run.
///
/// # Safety
/// `run` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cubelet_run_final(
    run: *const CubeletRun,
    step: *mut u64,
    time: *mut f64,
) -> CubeletStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        *step.as_mut().ok_or_else(|| null("step"))? = r.summary.final_step;
        *time.as_mut().ok_or_else(|| null("time"))? = r.summary.t;
        Ok(())
    })
}

/// Number of recorded force samples.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cubelet_run_force_count(run: *const CubeletRun) -> usize {
    run.as_ref().map_or(0, |r| r.summary.forces.len())
}

/// Force sample `i` as `{t, fx, fy, fz}`.
///
/// # Safety
/// `run` must be a live handle; `out` must hold four doubles.
#[no_mangle]
pub unsafe extern "C" fn cubelet_run_force(
    run: *const CubeletRun,
    i: usize,
    out: *mut f64,
) -> CubeletStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (t, f) = *r.summary.forces.get(i).ok_or_else(|| {
            (
                CubeletStatus::InvalidArgument,
                format!("force sample {i} of {}", r.summary.forces.len()),
            )
        })?;
        let out = std::slice::from_raw_parts_mut(out, 4);
        out.copy_from_slice(&[t, f[0], f[1], f[2]]);
        Ok(())
    })
}

/// Summary of a checkpoint file, after checking its integrity.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cubelet_checkpoint_info(
    path: *const c_char,
    out: *mut CubeletCheckpointInfo,
) -> CubeletStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let h = lift(read_header(path.as_ref()))?;
        *out = CubeletCheckpointInfo {
            cubes: h.cubes.len() as u64,
            cells_per_edge: h.n_cells as u32,
            fields: h.fields.len() as u32,
            particles: h.particle_count,
            step: h.step,
            time: h.t,
        };
        Ok(())
    })
}

/// Compress one cube of `ncomp` components laid out as `side^3` values
/// each. `q` is the detail quantization step; zero means lossless. The
/// returned buffer is released with [`cubelet_bytes_free`].
///
/// # Safety
/// `values` must hold `ncomp * side^3` doubles; the out-pointers must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cubelet_compress_cube(
    values: *const f64,
    side: usize,
    ncomp: usize,
    q: f64,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> CubeletStatus {
    guard(|| {
        if values.is_null() || out.is_null() || out_len.is_null() {
            return Err(null("argument"));
        }
        if side == 0 || !side.is_multiple_of(2) || ncomp == 0 || !(q >= 0.0) || !q.is_finite() {
            return Err((
                CubeletStatus::InvalidArgument,
                format!("side {side}, ncomp {ncomp}, q {q}"),
            ));
        }
        let vals = std::slice::from_raw_parts(values, ncomp * side * side * side);
        let mode = if q == 0.0 {
            Mode::Lossless
        } else {
            Mode::Lossy { q }
        };
        let bytes = compress_cube(vals, side, ncomp, mode).into_boxed_slice();
        *out_len = bytes.len();
        *out = Box::into_raw(bytes).cast();
        Ok(())
    })
}

/// Release a buffer from [`cubelet_compress_cube`].
///
/// # Safety
/// `ptr` and `len` must be exactly as returned.
#[no_mangle]
pub unsafe extern "C" fn cubelet_bytes_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}

/// Decompress a cube stream into `values` (`ncomp * side^3` doubles).
///
/// # Safety
/// `bytes` must hold `len` bytes and `values` the decoded size.
#[no_mangle]
pub unsafe extern "C" fn cubelet_decompress_cube(
    bytes: *const u8,
    len: usize,
    side: usize,
    ncomp: usize,
    values: *mut f64,
) -> CubeletStatus {
    guard(|| {
        if bytes.is_null() || values.is_null() {
            return Err(null("argument"));
        }
        if side == 0 || !side.is_multiple_of(2) || ncomp == 0 {
            return Err((
                CubeletStatus::InvalidArgument,
                format!("side {side}, ncomp {ncomp}"),
            ));
        }
        let stream = std::slice::from_raw_parts(bytes, len);
        let decoded = lift(decompress_cube(stream, side, ncomp))?;
        let n = ncomp * side * side * side;
        if decoded.len() != n {
            return Err((
                CubeletStatus::Checkpoint,
                format!("decoded {} values, expected {n}", decoded.len()),
            ));
        }
        std::slice::from_raw_parts_mut(values, n).copy_from_slice(&decoded);
        Ok(())
    })
}
