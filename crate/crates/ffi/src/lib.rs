//! C ABI over the dupaudit core library.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a [`DaStatus`];
//! on failure [`da_last_error`] describes the problem until the next call on
//! the same thread. Strings handed out by the library are released with
//! [`da_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dupaudit::cluster::{cluster_embeddings, cluster_share, Clustering, Denominator, ReferenceMatch};
use dupaudit::embed::EmbeddingMatrix;
use dupaudit::ingest::{filter_by_keywords, DatasetSlice, FilterSpec, MatchMode};
use dupaudit::pipeline::run_pipeline;
use dupaudit::probe::ProbeResult;
use dupaudit::report::{emit_probe_table, ReportFormat};
use dupaudit::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaStatus {
    Ok = 0,
    /// Bad arguments, missing files or degenerate input.
    Usage = 1,
    /// The model service failed or was unreachable.
    Backend = 2,
    /// Corrupt artifact or violated invariant.
    Format = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// Index out of range.
    OutOfRange = 6,
    /// The library panicked; the handle involved should be discarded.
    Panic = 7,
}

pub struct DaSlice(DatasetSlice);
pub struct DaMatrix(EmbeddingMatrix);
pub struct DaClustering(Clustering);
pub struct DaProbe(ProbeResult);

/// Report table layout for [`da_probe_table`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaFormat {
    Text = 0,
    Csv = 1,
    Markdown = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => DaStatus::Backend,
            3 => DaStatus::Format,
            _ => DaStatus::Usage,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DaStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DaStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DaStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(DaStatus::Format, "output contains a nul byte".into()))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library on this thread; do not free.
#[no_mangle]
pub extern "C" fn da_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn da_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn da_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_slice_load(path: *const c_char, out: *mut *mut DaSlice) -> DaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let slice = DatasetSlice::load(&path)?;
        put(out, boxed(DaSlice(slice)), "out")
    })
}

/// # Safety
/// `slice` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn da_slice_save(slice: *const DaSlice, path: *const c_char) -> DaStatus {
    guard(|| {
        let slice = handle(slice, "slice")?;
        let path = path_arg(path, "path")?;
        Ok(slice.0.save(&path)?)
    })
}

/// Records in the slice, active or not. Zero for a null handle.
///
/// # Safety
/// `slice` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn da_slice_len(slice: *const DaSlice) -> usize {
    slice.as_ref().map_or(0, |s| s.0.len())
}

/// Records that survived every filter so far. Zero for a null handle.
///
/// # Safety
/// `slice` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn da_slice_active_count(slice: *const DaSlice) -> usize {
    slice.as_ref().map_or(0, |s| s.0.active().count())
}

/// Case-folded whole-word keyword filter. `keywords` is space separated; an
/// empty string keeps every record. `match_any` selects any-of instead of all-of.
///
/// # Safety
/// `slice` must be a live handle, `keywords` a nul-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn da_slice_filter_keywords(
    slice: *const DaSlice,
    keywords: *const c_char,
    match_any: bool,
    out: *mut *mut DaSlice,
) -> DaStatus {
    guard(|| {
        let slice = handle(slice, "slice")?;
        let words: Vec<&str> = str_arg(keywords, "keywords")?.split_whitespace().collect();
        let mode = if match_any { MatchMode::Any } else { MatchMode::All };
        let filtered = filter_by_keywords(&slice.0, &FilterSpec::words(&words, mode));
        put(out, boxed(DaSlice(filtered)), "out")
    })
}

/// # Safety
/// `slice` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_slice_free(slice: *mut DaSlice) {
    if !slice.is_null() {
        drop(Box::from_raw(slice));
    }
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_matrix_load(path: *const c_char, out: *mut *mut DaMatrix) -> DaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let m = EmbeddingMatrix::load(&path)?;
        put(out, boxed(DaMatrix(m)), "out")
    })
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn da_matrix_len(m: *const DaMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.len())
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn da_matrix_dim(m: *const DaMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.dim())
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_matrix_free(m: *mut DaMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Greedy leader clustering at similarity threshold `tau`.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn da_cluster(m: *const DaMatrix, tau: f64, out: *mut *mut DaClustering) -> DaStatus {
    guard(|| {
        let m = handle(m, "matrix")?;
        let c = cluster_embeddings(&m.0, tau)?;
        put(out, boxed(DaClustering(c)), "out")
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_clustering_load(path: *const c_char, out: *mut *mut DaClustering) -> DaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let c = Clustering::load(&path)?;
        put(out, boxed(DaClustering(c)), "out")
    })
}

/// # Safety
/// `c` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn da_clustering_save(c: *const DaClustering, path: *const c_char) -> DaStatus {
    guard(|| {
        let c = handle(c, "clustering")?;
        let path = path_arg(path, "path")?;
        Ok(c.0.save(&path)?)
    })
}

/// Clusters that are not omitted as noise.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn da_clustering_count(c: *const DaClustering) -> usize {
    c.as_ref().map_or(0, |c| c.0.reported().count())
}

/// Size of the reported cluster at zero-based `rank`.
///
/// # Safety
/// `c` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn da_clustering_size(c: *const DaClustering, rank: usize, out: *mut usize) -> DaStatus {
    guard(|| {
        let c = handle(c, "clustering")?;
        let size = c
            .0
            .reported()
            .nth(rank)
            .map(|cl| cl.size())
            .ok_or_else(|| Failure(DaStatus::OutOfRange, format!("no cluster at rank {rank}")))?;
        put(out, size, "out")
    })
}

/// # Safety
/// `c` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_clustering_free(c: *mut DaClustering) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Fraction of all clustered records that sit in clusters whose leader is
/// within `tau_ref` of row `reference_index` of `reference`.
///
/// # Safety
/// All handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn da_cluster_share(
    c: *const DaClustering,
    m: *const DaMatrix,
    reference: *const DaMatrix,
    reference_index: usize,
    tau_ref: f64,
    out: *mut f64,
) -> DaStatus {
    guard(|| {
        let c = handle(c, "clustering")?;
        let m = handle(m, "matrix")?;
        let r = handle(reference, "reference")?;
        let vector = r.0.vectors().get(reference_index).ok_or_else(|| {
            Failure(DaStatus::OutOfRange, format!("reference has no row {reference_index}"))
        })?;
        let share = cluster_share(&c.0, &m.0, ReferenceMatch { vector, tau_ref }, Denominator::All)?;
        put(out, share, "out")
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_probe_load(path: *const c_char, out: *mut *mut DaProbe) -> DaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let r = ProbeResult::load(&path)?;
        put(out, boxed(DaProbe(r)), "out")
    })
}

/// Percentage of successful seeds whose similarity exceeds the probe threshold.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn da_probe_percent_above(p: *const DaProbe, out: *mut f64) -> DaStatus {
    guard(|| {
        let p = handle(p, "probe")?;
        put(out, p.0.percent_above, "out")
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_probe_free(p: *mut DaProbe) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Render `n` probe results as one table. Free `*out` with [`da_string_free`].
///
/// # Safety
/// `probes` must point to `n` live handles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_probe_table(
    probes: *const *const DaProbe,
    n: usize,
    format: DaFormat,
    out: *mut *mut c_char,
) -> DaStatus {
    guard(|| {
        if probes.is_null() && n > 0 {
            return Err(null("probes"));
        }
        let handles = if n == 0 { &[][..] } else { std::slice::from_raw_parts(probes, n) };
        let results = handles
            .iter()
            .map(|&p| handle(p, "probes[i]").map(|p| p.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let format = match format {
            DaFormat::Text => ReportFormat::Text,
            DaFormat::Csv => ReportFormat::Csv,
            DaFormat::Markdown => ReportFormat::Markdown,
        };
        let table = emit_probe_table(&results, format)?;
        put(out, owned_string(table)?, "out")
    })
}

/// Run the stages of a pipeline config file. `stages_run` may be null;
/// otherwise it receives the number of stages that were not up to date.
///
/// # Safety
/// `config` must be a nul-terminated string; `stages_run` null or writable.
#[no_mangle]
pub unsafe extern "C" fn da_pipeline_run(config: *const c_char, stages_run: *mut usize) -> DaStatus {
    guard(|| {
        let config = path_arg(config, "config")?;
        let outcome = run_pipeline(&config)?;
        if !stages_run.is_null() {
            stages_run.write(outcome.ran.len());
        }
        Ok(())
    })
}
