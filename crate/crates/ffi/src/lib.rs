//! C ABI over `umeta`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Every fallible call returns a
//! [`UmetaStatus`]; on failure, [`umeta_last_error_message`] describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use umeta::data::{self, DataFormat, DataSet, SynthSpec};
use umeta::linalg::Mat;
use umeta::nn::{self, ModelParams};
use umeta::partition::{kmeans, KMeansOptions};
use umeta::{checkpoint, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmetaStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// Null pointer, bad UTF-8 or undersized output buffer.
    InvalidArgument = 5,
    Panic = 6,
}

/// A loaded or generated dataset.
pub struct UmetaDataset(DataSet);

/// A feed-forward model read from a checkpoint.
pub struct UmetaModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> UmetaStatus {
    match e.exit_code() {
        2 => UmetaStatus::Config,
        4 => UmetaStatus::Numeric,
        _ => UmetaStatus::Data,
    }
}

fn invalid(msg: &str) -> UmetaStatus {
    set_error(msg.to_string());
    UmetaStatus::InvalidArgument
}

fn guard(f: impl FnOnce() -> Result<(), UmetaStatus>) -> UmetaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UmetaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            UmetaStatus::Panic
        }
    }
}

fn fail(e: Error) -> UmetaStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, UmetaStatus> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn umeta_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn umeta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an `EMB1` (or `.csv`) dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_load(path: *const c_char, out: *mut *mut UmetaDataset) -> UmetaStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let path = path_arg(path)?;
        let ds = data::load_dataset(path, DataFormat::from_path(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(UmetaDataset(ds)));
        Ok(())
    })
}

/// Generates a synthetic Gaussian-mixture dataset (all rows meta-train).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_synth(
    num_classes: usize,
    per_class: usize,
    d_in: usize,
    d_z: usize,
    noise: f64,
    seed: u64,
    out: *mut *mut UmetaDataset,
) -> UmetaStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let spec = SynthSpec::new(num_classes, per_class, d_in, d_z, noise, seed);
        let ds = data::synth_mixture(&spec).map_err(fail)?;
        *out = Box::into_raw(Box::new(UmetaDataset(ds)));
        Ok(())
    })
}

/// Writes a dataset; the format follows the file extension.
///
/// # Safety
/// `ds` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_save(ds: *const UmetaDataset, path: *const c_char) -> UmetaStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| invalid("dataset is null"))?;
        let path = path_arg(path)?;
        data::save_dataset(&ds.0, path, DataFormat::from_path(path)).map_err(fail)
    })
}

/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_rows(ds: *const UmetaDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_raw_dim(ds: *const UmetaDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.raw().cols())
}

/// Zero when the dataset has no embeddings.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_embedding_dim(ds: *const UmetaDataset) -> usize {
    ds.as_ref().and_then(|d| d.0.embeddings()).map_or(0, |e| e.cols())
}

/// Copies the row-major embedding matrix into `out` (`rows * dim` values).
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_embeddings(ds: *const UmetaDataset, out: *mut f64, out_len: usize) -> UmetaStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| invalid("dataset is null"))?;
        let e = ds.0.require_embeddings().map_err(fail)?;
        copy_out(e.as_slice(), out, out_len)
    })
}

/// # Safety
/// `ds` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn umeta_dataset_free(ds: *mut UmetaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Reads a `CMP1` checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn umeta_model_load(path: *const c_char, out: *mut *mut UmetaModel) -> UmetaStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let params = checkpoint::load(path_arg(path)?).map_err(fail)?;
        *out = Box::into_raw(Box::new(UmetaModel(params)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn umeta_model_in_dim(m: *const UmetaModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.in_dim())
}

/// # Safety
/// `m` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn umeta_model_out_dim(m: *const UmetaModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.out_dim())
}

unsafe fn slice_in<'a>(p: *const f64, len: usize) -> Result<&'a [f64], UmetaStatus> {
    if p.is_null() && len > 0 {
        return Err(invalid("input is null"));
    }
    Ok(if len == 0 { &[] } else { std::slice::from_raw_parts(p, len) })
}

unsafe fn copy_out(src: &[f64], out: *mut f64, out_len: usize) -> Result<(), UmetaStatus> {
    if out.is_null() || out_len < src.len() {
        return Err(invalid(&format!("output buffer needs {} values", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Forward pass on `rows` row-major inputs of width `cols`; writes
/// `rows * out_dim` outputs.
///
/// # Safety
/// `inputs` must hold `rows * cols` doubles and `out` `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeta_model_forward(
    m: *const UmetaModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> UmetaStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| invalid("model is null"))?;
        let x = Mat::from_vec(rows, cols, slice_in(inputs, rows * cols)?.to_vec()).map_err(fail)?;
        let y = nn::forward(&m.0, &x).map_err(fail)?;
        copy_out(y.as_slice(), out, out_len)
    })
}

/// # Safety
/// `m` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn umeta_model_free(m: *mut UmetaModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Lloyd k-means on `rows` row-major points of width `cols` with diagonal
/// metric `scaling` (null for all ones). Writes one cluster id per row and,
/// if `objective` is non-null, the final objective.
///
/// # Safety
/// `points` must hold `rows * cols` doubles, `scaling` null or `cols`
/// doubles, `assignment` `rows` writable integers.
#[no_mangle]
pub unsafe extern "C" fn umeta_kmeans(
    points: *const f64,
    rows: usize,
    cols: usize,
    k: usize,
    scaling: *const f64,
    seed: u64,
    assignment: *mut i64,
    objective: *mut f64,
) -> UmetaStatus {
    guard(|| {
        let x = Mat::from_vec(rows, cols, slice_in(points, rows * cols)?.to_vec()).map_err(fail)?;
        let w = if scaling.is_null() {
            vec![1.0; cols]
        } else {
            slice_in(scaling, cols)?.to_vec()
        };
        if assignment.is_null() {
            return Err(invalid("assignment is null"));
        }
        let (p, trace) = kmeans(&x, k, &w, seed, &KMeansOptions::default()).map_err(fail)?;
        ptr::copy_nonoverlapping(p.assignment().as_ptr(), assignment, rows);
        if !objective.is_null() {
            *objective = trace.final_objective();
        }
        Ok(())
    })
}
