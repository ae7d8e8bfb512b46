// SPDX-License-Identifier: Apache-2.0

//! C ABI over the `ncvae` library.
//!
//! Every fallible call returns an [`NcvaeStatus`]. On failure a message is
//! kept per thread and can be read with [`ncvae_last_error_message`].
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ncvae::checkpoint;
use ncvae::config::TrainConfig;
use ncvae::diagnostics;
use ncvae::gradcore::Array;
use ncvae::matcore::{self, DenseMatrix};
use ncvae::model::Model;
use ncvae::toydata::Dataset;
use ncvae::trainer::{self, RunState};
use ncvae::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcvaeStatus {
    Ok = 0,
    Io = 1,
    Invalid = 2,
    Numerical = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Model sizes needed to allocate buffers.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NcvaeDims {
    pub pixels: usize,
    pub latent: usize,
    pub group_dim: usize,
    pub categories: usize,
}

/// Rendered shapes dataset.
pub struct NcvaeDataset(Dataset);

/// Model restored from a training checkpoint.
pub struct NcvaeModel {
    state: RunState,
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(NcvaeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            1 => NcvaeStatus::Io,
            3 => NcvaeStatus::Numerical,
            _ => NcvaeStatus::Invalid,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NcvaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            NcvaeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            NcvaeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(NcvaeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(NcvaeStatus::Invalid, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn input_slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn write_out(out: *mut f64, values: &[f64], what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn store_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ncvae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ncvae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Matrix exponential of the row-major `n × n` matrix `a` into `out`.
///
/// # Safety
/// `a` and `out` must each point to `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncvae_mat_exp(n: usize, a: *const f64, out: *mut f64) -> NcvaeStatus {
    guard(|| {
        let data = input_slice(a, n * n, "a")?.to_vec();
        let m = DenseMatrix::new(n, n, data)?;
        let e = matcore::mat_exp(&m)?;
        write_out(out, e.data(), "out")
    })
}

/// Renders `count` images of side `side` from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_generate(
    count: usize,
    side: usize,
    seed: u64,
    out: *mut *mut NcvaeDataset,
) -> NcvaeStatus {
    guard(|| {
        let ds = Dataset::generate(count, side, seed)?;
        store_handle(out, NcvaeDataset(ds))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_load(
    path: *const c_char,
    out: *mut *mut NcvaeDataset,
) -> NcvaeStatus {
    guard(|| {
        let ds = Dataset::load(&path_arg(path, "path")?)?;
        store_handle(out, NcvaeDataset(ds))
    })
}

/// # Safety
/// `ds` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_save(
    ds: *const NcvaeDataset,
    path: *const c_char,
) -> NcvaeStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        ds.0.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of images, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_len(ds: *const NcvaeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Image side length, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_side(ds: *const NcvaeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.side())
}

/// Copies image `index` as `side * side` intensities in [0, 1].
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_image(
    ds: *const NcvaeDataset,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> NcvaeStatus {
    guard(|| {
        let ds = &deref(ds, "dataset")?.0;
        if index >= ds.len() {
            return Err(Failure(
                NcvaeStatus::Invalid,
                format!("image {index} out of range for {} images", ds.len()),
            ));
        }
        let img = ds.image(index);
        if out_len < img.len() {
            return Err(Failure(
                NcvaeStatus::BufferTooSmall,
                format!("need {} doubles", img.len()),
            ));
        }
        write_out(out, &img, "out")
    })
}

/// Writes the hex SHA-256 checksum, NUL-terminated; needs 65 bytes.
///
/// # Safety
/// `buf` must hold `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_checksum(
    ds: *const NcvaeDataset,
    buf: *mut c_char,
    buf_len: usize,
) -> NcvaeStatus {
    guard(|| {
        let sum = deref(ds, "dataset")?.0.checksum();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if buf_len < sum.len() + 1 {
            return Err(Failure(
                NcvaeStatus::BufferTooSmall,
                format!("need {} bytes", sum.len() + 1),
            ));
        }
        std::ptr::copy_nonoverlapping(sum.as_ptr().cast(), buf, sum.len());
        *buf.add(sum.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ncvae_dataset_free(ds: *mut NcvaeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Runs the full curriculum into `out_dir`. A null `config_path` uses the
/// default configuration.
///
/// # Safety
/// Non-null arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ncvae_train(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> NcvaeStatus {
    guard(|| {
        let out_dir = path_arg(out_dir, "out_dir")?;
        let mut cfg = if config_path.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::load(&path_arg(config_path, "config_path")?)?
        };
        cfg.apply_env()?;
        trainer::run_curriculum(&cfg, &out_dir)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn ncvae_model_load(
    path: *const c_char,
    out: *mut *mut NcvaeModel,
) -> NcvaeStatus {
    guard(|| {
        let (state, params) = checkpoint::load::<RunState>(&path_arg(path, "path")?)?;
        let model = trainer::model_with_params(&state.config, params)?;
        store_handle(out, NcvaeModel { state, model })
    })
}

/// # Safety
/// `model` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ncvae_model_free(model: *mut NcvaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ncvae_model_dims(
    model: *const NcvaeModel,
    out: *mut NcvaeDims,
) -> NcvaeStatus {
    guard(|| {
        let dims = &deref(model, "model")?.model.dims;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = NcvaeDims {
            pixels: dims.pixels,
            latent: dims.d,
            group_dim: dims.n,
            categories: dims.k,
        };
        Ok(())
    })
}

unsafe fn batch_arg(model: &Model, x: *const f64, rows: usize) -> Result<Array, Failure> {
    let p = model.dims.pixels;
    let data = input_slice(x, rows * p, "x")?.to_vec();
    Ok(Array::new(vec![rows, p], data)?)
}

/// Reconstruction probabilities for `rows` images, using the posterior mean
/// and the most likely discrete code.
///
/// # Safety
/// `x` and `out` must each hold `rows * pixels` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncvae_model_reconstruct(
    model: *const NcvaeModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> NcvaeStatus {
    guard(|| {
        let m = &deref(model, "model")?.model;
        let (logits, _) = m.reconstruct_eval(&batch_arg(m, x, rows)?)?;
        let probs = logits.map(|v| 1.0 / (1.0 + (-v).exp()));
        write_out(out, probs.data(), "out")
    })
}

/// Posterior means of the continuous latent for `rows` images.
///
/// # Safety
/// `x` must hold `rows * pixels` doubles and `out` `rows * latent`.
#[no_mangle]
pub unsafe extern "C" fn ncvae_model_encode_mean(
    model: *const NcvaeModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> NcvaeStatus {
    guard(|| {
        let m = &deref(model, "model")?.model;
        let enc = m.encode(&batch_arg(m, x, rows)?)?;
        write_out(out, enc.mu.data(), "out")
    })
}

/// Deviation between the joint and the sequential exponentials of
/// generators `i` and `j` at coordinates `t` (length `latent`).
///
/// # Safety
/// `t` must hold `t_len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ncvae_model_bch_deviation(
    model: *const NcvaeModel,
    i: usize,
    j: usize,
    t: *const f64,
    t_len: usize,
    out: *mut f64,
) -> NcvaeStatus {
    guard(|| {
        let m = &deref(model, "model")?.model;
        let t = input_slice(t, t_len, "t")?;
        let bank = m.generator_bank()?;
        let v = diagnostics::bch_deviation(&bank, i, j, t)?;
        write_out(out, &[v], "out")
    })
}

/// Per-pair diagnostics on the first `samples` images of `ds`, written as
/// CSV to `out_path`.
///
/// # Safety
/// Handles must come from this library; `out_path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ncvae_model_diagnose(
    model: *const NcvaeModel,
    ds: *const NcvaeDataset,
    samples: usize,
    out_path: *const c_char,
) -> NcvaeStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let ds = &deref(ds, "dataset")?.0;
        let path = path_arg(out_path, "out_path")?;
        let selection = diagnostics::pairs(m.model.dims.d);
        let csv = ncvae::cli::diagnose(&m.state, m.model.params.clone(), ds, &selection, samples)?;
        std::fs::write(path, csv).map_err(Error::from)?;
        Ok(())
    })
}
