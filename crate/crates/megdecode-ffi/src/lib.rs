//! C ABI over trained brain modules and latent banks.
//!
//! Handles are opaque and owned by the caller: every `*_load` has a matching
//! `*_free`, and nothing else frees them. Functions return a status code and
//! write results through out-pointers; on any non-Ok status the thread-local
//! message behind [`meg_last_error`] describes the failure. The header in
//! `include/megdecode.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;
use std::slice;

use megdecode::brain::{count_params, load_checkpoint, BatchTensor, BrainModule};
use megdecode::datastore::{load_latent_bank, read_layout};
use megdecode::retrieval::{rank_candidates, RetrievalSet};
use megdecode::MegError;

/// Status of an FFI call. Mirrors the library error taxonomy, with
/// null-pointer and encoding failures reported before the library runs.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MegStatus {
    Ok = 0,
    NullPointer = 1,
    Utf8 = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Invalid = 6,
    NonFinite = 7,
    Runtime = 8,
}

/// Shape and size summary of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MegModelInfo {
    /// Input channels the model expects.
    pub channels: usize,
    /// Time samples per epoch.
    pub samples: usize,
    /// Subject slots; subject indices passed to predict must stay below this.
    pub subjects: usize,
    /// Latent dimension of the prediction head.
    pub output_dim: usize,
    pub param_count: u64,
}

/// A trained brain module bound to its sensor layout.
pub struct MegModel {
    module: BrainModule,
}

/// A latent bank prepared as a retrieval candidate set.
pub struct MegBank {
    set: RetrievalSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(cleaned).unwrap());
}

fn fail(err: &MegError) -> MegStatus {
    set_error(&err.to_string());
    match err {
        MegError::Io(_) => MegStatus::Io,
        MegError::Format(_) => MegStatus::Format,
        MegError::Shape(_) => MegStatus::Shape,
        MegError::Invalid(_) => MegStatus::Invalid,
        MegError::NonFinite(_) => MegStatus::NonFinite,
        MegError::Runtime(_) => MegStatus::Runtime,
    }
}

fn null_arg(name: &str) -> MegStatus {
    set_error(&format!("{name} is null"));
    MegStatus::NullPointer
}

/// Converts a C path argument, reporting null and encoding failures.
unsafe fn path_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a Path, MegStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(&format!("{name} is not valid UTF-8"));
            Err(MegStatus::Utf8)
        }
    }
}

/// Crate version as a static C string.
#[no_mangle]
pub extern "C" fn meg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn meg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint directory and the sensor layout it was trained with.
///
/// # Safety
/// `checkpoint_dir` and `layout_path` must be NUL-terminated strings and
/// `out` must be a valid pointer; the returned handle must be released with
/// [`meg_model_free`].
#[no_mangle]
pub unsafe extern "C" fn meg_model_load(
    checkpoint_dir: *const c_char,
    layout_path: *const c_char,
    out: *mut *mut MegModel,
) -> MegStatus {
    if out.is_null() {
        return null_arg("out");
    }
    *out = ptr::null_mut();
    let ckpt = match path_arg(checkpoint_dir, "checkpoint_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let layout_path = match path_arg(layout_path, "layout_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let (config, params) = match load_checkpoint(ckpt) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let layout = match read_layout(layout_path) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    match BrainModule::new(config, params, &layout) {
        Ok(module) => {
            *out = Box::into_raw(Box::new(MegModel { module }));
            MegStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Releases a model handle; a null pointer is a no-op.
///
/// # Safety
/// `model` must come from [`meg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn meg_model_free(model: *mut MegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fills `info` with the model's expected shapes and parameter count.
///
/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn meg_model_info(
    model: *const MegModel,
    info: *mut MegModelInfo,
) -> MegStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if info.is_null() {
        return null_arg("info");
    }
    let m = &(*model).module;
    let (_, total) = count_params(&m.params);
    *info = MegModelInfo {
        channels: m.config.c_in,
        samples: m.config.t,
        subjects: m.config.n_subjects,
        output_dim: m.config.f_out,
        param_count: total as u64,
    };
    MegStatus::Ok
}

/// Runs the prediction head on a batch of epochs.
///
/// `x` holds `n` epochs of `channels * samples` values each, channel-major;
/// `subjects` holds one subject index per epoch; `out` receives
/// `n * output_dim` values, one latent row per epoch.
///
/// # Safety
/// All pointers must be valid for the documented lengths; `out_len` must
/// equal `n * output_dim` (checked, reported as a shape error).
#[no_mangle]
pub unsafe extern "C" fn meg_model_predict(
    model: *const MegModel,
    x: *const f64,
    n: usize,
    subjects: *const u32,
    out: *mut f64,
    out_len: usize,
) -> MegStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if x.is_null() {
        return null_arg("x");
    }
    if subjects.is_null() {
        return null_arg("subjects");
    }
    if out.is_null() {
        return null_arg("out");
    }
    let m = &(*model).module;
    let (c, t, f_out) = (m.config.c_in, m.config.t, m.config.f_out);
    if n == 0 {
        set_error("empty batch");
        return MegStatus::Invalid;
    }
    if out_len != n * f_out {
        set_error(&format!("out_len {out_len} for {n} epochs of {f_out} latent values"));
        return MegStatus::Shape;
    }
    let data = slice::from_raw_parts(x, n * c * t).to_vec();
    let subjects: Vec<usize> =
        slice::from_raw_parts(subjects, n).iter().map(|&s| s as usize).collect();
    let batch = match BatchTensor::from_vec(n, c, t, data) {
        Ok(b) => b,
        Err(e) => return fail(&e),
    };
    let outputs = match m.forward_eval(&batch, &subjects) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    ptr::copy_nonoverlapping(outputs[0].data.as_ptr(), out, out_len);
    MegStatus::Ok
}

/// Loads a latent bank (`<path>.ids` sidecar required) as a candidate set.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; the
/// returned handle must be released with [`meg_bank_free`].
#[no_mangle]
pub unsafe extern "C" fn meg_bank_load(path: *const c_char, out: *mut *mut MegBank) -> MegStatus {
    if out.is_null() {
        return null_arg("out");
    }
    *out = ptr::null_mut();
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let bank = match load_latent_bank(path, "bank") {
        Ok(b) => b,
        Err(e) => return fail(&e),
    };
    let n = bank.len();
    let mut latents = megdecode::linalg::Mat::zeros(n, bank.dim);
    for i in 0..n {
        latents.row_mut(i).copy_from_slice(bank.row(i));
    }
    let set = match RetrievalSet::new(latents, bank.ids.clone(), vec![String::new(); n]) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    *out = Box::into_raw(Box::new(MegBank { set }));
    MegStatus::Ok
}

/// Releases a bank handle; a null pointer is a no-op.
///
/// # Safety
/// `bank` must come from [`meg_bank_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn meg_bank_free(bank: *mut MegBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Writes the candidate count and latent dimension of a bank.
///
/// # Safety
/// `bank` must be a live handle; `len` and `dim` may each be null to skip.
#[no_mangle]
pub unsafe extern "C" fn meg_bank_info(
    bank: *const MegBank,
    len: *mut usize,
    dim: *mut usize,
) -> MegStatus {
    if bank.is_null() {
        return null_arg("bank");
    }
    let set = &(*bank).set;
    if !len.is_null() {
        *len = set.image_ids.len();
    }
    if !dim.is_null() {
        *dim = set.latents.cols;
    }
    MegStatus::Ok
}

/// Ranks `true_id` among all candidates by cosine similarity to `query`.
/// Rank 1 means the true candidate scored highest.
///
/// # Safety
/// `query` must hold `dim` values matching the bank's latent dimension;
/// `true_id` must be a NUL-terminated string; `out_rank` must be valid.
#[no_mangle]
pub unsafe extern "C" fn meg_bank_rank(
    bank: *const MegBank,
    query: *const f64,
    dim: usize,
    true_id: *const c_char,
    out_rank: *mut usize,
) -> MegStatus {
    if bank.is_null() {
        return null_arg("bank");
    }
    if query.is_null() {
        return null_arg("query");
    }
    if out_rank.is_null() {
        return null_arg("out_rank");
    }
    if true_id.is_null() {
        return null_arg("true_id");
    }
    let id = match CStr::from_ptr(true_id).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("true_id is not valid UTF-8");
            return MegStatus::Utf8;
        }
    };
    let set = &(*bank).set;
    if dim != set.latents.cols {
        set_error(&format!("query has {dim} features, candidates have {}", set.latents.cols));
        return MegStatus::Shape;
    }
    let query = slice::from_raw_parts(query, dim);
    match rank_candidates(query, set, id) {
        Ok(r) => {
            *out_rank = r.rank;
            MegStatus::Ok
        }
        Err(e) => fail(&e),
    }
}
