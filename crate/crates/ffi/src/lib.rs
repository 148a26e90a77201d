//! C ABI for loading checkpoints and computing encodings.
//!
//! Every fallible call returns a [`SparoStatus`]; on failure the message is
//! available from [`sparo_last_error`] on the same thread. Output buffers
//! are caller-owned and must hold at least the stated number of floats.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sparo_core::harness::checkpoint::{load_checkpoint, resolve_checkpoint_dir};
use sparo_core::harness::Model;
use sparo_core::nn::InputBatch;
use sparo_core::objectives::clip_normalize;
use sparo_core::sparo::SlotLayout;
use sparo_core::tensor::Tensor;
use sparo_core::Error;

/// Status codes shared by every entry point.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparoStatus {
    SPARO_OK = 0,
    SPARO_ERR_NULL_POINTER = 1,
    SPARO_ERR_INVALID_ARGUMENT = 2,
    SPARO_ERR_IO = 3,
    SPARO_ERR_CHECKPOINT = 4,
    SPARO_ERR_CONTRACT = 5,
    SPARO_ERR_NUMERIC = 6,
    SPARO_ERR_BUFFER_TOO_SMALL = 7,
    SPARO_ERR_UNSUPPORTED = 8,
    SPARO_ERR_PANIC = 9,
}

use SparoStatus::*;

/// Opaque handle to a loaded model.
pub struct SparoModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn fail(status: SparoStatus, msg: impl Into<String>) -> SparoStatus {
    set_error(msg);
    status
}

fn from_core(e: Error) -> SparoStatus {
    let status = match &e {
        Error::Io(_) => SPARO_ERR_IO,
        Error::Json(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointConsistency(_)
        | Error::CheckpointTruncated { .. } => SPARO_ERR_CHECKPOINT,
        Error::Numeric(_) => SPARO_ERR_NUMERIC,
        Error::Config(_) | Error::Usage(_) => SPARO_ERR_INVALID_ARGUMENT,
        Error::Contract(_) | Error::Dimension { .. } => SPARO_ERR_CONTRACT,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SparoStatus) -> SparoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == SPARO_OK {
                set_error("");
            }
            s
        }
        Err(_) => fail(SPARO_ERR_PANIC, "internal panic"),
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sparo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint directory (or a run directory holding `final/`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sparo_model_load(dir: *const c_char, out: *mut *mut SparoModel) -> SparoStatus {
    guard(|| {
        if dir.is_null() || out.is_null() {
            return fail(SPARO_ERR_NULL_POINTER, "sparo_model_load: null argument");
        }
        *out = std::ptr::null_mut();
        let Ok(path) = CStr::from_ptr(dir).to_str() else {
            return fail(SPARO_ERR_INVALID_ARGUMENT, "sparo_model_load: path is not UTF-8");
        };
        match load_checkpoint::<f32>(&resolve_checkpoint_dir(Path::new(path))) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(SparoModel { model: ck.model }));
                SPARO_OK
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`sparo_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sparo_model_free(model: *mut SparoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of one encoding.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sparo_model_encoding_dim(model: *const SparoModel, out: *mut usize) -> SparoStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return fail(SPARO_ERR_NULL_POINTER, "sparo_model_encoding_dim: null argument");
        };
        *out = m.model.image_encoder().0.encoding_dim();
        SPARO_OK
    })
}

/// Slot count and slot dimension of the encoding.
///
/// # Safety
/// `model` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sparo_model_slot_layout(
    model: *const SparoModel,
    slots: *mut usize,
    slot_dim: *mut usize,
) -> SparoStatus {
    guard(|| {
        let (Some(m), false, false) = (model.as_ref(), slots.is_null(), slot_dim.is_null()) else {
            return fail(SPARO_ERR_NULL_POINTER, "sparo_model_slot_layout: null argument");
        };
        let l = m.model.image_encoder().0.layout();
        *slots = l.slots;
        *slot_dim = l.slot_dim;
        SPARO_OK
    })
}

unsafe fn write_encoding(m: &SparoModel, batch: InputBatch<f32>, text: bool, out: *mut f32, out_len: usize) -> SparoStatus {
    let (enc, store) = if text {
        match m.model.text_encoder() {
            Some(e) => e,
            None => return fail(SPARO_ERR_UNSUPPORTED, "model has no text tower"),
        }
    } else {
        m.model.image_encoder()
    };
    let dim = enc.encoding_dim();
    if out_len < dim {
        return fail(
            SPARO_ERR_BUFFER_TOO_SMALL,
            format!("output holds {out_len} floats, encoding needs {dim}"),
        );
    }
    let b = batch.clone();
    match m.model.encode(enc, store, 1, &move |_| b.clone()) {
        Ok(rows) => {
            let dst = std::slice::from_raw_parts_mut(out, dim);
            for (d, &v) in dst.iter_mut().zip(&rows[0]) {
                *d = v as f32;
            }
            SPARO_OK
        }
        Err(e) => from_core(e),
    }
}

/// Encodes one continuous sequence `seq: [len, dim]` (row-major) with the
/// image tower. Contrastive models return slot-normalized encodings,
/// self-distillation models the raw encoding.
///
/// # Safety
/// `seq` must hold `len * dim` floats and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sparo_encode_image(
    model: *const SparoModel,
    seq: *const f32,
    len: usize,
    dim: usize,
    out: *mut f32,
    out_len: usize,
) -> SparoStatus {
    guard(|| {
        let (Some(m), false, false) = (model.as_ref(), seq.is_null(), out.is_null()) else {
            return fail(SPARO_ERR_NULL_POINTER, "sparo_encode_image: null argument");
        };
        if len == 0 || dim == 0 {
            return fail(SPARO_ERR_INVALID_ARGUMENT, "sparo_encode_image: empty sequence");
        }
        let data = std::slice::from_raw_parts(seq, len * dim).to_vec();
        let t = match Tensor::new(vec![len, dim], data) {
            Ok(t) => t,
            Err(e) => return from_core(e),
        };
        write_encoding(m, InputBatch::Continuous { seqs: vec![t] }, false, out, out_len)
    })
}

/// Encodes one token sequence with the text tower; its last token is the
/// EOS position.
///
/// # Safety
/// `ids` must hold `len` values and `out` at least `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sparo_encode_text(
    model: *const SparoModel,
    ids: *const u32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> SparoStatus {
    guard(|| {
        let (Some(m), false, false) = (model.as_ref(), ids.is_null(), out.is_null()) else {
            return fail(SPARO_ERR_NULL_POINTER, "sparo_encode_text: null argument");
        };
        if len == 0 {
            return fail(SPARO_ERR_INVALID_ARGUMENT, "sparo_encode_text: empty sequence");
        }
        let ids: Vec<usize> = std::slice::from_raw_parts(ids, len).iter().map(|&i| i as usize).collect();
        let batch = InputBatch::Tokens {
            ids: vec![ids],
            eos: vec![len - 1],
        };
        write_encoding(m, batch, true, out, out_len)
    })
}

/// Per-slot unit normalization followed by `1/sqrt(slots)` scaling of
/// `y: [slots * slot_dim]`; `out` may alias `y`.
///
/// # Safety
/// `y` and `out` must hold `slots * slot_dim` floats.
#[no_mangle]
pub unsafe extern "C" fn sparo_clip_normalize(y: *const f32, slots: usize, slot_dim: usize, out: *mut f32) -> SparoStatus {
    guard(|| {
        if y.is_null() || out.is_null() {
            return fail(SPARO_ERR_NULL_POINTER, "sparo_clip_normalize: null argument");
        }
        if slots == 0 || slot_dim == 0 {
            return fail(SPARO_ERR_INVALID_ARGUMENT, "sparo_clip_normalize: empty layout");
        }
        let n = slots * slot_dim;
        let src = std::slice::from_raw_parts(y, n).to_vec();
        match clip_normalize(&src, SlotLayout::new(slots, slot_dim), true) {
            Ok(v) => {
                std::slice::from_raw_parts_mut(out, n).copy_from_slice(&v);
                SPARO_OK
            }
            Err(e) => from_core(e),
        }
    })
}
