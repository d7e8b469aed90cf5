//! C ABI for the kanformer crate.
//!
//! Exposes checkpoint loading, utterance scoring, and EER computation
//! behind opaque handles with integer status codes, so other languages can
//! bind the detector without touching Rust types. The generated header
//! lands in `include/kanformer.h` at build time.
//!
//! Conventions:
//! - every fallible call returns [`KfStatus`]; on failure a thread-local
//!   message is available via [`kf_last_error_message`];
//! - a `KfModel` handle is not thread-safe; share handles across threads
//!   only behind external synchronization.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use kanformer::config::ExperimentConfig;
use kanformer::data::{crop_or_pad, Label};
use kanformer::metrics::{compute_eer, ScoreSet};
use kanformer::model::{build_model, KanformerModel, Mode};
use kanformer::params::ParamStore;
use kanformer::tape::Tape;
use kanformer::train::load_checkpoint;
use kanformer::Tensor;

/// Status codes. Zero is success; negative values are errors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KfStatus {
    Ok = 0,
    NullArgument = -1,
    InvalidArgument = -2,
    Io = -3,
    Format = -4,
    Incompatible = -5,
    Internal = -6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_for(err: &kanformer::Error) -> KfStatus {
    use kanformer::Error as E;
    match err {
        E::Io(_) => KfStatus::Io,
        E::Format { .. } | E::Parse { .. } | E::Json(_) => KfStatus::Format,
        E::Incompatible(_) => KfStatus::Incompatible,
        E::Config(_) | E::Input(_) | E::Dim(_) | E::Domain(_) => KfStatus::InvalidArgument,
        _ => KfStatus::Internal,
    }
}

/// Message for the most recent error on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(ptr::null())
    })
}

/// Loaded model plus its parameters and the configured frame count.
pub struct KfModel {
    model: KanformerModel,
    store: ParamStore,
    t_fix: usize,
}

unsafe fn cstr_to_path<'a>(p: *const c_char) -> Result<&'a Path, KfStatus> {
    if p.is_null() {
        set_error("null path argument");
        return Err(KfStatus::NullArgument);
    }
    match unsafe { CStr::from_ptr(p) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(KfStatus::InvalidArgument)
        }
    }
}

/// Build the model described by an experiment config (JSON) and restore
/// the checkpoint into it. Returns null on failure; check
/// [`kf_last_error_message`].
///
/// # Safety
/// `config_path` and `checkpoint_path` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn kf_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
) -> *mut KfModel {
    let (config_path, checkpoint_path) =
        match (unsafe { cstr_to_path(config_path) }, unsafe { cstr_to_path(checkpoint_path) }) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return ptr::null_mut(),
        };
    let build = || -> kanformer::Result<KfModel> {
        let cfg = ExperimentConfig::from_path(config_path)?;
        let (model, mut store) = build_model(&cfg.model, cfg.seed)?;
        load_checkpoint(checkpoint_path, &mut store, &cfg.model.hash())?;
        Ok(KfModel {
            model,
            store,
            t_fix: cfg.data.t_fix,
        })
    };
    match build() {
        Ok(m) => Box::into_raw(Box::new(m)),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Release a model handle. Null is accepted and ignored.
///
/// # Safety
/// `model` must have come from [`kf_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kf_model_free(model: *mut KfModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Feature width the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle from [`kf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn kf_model_feature_dim(model: *const KfModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.model.config.feature_dim as u32
}

/// Score one utterance. `features` is a row-major `n_frames x feature_dim`
/// matrix; the sequence is standardized to the configured frame count
/// (head-crop / repeat-tile) before scoring. Higher score = more bonafide.
///
/// # Safety
/// `model` must be a live handle; `features` must point to
/// `n_frames * feature_dim` floats; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kf_model_score(
    model: *mut KfModel,
    features: *const f32,
    n_frames: u64,
    feature_dim: u64,
    out_score: *mut f64,
) -> KfStatus {
    if model.is_null() || features.is_null() || out_score.is_null() {
        set_error("null argument");
        return KfStatus::NullArgument;
    }
    let handle = unsafe { &mut *model };
    let (t, d) = (n_frames as usize, feature_dim as usize);
    if t == 0 || d != handle.model.config.feature_dim {
        set_error(&format!(
            "expected a non-empty matrix with {} columns, got {t} x {d}",
            handle.model.config.feature_dim
        ));
        return KfStatus::InvalidArgument;
    }
    let raw = unsafe { std::slice::from_raw_parts(features, t * d) };
    let mut run = || -> kanformer::Result<f64> {
        let matrix = Tensor::new(vec![t, d], raw.iter().map(|&v| v as f64).collect())?;
        let fixed = crop_or_pad(&matrix, handle.t_fix)?;
        let mut tape = Tape::new();
        let x = tape.leaf(fixed.into_reshaped(&[1, handle.t_fix, d])?);
        let (_, scores) = handle
            .model
            .classify(&mut handle.store, &mut tape, x, &mut Mode::Eval)?;
        Ok(scores[0])
    };
    match run() {
        Ok(s) => {
            unsafe { *out_score = s };
            KfStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_for(&e)
        }
    }
}

/// Equal error rate of a bonafide/spoof score partition (higher score =
/// more bonafide). Writes the interpolated rate and crossing threshold.
///
/// # Safety
/// `bonafide` and `spoof` must point to `n_bonafide` / `n_spoof` doubles;
/// output pointers must be writable (either may be null to skip).
#[no_mangle]
pub unsafe extern "C" fn kf_eer(
    bonafide: *const f64,
    n_bonafide: u64,
    spoof: *const f64,
    n_spoof: u64,
    out_eer: *mut f64,
    out_threshold: *mut f64,
) -> KfStatus {
    if bonafide.is_null() || spoof.is_null() {
        set_error("null score array");
        return KfStatus::NullArgument;
    }
    let bona = unsafe { std::slice::from_raw_parts(bonafide, n_bonafide as usize) };
    let spoof = unsafe { std::slice::from_raw_parts(spoof, n_spoof as usize) };
    let mut set = ScoreSet::default();
    for (i, &s) in bona.iter().enumerate() {
        set.push(&format!("b{i}"), s, Label::Bonafide);
    }
    for (i, &s) in spoof.iter().enumerate() {
        set.push(&format!("s{i}"), s, Label::Spoof);
    }
    match compute_eer(&set) {
        Ok((eer, thr)) => {
            if !out_eer.is_null() {
                unsafe { *out_eer = eer };
            }
            if !out_threshold.is_null() {
                unsafe { *out_threshold = thr };
            }
            KfStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_for(&e)
        }
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn kf_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}
