//! C ABI over the mblip library.
//!
//! Every fallible function returns an [`MblipStatus`]; on failure the message
//! is available from [`mblip_last_error`] on the same thread. Strings handed
//! out by this library must be released with [`mblip_string_free`], models
//! with [`mblip_model_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mblip::eval::{cider, exact_match, DefaultSegmenter, Normalization};
use mblip::generation::{decode, DecodeRequest, GenConfig};
use mblip::model::{DirImageSource, ImageSource, SyntheticImageSource, VisionLanguageModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MblipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Io = 4,
    Checkpoint = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct MblipModel {
    model: VisionLanguageModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MblipStatus, String);

impl From<mblip::Error> for Failure {
    fn from(e: mblip::Error) -> Self {
        let status = match &e {
            mblip::Error::Io { .. } => MblipStatus::Io,
            mblip::Error::Checkpoint(_) => MblipStatus::Checkpoint,
            _ => MblipStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MblipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MblipStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MblipStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MblipStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MblipStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| Failure(MblipStatus::InvalidInput, format!("{what}: {e}")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(MblipStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mblip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mblip_model_load(path: *const c_char, out: *mut *mut MblipModel) -> MblipStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = text(path, "path")?;
        let (model, _) = mblip::checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(MblipModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mblip_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mblip_model_free(model: *mut MblipModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Beam-search decodes one answer. `image_dir` may be null to render
/// synthetic scenes from the ids. The result goes to `out_text`.
///
/// # Safety
/// All string arguments must be NUL-terminated; `image_ids` must point to
/// `n_images` strings.
#[no_mangle]
pub unsafe extern "C" fn mblip_generate(
    model: *const MblipModel,
    prompt: *const c_char,
    image_ids: *const *const c_char,
    n_images: usize,
    image_dir: *const c_char,
    beam_width: usize,
    length_penalty: f64,
    max_len: usize,
    out_text: *mut *mut c_char,
) -> MblipStatus {
    guard(|| {
        out_ptr(out_text, "out_text")?;
        let model = model
            .as_ref()
            .ok_or_else(|| Failure(MblipStatus::NullPointer, "model is null".into()))?;
        if image_ids.is_null() {
            return Err(Failure(MblipStatus::NullPointer, "image_ids is null".into()));
        }
        let ids = (0..n_images)
            .map(|i| text(*image_ids.add(i), "image id").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let size = model.model.config().image_size;
        let images: Box<dyn ImageSource> = if image_dir.is_null() {
            Box::new(SyntheticImageSource::new(size))
        } else {
            Box::new(DirImageSource::new(text(image_dir, "image_dir")?, size))
        };
        let req = DecodeRequest {
            example_id: String::new(),
            prompt: text(prompt, "prompt")?.to_string(),
            language: String::new(),
            image_ids: ids,
            gen_config: GenConfig {
                beam_width,
                length_penalty,
                max_len,
                ..GenConfig::default()
            },
        };
        let resp = decode(&model.model, images.as_ref(), &req)?;
        let c =
            CString::new(resp.text.replace('\0', "")).map_err(|e| Failure(MblipStatus::InvalidInput, e.to_string()))?;
        *out_text = c.into_raw();
        Ok(())
    })
}

/// Corpus CIDEr. `candidates_json` maps image id to caption,
/// `references_json` maps image id to a list of captions.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mblip_cider(
    candidates_json: *const c_char,
    references_json: *const c_char,
    language: *const c_char,
    out_score: *mut f64,
) -> MblipStatus {
    guard(|| {
        out_ptr(out_score, "out_score")?;
        let cands: BTreeMap<String, String> = json(text(candidates_json, "candidates")?, "candidates")?;
        let refs: BTreeMap<String, Vec<String>> = json(text(references_json, "references")?, "references")?;
        let lang = text(language, "language")?;
        *out_score = cider(&cands, &refs, &DefaultSegmenter, lang)?.mean;
        Ok(())
    })
}

/// Writes 1 to `out_match` if `prediction` matches any entry of the JSON
/// string array `gold_json`. `strict` disables normalization.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_match` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mblip_exact_match(
    prediction: *const c_char,
    gold_json: *const c_char,
    strict: bool,
    out_match: *mut bool,
) -> MblipStatus {
    guard(|| {
        out_ptr(out_match, "out_match")?;
        let gold: Vec<String> = json(text(gold_json, "gold")?, "gold")?;
        let mode = if strict {
            Normalization::Strict
        } else {
            Normalization::Minimal
        };
        *out_match = exact_match(text(prediction, "prediction")?, &gold, mode);
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mblip_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
