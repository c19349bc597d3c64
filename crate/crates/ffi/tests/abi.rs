use std::ffi::{CStr, CString};
use std::ptr;

use mblip::model::VisionLanguageModel;
use mblip::toy::toy_model_config;
use mblip_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mblip_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn load_generate_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = VisionLanguageModel::new(toy_model_config()).unwrap();
    mblip::checkpoint::save(&path, &model, "init").unwrap();

    let mut handle = ptr::null_mut();
    let p = c(path.to_str().unwrap());
    assert_eq!(unsafe { mblip_model_load(p.as_ptr(), &mut handle) }, MblipStatus::Ok);
    let prompt = c("Caption in English:");
    let id = c("scene_red_circle_left_0");
    let ids = [id.as_ptr()];
    let mut out = ptr::null_mut();
    let status = unsafe {
        mblip_generate(
            handle,
            prompt.as_ptr(),
            ids.as_ptr(),
            1,
            ptr::null(),
            2,
            1.0,
            4,
            &mut out,
        )
    };
    assert_eq!(status, MblipStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_string_lossy().chars().count();
    assert!(text <= 4);
    unsafe {
        mblip_string_free(out);
        mblip_model_free(handle);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut handle = ptr::null_mut();
    let missing = c("/nonexistent/model.ckpt");
    assert_eq!(
        unsafe { mblip_model_load(missing.as_ptr(), &mut handle) },
        MblipStatus::Io
    );
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    assert_eq!(
        unsafe { mblip_model_load(ptr::null(), &mut handle) },
        MblipStatus::NullPointer
    );
    let mut score = 0.0;
    let bad = c("{not json");
    let en = c("en");
    assert_eq!(
        unsafe { mblip_cider(bad.as_ptr(), bad.as_ptr(), en.as_ptr(), &mut score) },
        MblipStatus::InvalidInput
    );
}

#[test]
fn metrics_through_the_abi() {
    let cands = c(r#"{"a": "a red dog sits on grass", "b": "two blue cats near water"}"#);
    let refs = c(r#"{"a": ["a red dog sits on grass"], "b": ["two blue cats near water"]}"#);
    let en = c("en");
    let mut score = 0.0;
    assert_eq!(
        unsafe { mblip_cider(cands.as_ptr(), refs.as_ptr(), en.as_ptr(), &mut score) },
        MblipStatus::Ok
    );
    assert!((score - 10.0).abs() < 1e-12);

    let mut hit = false;
    let gold = c(r#"["in the kitchen"]"#);
    let pred = c("kitchen");
    assert_eq!(
        unsafe { mblip_exact_match(pred.as_ptr(), gold.as_ptr(), false, &mut hit) },
        MblipStatus::Ok
    );
    assert!(!hit);
    let pred = c("In the kitchen.");
    unsafe { mblip_exact_match(pred.as_ptr(), gold.as_ptr(), false, &mut hit) };
    assert!(hit);
    unsafe { mblip_exact_match(pred.as_ptr(), gold.as_ptr(), true, &mut hit) };
    assert!(!hit);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(dir.join("mblip.h")).unwrap();
    for f in [
        "mblip_model_load",
        "mblip_model_free",
        "mblip_generate",
        "mblip_cider",
        "mblip_exact_match",
        "mblip_string_free",
        "mblip_last_error",
        "MBLIP_STATUS_OK",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let probe = tempfile::tempdir().unwrap();
    let src = probe.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"mblip.h\"\nint main(void) { return mblip_last_error() != 0; }\n",
    )
    .unwrap();
    if let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(&dir)
        .arg(&src)
        .status()
    {
        assert!(status.success());
    }
}
