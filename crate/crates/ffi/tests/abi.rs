use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use deformsynth_ffi::*;

fn last_error() -> String {
    let p = ds_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    ds_string_free(s);
    out
}

#[test]
fn parameters_round_trip_as_json() {
    let (c, d) = (CString::new("fb").unwrap(), CString::new("hard").unwrap());
    let mut out = ptr::null_mut();
    let st = unsafe { ds_generate_parameters(c.as_ptr(), d.as_ptr(), 4, 9, &mut out) };
    assert_eq!(st, DsStatus::Ok);
    let json = unsafe { take(out) };
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
}

#[test]
fn unknown_condition_sets_status_and_message() {
    let (c, d) = (CString::new("xx").unwrap(), CString::new("easy").unwrap());
    let mut out = ptr::null_mut();
    let st = unsafe { ds_generate_parameters(c.as_ptr(), d.as_ptr(), 1, 0, &mut out) };
    assert_eq!(st, DsStatus::UnknownCondition);
    assert!(out.is_null());
    assert!(last_error().contains("xx"));
    let st = unsafe { ds_generate_parameters(ptr::null(), d.as_ptr(), 1, 0, &mut out) };
    assert_eq!(st, DsStatus::NullPointer);
}

#[test]
fn stopping_check_over_the_boundary() {
    let (mut stop, mut best) = (-1, 99usize);
    let flat = [0.5f64; 11];
    assert_eq!(
        unsafe { ds_stopping_check(flat.as_ptr(), 11, 3, 8, 0.02, &mut stop, &mut best) },
        DsStatus::Ok
    );
    assert_eq!((stop, best), (1, 0));
    assert_eq!(
        unsafe { ds_stopping_check(flat.as_ptr(), 10, 3, 8, 0.02, &mut stop, &mut best) },
        DsStatus::Ok
    );
    assert_eq!(stop, 0);
    assert_eq!(
        unsafe { ds_stopping_check(flat.as_ptr(), 11, 0, 8, 0.02, &mut stop, &mut best) },
        DsStatus::InvalidArgument
    );
}

#[test]
fn evaluate_hand_case() {
    let dets = CString::new(
        r#"[{"image_id":"a","class_id":0,"box":[0,0,10,10],"score":0.9},
            {"image_id":"a","class_id":0,"box":[50,50,60,60],"score":0.8}]"#,
    )
    .unwrap();
    let dets_fp_first = CString::new(
        r#"[{"image_id":"a","class_id":0,"box":[50,50,60,60],"score":0.9},
            {"image_id":"a","class_id":0,"box":[0,0,10,10],"score":0.8}]"#,
    )
    .unwrap();
    let gts = CString::new(r#"[{"image_id":"a","class_id":0,"box":[0,0,10,10]}]"#).unwrap();
    let map = |d: &CString| {
        let mut out = ptr::null_mut();
        assert_eq!(
            unsafe { ds_evaluate(d.as_ptr(), gts.as_ptr(), 0.5, 0.1, &mut out) },
            DsStatus::Ok
        );
        let v: serde_json::Value = serde_json::from_str(&unsafe { take(out) }).unwrap();
        v["map"].as_f64().unwrap()
    };
    assert_eq!(map(&dets), 1.0);
    assert_eq!(map(&dets_fp_first), 0.5);
    let empty = CString::new("[]").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { ds_evaluate(dets.as_ptr(), empty.as_ptr(), 0.5, 0.5, &mut out) },
        DsStatus::EmptyEvaluation
    );
}

#[test]
fn procedural_render_through_handles() {
    let mut assets = ptr::null_mut();
    assert_eq!(
        unsafe { ds_assets_procedural(2, 1, 1, 160, 120, 5, &mut assets) },
        DsStatus::Ok
    );
    assert_eq!(unsafe { ds_assets_object_count(assets) }, 2);

    let (c, d) = (CString::new("sc").unwrap(), CString::new("easy").unwrap());
    let mut params = ptr::null_mut();
    assert_eq!(
        unsafe { ds_generate_parameters(c.as_ptr(), d.as_ptr(), 1, 3, &mut params) },
        DsStatus::Ok
    );
    let arr: serde_json::Value = serde_json::from_str(&unsafe { take(params) }).unwrap();
    let theta = CString::new(arr[0].to_string()).unwrap();

    let mut sample = ptr::null_mut();
    assert_eq!(
        unsafe { ds_render_sample(assets, theta.as_ptr(), 1, 77, &mut sample) },
        DsStatus::Ok
    );
    let (w, h) = unsafe { (ds_sample_width(sample), ds_sample_height(sample)) };
    assert_eq!((w, h), (160, 120));
    let px = unsafe { std::slice::from_raw_parts(ds_sample_pixels(sample), w * h * 3) };
    assert!(px.iter().any(|&v| v != px[0]));
    let mut b = [0f64; 4];
    assert_eq!(unsafe { ds_sample_bbox(sample, b.as_mut_ptr()) }, DsStatus::Ok);
    assert!(b[0] >= 0.0 && b[0] < b[2] && b[2] <= w as f64 && b[1] < b[3] && b[3] <= h as f64);
    let mut audit = ptr::null_mut();
    assert_eq!(unsafe { ds_sample_audit(sample, &mut audit) }, DsStatus::Ok);
    assert!(unsafe { take(audit) }.contains("ruling_count"));

    let mut missing = ptr::null_mut();
    assert_eq!(
        unsafe { ds_render_sample(assets, theta.as_ptr(), 9, 1, &mut missing) },
        DsStatus::AssetMissing
    );
    unsafe {
        ds_sample_free(sample);
        ds_assets_free(assets);
        ds_assets_free(ptr::null_mut());
    }
}

#[test]
fn missing_asset_folder_reports_asset_missing() {
    let dir = tempfile::tempdir().unwrap();
    let t = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut assets = ptr::null_mut();
    let st = unsafe { ds_assets_load(t.as_ptr(), t.as_ptr(), ptr::null(), 64, 48, &mut assets) };
    assert_eq!(st, DsStatus::AssetMissing);
    assert!(assets.is_null());
}

#[test]
fn active_learn_from_config_with_mock() {
    let dir = tempfile::tempdir().unwrap();
    let reg = deformsynth::procedural::ProceduralAssets {
        objects: 1,
        backgrounds: 1,
        occluders: 0,
        image_size: (96, 72),
        texture_size: (21, 30),
    };
    reg.write(&dir.path().join("assets"), 1).unwrap();
    std::fs::write(dir.path().join("script.json"), r#"{"default_map":1.0}"#).unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"assets":{"root":"assets"},"out":"run","detector":"mock:script.json",
            "render":{"image_size":[96,72]},
            "active_learning":{"conditions":["li"],"difficulties":["easy"],"m":1,"n":1}}"#,
    )
    .unwrap();
    let cfg = CString::new(dir.path().join("run.json").to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { ds_active_learn(cfg.as_ptr(), 0, &mut out) },
        DsStatus::Ok,
        "{}",
        last_error()
    );
    let v: serde_json::Value = serde_json::from_str(&unsafe { take(out) }).unwrap();
    assert_eq!(v["increments"], 11);
    assert_eq!(v["final_model"]["model_id"], "li-easy-k001");
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/deformsynth.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "ds_last_error",
        "ds_stopping_check",
        "ds_render_sample",
        "DS_STATUS_NULL_POINTER",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"deformsynth.h\"\nint main(void) { DsStatus s = DS_STATUS_OK; DsAssets *a = 0; \
         ds_assets_free(a); return (int)s; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .expect("a C compiler is required for the header check");
    assert!(status.success());
}
