use std::ffi::{CStr, CString};
use std::ptr;

use refquery::cli::{gen_synthetic, train};
use refquery::config::RunConfig;
use refquery::data::list_clips;
use refquery::selfcheck::{tiny_model_config, tiny_spec};
use refquery_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rq_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn header_declares_every_entry_point() {
    let header = include_str!("../include/refquery.h");
    for f in [
        "rq_last_error", "rq_hungarian", "rq_region_similarity", "rq_contour_accuracy",
        "rq_clip_load", "rq_clip_info", "rq_clip_free", "rq_model_load", "rq_model_segment",
        "rq_model_free", "RQ_STATUS_BUFFER_TOO_SMALL", "typedef struct RqModel RqModel",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}

#[test]
fn hungarian_solves_a_small_problem() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let mut perm = [0usize; 3];
    let mut total = 0.0;
    let st = unsafe { rq_hungarian(cost.as_ptr(), 3, perm.as_mut_ptr(), &mut total) };
    assert_eq!(st, RqStatus::Ok);
    assert_eq!(perm, [1, 0, 2]);
    assert_eq!(total, 5.0);
}

#[test]
fn null_arguments_are_reported() {
    let st = unsafe { rq_hungarian(ptr::null(), 2, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, RqStatus::NullArgument);
    assert!(last_error().contains("null"));
    let st = unsafe { rq_clip_load(ptr::null(), ptr::null_mut()) };
    assert_eq!(st, RqStatus::NullArgument);
}

#[test]
fn non_finite_cost_is_a_validation_error() {
    let cost = [f64::NAN, 1.0, 1.0, 0.0];
    let mut perm = [0usize; 2];
    let st = unsafe { rq_hungarian(cost.as_ptr(), 2, perm.as_mut_ptr(), ptr::null_mut()) };
    assert_ne!(st, RqStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn metrics_match_hand_values() {
    // 2×2 masks overlapping in one of three covered pixels.
    let pred = [1u8, 1, 0, 0];
    let gt = [1u8, 0, 1, 0];
    let mut j = 0.0;
    assert_eq!(unsafe { rq_region_similarity(pred.as_ptr(), gt.as_ptr(), 2, 2, &mut j) }, RqStatus::Ok);
    assert!((j - 1.0 / 3.0).abs() < 1e-12);
    let mut f = 0.0;
    let st = unsafe { rq_contour_accuracy(pred.as_ptr(), pred.as_ptr(), 2, 2, 0.0, &mut f) };
    assert_eq!(st, RqStatus::Ok);
    assert_eq!(f, 1.0);
}

#[test]
fn missing_clip_is_a_load_error() {
    let path = CString::new("/nonexistent/clip/manifest.json").unwrap();
    let mut clip = ptr::null_mut();
    let st = unsafe { rq_clip_load(path.as_ptr(), &mut clip) };
    assert!(matches!(st, RqStatus::Load | RqStatus::Io), "{st:?}");
    assert!(clip.is_null());
    assert!(last_error().contains("nonexistent"));
}

#[test]
fn segmenting_through_handles_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        model: tiny_model_config(),
        ..RunConfig::default()
    };
    cfg.train.iterations = 2;
    cfg.synthetic.clips = 1;
    cfg.synthetic.spec = tiny_spec(3);
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_synthetic(&cfg, &data).unwrap();
    let outcome = train(&cfg, &data, &run, None, |_, _| {}).unwrap();
    let manifest = list_clips(&data).unwrap().remove(0);

    unsafe {
        let mut clip = ptr::null_mut();
        assert_eq!(rq_clip_load(cstr(&manifest).as_ptr(), &mut clip), RqStatus::Ok);
        let (mut t, mut h, mut w) = (0, 0, 0);
        assert_eq!(rq_clip_info(clip, &mut t, &mut h, &mut w), RqStatus::Ok);
        assert_eq!(t, cfg.synthetic.spec.frames);

        let mut model = ptr::null_mut();
        let ckpt = cstr(&outcome.checkpoint);
        assert_eq!(rq_model_load(ptr::null(), ckpt.as_ptr(), &mut model), RqStatus::Ok, "{}", last_error());

        let mut small = vec![0u8; t * h * w - 1];
        let st = rq_model_segment(model, clip, small.as_mut_ptr(), small.len());
        assert_eq!(st, RqStatus::BufferTooSmall);

        let mut buf = vec![7u8; t * h * w];
        assert_eq!(rq_model_segment(model, clip, buf.as_mut_ptr(), buf.len()), RqStatus::Ok);
        let lib = refquery::cli::load_model(&cfg, &outcome.checkpoint).unwrap();
        let expected = lib.segment(&refquery::data::load_clip(&manifest).unwrap(), cfg.eval.threshold).unwrap();
        let flat: Vec<u8> = expected.iter().flat_map(|m| m.bits().iter().map(|&b| b as u8)).collect();
        assert_eq!(buf, flat);

        rq_model_free(model);
        rq_clip_free(clip);
        rq_clip_free(ptr::null_mut());
    }
}
