use std::ffi::CString;
use std::path::Path;
use std::process::Command;
use std::ptr;

use csc_core::checkpoint;
use csc_core::model::ModelConfig;
use csc_core::train::{TrainConfig, Trainer};
use csc_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { csc_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn scalar_functions() {
    let est = [1.0, 2.0, -1.0, 0.5];
    let mut out = 0.0;
    assert_eq!(unsafe { csc_si_snr(est.as_ptr(), est.as_ptr(), 4, &mut out) }, CscStatus::Ok);
    assert_eq!(out, 60.0);

    let (e, z) = ([0.0, 1.0], [1.0, 0.0]);
    assert_eq!(unsafe { csc_score_trial(e.as_ptr(), z.as_ptr(), 2, &mut out) }, CscStatus::Ok);
    assert_eq!(out, -2.0);

    let scores = [3.0, 2.0, 1.0, 0.0, -1.0];
    let labels = [1u8, 1, 0, 1, 0];
    let (mut eer, mut auc) = (0.0, 0.0);
    assert_eq!(unsafe { csc_eer_auc(scores.as_ptr(), labels.as_ptr(), 5, &mut eer, &mut auc) }, CscStatus::Ok);
    assert!((auc - 5.0 / 6.0).abs() < 1e-12);
    assert!((eer - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn errors_are_reported_not_raised() {
    let mut out = 0.0;
    assert_eq!(unsafe { csc_si_snr(ptr::null(), ptr::null(), 3, &mut out) }, CscStatus::NullPointer);
    assert!(last_error().contains("null"));
    let zeros = [0.0; 4];
    assert_eq!(unsafe { csc_si_snr(zeros.as_ptr(), zeros.as_ptr(), 4, &mut out) }, CscStatus::Numeric);
    let labels = [1u8, 1];
    let (mut e, mut a) = (0.0, 0.0);
    assert_eq!(unsafe { csc_eer_auc(zeros.as_ptr(), labels.as_ptr(), 2, &mut e, &mut a) }, CscStatus::InvalidArgument);
    assert!(last_error().contains("single-class"));
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    assert_eq!(unsafe { csc_model_load(missing.as_ptr(), &mut h) }, CscStatus::Checkpoint);
    assert!(h.is_null());
    assert_eq!(unsafe { csc_model_sources(ptr::null()) }, 0);
    unsafe { csc_model_free(ptr::null_mut()) };
}

#[test]
fn claims_suite_and_negative_control() {
    assert_eq!(csc_verify_claims(0.0), CscStatus::Ok);
    assert_eq!(csc_verify_claims(1e-3), CscStatus::CheckFailed);
    assert!(last_error().contains("claim4_identity"));
}

#[test]
fn model_round_trip_through_handle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::default();
    cfg.encoder.feature_dim = 8;
    let t = Trainer::new(&cfg, &TrainConfig::default(), 3).unwrap();
    checkpoint::save(&t, dir.path()).unwrap();

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { csc_model_load(path.as_ptr(), &mut h) }, CscStatus::Ok);
    let (c, d) = unsafe { (csc_model_sources(h), csc_model_embedding_dim(h)) };
    assert_eq!((c, d), (2, 8));

    let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.31).cos()).collect();
    let mut est = vec![f64::NAN; c * x.len()];
    let mut emb = vec![f64::NAN; c * d];
    assert_eq!(unsafe { csc_model_separate(h, x.as_ptr(), x.len(), est.as_mut_ptr(), emb.as_mut_ptr()) }, CscStatus::Ok);
    let want = t.model.separate(&t.store, &x).unwrap();
    assert_eq!(est, want.concat());
    assert!(emb.iter().all(|v| v.is_finite()));
    assert_eq!(unsafe { csc_model_separate(h, x.as_ptr(), x.len(), ptr::null_mut(), ptr::null_mut()) }, CscStatus::NullPointer);
    unsafe { csc_model_free(h) };
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("csc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["csc_model_load", "csc_model_separate", "csc_verify_claims", "CSC_STATUS_CHECK_FAILED", "typedef struct CscModel CscModel"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "#include \"csc.h\"\nint main(void) { return csc_verify_claims(0.0) == CSC_STATUS_OK ? 0 : 1; }\n").unwrap();
    let Ok(status) = Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(header.parent().unwrap()).arg(&src).status() else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(status.success());
}
