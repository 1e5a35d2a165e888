//! Exercises the C ABI through the exported extern functions.

use std::ffi::{CStr, CString};
use std::ptr;

use steinlab_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_is_a_static_string() {
    let v = steinlab_version();
    assert!(!v.is_null());
    let text = unsafe { CStr::from_ptr(v) }.to_str().unwrap();
    assert_eq!(text, env!("CARGO_PKG_VERSION"));
}

#[test]
fn kernel_round_trip_and_eval() {
    unsafe {
        let json = cstr(r#"{"family":"exp-power","p":2.0,"sigma":1.0}"#);
        let mut kernel: *mut SteinlabKernel = ptr::null_mut();
        assert_eq!(
            steinlab_kernel_from_json(json.as_ptr(), &mut kernel),
            SteinStatus::Ok
        );
        let x = [0.0f64];
        let y = [1.0f64];
        let mut out = 0.0f64;
        assert_eq!(
            steinlab_kernel_eval(kernel, x.as_ptr(), y.as_ptr(), 1, &mut out),
            SteinStatus::Ok
        );
        assert!((out - (-1.0f64).exp()).abs() < 1e-15);

        let mut grad = [0.0f64];
        assert_eq!(
            steinlab_kernel_grad_y(kernel, x.as_ptr(), y.as_ptr(), 1, grad.as_mut_ptr()),
            SteinStatus::Ok
        );
        assert!((grad[0] + 2.0 * (-1.0f64).exp()).abs() < 1e-14);

        let mut cross = 0.0f64;
        assert_eq!(
            steinlab_kernel_cross_trace(kernel, x.as_ptr(), x.as_ptr(), 1, &mut cross),
            SteinStatus::Ok
        );
        assert!((cross - 2.0).abs() < 1e-14);
        steinlab_kernel_free(kernel);
    }
}

#[test]
fn invalid_kernel_json_reports_config_error() {
    unsafe {
        let json = cstr(r#"{"family":"exp-power","p":3.5,"sigma":1.0}"#);
        let mut kernel: *mut SteinlabKernel = ptr::null_mut();
        assert_eq!(
            steinlab_kernel_from_json(json.as_ptr(), &mut kernel),
            SteinStatus::ConfigInvalid
        );
        let msg = steinlab_last_error_message();
        assert!(!msg.is_null());
        let text = CStr::from_ptr(msg).to_str().unwrap().to_string();
        assert!(text.contains("p"), "unexpected message: {text}");
        steinlab_string_free(msg);
    }
}

#[test]
fn diagonal_error_surfaces_with_its_own_status() {
    unsafe {
        let json = cstr(r#"{"family":"exp-power","p":1.0,"sigma":1.0}"#);
        let mut kernel: *mut SteinlabKernel = ptr::null_mut();
        assert_eq!(
            steinlab_kernel_from_json(json.as_ptr(), &mut kernel),
            SteinStatus::Ok
        );
        let x = [0.3f64];
        let mut cross = 0.0;
        assert_eq!(
            steinlab_kernel_cross_trace(kernel, x.as_ptr(), x.as_ptr(), 1, &mut cross),
            SteinStatus::DiagonalUndefined
        );
        steinlab_kernel_free(kernel);
    }
}

#[test]
fn target_and_ensemble_and_ksd() {
    unsafe {
        let kjson = cstr(r#"{"family":"gaussian","sigma":1.0}"#);
        let mut kernel: *mut SteinlabKernel = ptr::null_mut();
        assert_eq!(
            steinlab_kernel_from_json(kjson.as_ptr(), &mut kernel),
            SteinStatus::Ok
        );

        let tjson = cstr(r#"{"family":"gaussian","mean":[0,0],"cov":[[1,0],[0,1]]}"#);
        let mut target: *mut SteinlabTarget = ptr::null_mut();
        assert_eq!(
            steinlab_target_from_json(tjson.as_ptr(), &mut target),
            SteinStatus::Ok
        );
        assert_eq!(steinlab_target_dim(target), 2);

        let x = [0.5f64, -0.25];
        let mut v = 0.0;
        assert_eq!(
            steinlab_target_potential(target, x.as_ptr(), 2, &mut v),
            SteinStatus::Ok
        );
        assert!((v - 0.5 * (0.25 + 0.0625)).abs() < 1e-14);
        let mut score = [0.0f64; 2];
        assert_eq!(
            steinlab_target_score(target, x.as_ptr(), 2, score.as_mut_ptr()),
            SteinStatus::Ok
        );
        assert_eq!(score, x);

        // single particle at the origin: KSD² = 4 for d = 2, σ = 1
        let origin = [0.0f64, 0.0];
        let mut ensemble: *mut SteinlabEnsemble = ptr::null_mut();
        assert_eq!(
            steinlab_ensemble_new(origin.as_ptr(), 1, 2, &mut ensemble),
            SteinStatus::Ok
        );
        assert_eq!(steinlab_ensemble_len(ensemble), 1);
        assert_eq!(steinlab_ensemble_dim(ensemble), 2);
        let mut ksd = 0.0;
        assert_eq!(
            steinlab_ksd_squared(kernel, target, ensemble, 0, &mut ksd),
            SteinStatus::Ok
        );
        assert!((ksd - 4.0).abs() < 1e-10);
        let mut rkhs = 0.0;
        assert_eq!(
            steinlab_drift_rkhs_norm_squared(kernel, target, ensemble, &mut rkhs),
            SteinStatus::Ok
        );
        assert!((ksd - rkhs).abs() < 1e-12);

        steinlab_ensemble_free(ensemble);
        steinlab_target_free(target);
        steinlab_kernel_free(kernel);
    }
}

#[test]
fn run_moves_single_particle_like_gradient_descent() {
    unsafe {
        let kjson = cstr(r#"{"family":"gaussian","sigma":1.0}"#);
        let mut kernel: *mut SteinlabKernel = ptr::null_mut();
        steinlab_kernel_from_json(kjson.as_ptr(), &mut kernel);
        let tjson = cstr(r#"{"family":"gaussian","mean":[0],"cov":[[1]]}"#);
        let mut target: *mut SteinlabTarget = ptr::null_mut();
        steinlab_target_from_json(tjson.as_ptr(), &mut target);

        let start = [1.0f64];
        let mut ensemble: *mut SteinlabEnsemble = ptr::null_mut();
        steinlab_ensemble_new(start.as_ptr(), 1, 1, &mut ensemble);
        assert_eq!(
            steinlab_run(kernel, target, ensemble, 0, 0.1, 1, 0),
            SteinStatus::Ok
        );
        let mut pos = [0.0f64];
        steinlab_ensemble_positions(ensemble, pos.as_mut_ptr());
        assert!((pos[0] - 0.9).abs() < 1e-14);

        // bad mode is rejected
        assert_eq!(
            steinlab_run(kernel, target, ensemble, 9, 0.1, 1, 0),
            SteinStatus::ConfigInvalid
        );

        steinlab_ensemble_free(ensemble);
        steinlab_target_free(target);
        steinlab_kernel_free(kernel);
    }
}

#[test]
fn run_experiment_from_config_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "experiment": "ksd",
        "target": {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "kernel": {"family": "gaussian", "sigma": 1.0},
        "initial": {"kind": "grid", "n": 8, "dim": 1, "extent": 1.5},
        "output": {"directory": dir.path(), "formats": ["json"]}
    });
    unsafe {
        let json = cstr(&config.to_string());
        let mut summary: *mut libc::c_char = ptr::null_mut();
        assert_eq!(
            steinlab_run_experiment(json.as_ptr(), &mut summary),
            SteinStatus::Ok
        );
        assert!(!summary.is_null());
        let text = CStr::from_ptr(summary).to_str().unwrap().to_string();
        steinlab_string_free(summary);
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(parsed["summary"]["ksd2_vstat"].as_f64().unwrap() > 0.0);
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("manifest.json").exists());
    }
}

#[test]
fn null_pointers_are_rejected_not_crashing() {
    unsafe {
        let mut out = 0.0f64;
        assert_eq!(
            steinlab_kernel_eval(ptr::null(), ptr::null(), ptr::null(), 1, &mut out),
            SteinStatus::NullPointer
        );
        assert_eq!(
            steinlab_kernel_from_json(ptr::null(), ptr::null_mut()),
            SteinStatus::NullPointer
        );
        // frees tolerate null
        steinlab_kernel_free(ptr::null_mut());
        steinlab_target_free(ptr::null_mut());
        steinlab_ensemble_free(ptr::null_mut());
        steinlab_string_free(ptr::null_mut());
    }
}
