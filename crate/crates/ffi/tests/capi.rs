use std::ffi::{CStr, CString};
use std::ptr;

use lowrank_ffi::*;

fn last_error() -> String {
    let p = lr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_state(m: usize, n: usize, k: usize, b: usize, kind: LrVariant) -> *mut LrState {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { lr_state_new(m, n, k, b, kind, 7, &mut s) }, LrStatus::Ok);
    assert!(!s.is_null());
    s
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(lr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn state_lifecycle() {
    let s = new_state(4, 3, 2, 2, LrVariant::Sbpca);
    let (mut m, mut n, mut k) = (0, 0, 0);
    assert_eq!(unsafe { lr_state_dims(s, &mut m, &mut n, &mut k) }, LrStatus::Ok);
    assert_eq!((m, n, k), (4, 3, 2));

    // a batch of identical rows: the estimate moves toward δ xᵀ
    let x = [1.0, 0.0, 0.0].repeat(4);
    let delta = [0.0, 2.0, 0.0, 0.0].repeat(4);
    for _ in 0..60 {
        assert_eq!(unsafe { lr_state_update(s, x.as_ptr(), delta.as_ptr(), 4) }, LrStatus::Ok);
    }
    let mut g = vec![0.0; 12];
    assert_eq!(unsafe { lr_state_recompose(s, g.as_mut_ptr(), g.len()) }, LrStatus::Ok);
    let mut target = vec![0.0; 12];
    target[3] = 2.0; // row 1, column 0
    let err: f64 = g.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err < 1e-6, "{g:?}");

    let mut tracked = -1.0;
    assert_eq!(
        unsafe { lr_state_tracking_error(s, target.as_ptr(), target.len(), &mut tracked) },
        LrStatus::Ok
    );
    assert!((tracked - err).abs() < 1e-12);

    let mut sigma = [0.0; 2];
    let mut x_hat = [0.0; 6];
    assert_eq!(
        unsafe { lr_state_factors(s, sigma.as_mut_ptr(), 2, x_hat.as_mut_ptr(), 6, ptr::null_mut(), 0) },
        LrStatus::Ok
    );
    assert!((sigma.iter().cloned().fold(0.0, f64::max) - 2.0).abs() < 1e-6);
    unsafe { lr_state_free(s) };
}

#[test]
fn sbpcav_needs_doubling_batches() {
    let s = new_state(3, 3, 1, 0, LrVariant::Sbpcav);
    let x = [0.5; 3 * 7];
    let d = [0.25; 3 * 7];
    assert_eq!(unsafe { lr_state_update(s, x.as_ptr(), d.as_ptr(), 7) }, LrStatus::Ok);
    assert_ne!(unsafe { lr_state_update(s, x.as_ptr(), d.as_ptr(), 6) }, LrStatus::Ok);
    unsafe { lr_state_free(s) };
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { lr_state_new(3, 2, 5, 1, LrVariant::Sbpca, 0, &mut s) }, LrStatus::Config);
    assert!(s.is_null());
    assert!(last_error().contains("rank"), "{}", last_error());

    assert_eq!(
        unsafe { lr_state_new(3, 2, 1, 1, LrVariant::Sbpca, 0, ptr::null_mut()) },
        LrStatus::NullPointer
    );
    assert_eq!(unsafe { lr_state_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, LrStatus::NullPointer);

    let s = new_state(3, 2, 1, 2, LrVariant::Sbpca);
    let x = [1.0; 6];
    let d = [1.0; 9];
    assert_eq!(unsafe { lr_state_update(s, x.as_ptr(), d.as_ptr(), 3) }, LrStatus::InvalidArgument);
    assert!(last_error().contains("block size"));
    let nan = [f64::NAN; 8];
    assert_eq!(unsafe { lr_state_update(s, nan.as_ptr(), nan.as_ptr(), 2) }, LrStatus::NonFinite);
    let mut small = [0.0; 5];
    assert_eq!(unsafe { lr_state_recompose(s, small.as_mut_ptr(), 5) }, LrStatus::InvalidArgument);
    unsafe { lr_state_free(s) };
    unsafe { lr_state_free(ptr::null_mut()) };

    let missing = CString::new("/nonexistent/state.bin").unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { lr_state_load(missing.as_ptr(), 1, LrVariant::Sbpca, 0, &mut loaded) },
        LrStatus::Io
    );
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = new_state(5, 4, 3, 1, LrVariant::Sbpca);
    let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let d: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.05).collect();
    assert_eq!(unsafe { lr_state_update(s, x.as_ptr(), d.as_ptr(), 2) }, LrStatus::Ok);
    let file = CString::new(dir.path().join("s.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lr_state_save(s, file.as_ptr()) }, LrStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { lr_state_load(file.as_ptr(), 1, LrVariant::Sbpca, 7, &mut back) }, LrStatus::Ok);
    let (mut a, mut b) = (vec![0.0; 20], vec![0.0; 20]);
    unsafe {
        lr_state_recompose(s, a.as_mut_ptr(), 20);
        lr_state_recompose(back, b.as_mut_ptr(), 20);
    }
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    unsafe {
        lr_state_free(s);
        lr_state_free(back);
    }

    let name = CString::new("mlp:6-5-3").unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { lr_network_preset(name.as_ptr(), false, 3, &mut net) }, LrStatus::Ok);
    let (mut inputs, mut classes) = (0, 0);
    unsafe { lr_network_dims(net, &mut inputs, &mut classes) };
    assert_eq!((inputs, classes), (6, 3));
    let model = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lr_network_save(net, model.as_ptr()) }, LrStatus::Ok);
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { lr_network_load(model.as_ptr(), &mut again) }, LrStatus::Ok);
    let xs: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    let labels = [0u32, 2];
    let (mut l1, mut a1, mut l2, mut a2) = (0.0, 0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(lr_network_evaluate(net, xs.as_ptr(), labels.as_ptr(), 2, &mut l1, &mut a1), LrStatus::Ok);
        assert_eq!(lr_network_evaluate(again, xs.as_ptr(), labels.as_ptr(), 2, &mut l2, &mut a2), LrStatus::Ok);
    }
    assert_eq!((l1.to_bits(), a1), (l2.to_bits(), a2));
    assert!(l1 > 0.0 && (0.0..=1.0).contains(&a1));
    let bad = [7u32, 0];
    assert_eq!(
        unsafe { lr_network_evaluate(net, xs.as_ptr(), bad.as_ptr(), 2, &mut l1, &mut a1) },
        LrStatus::InvalidArgument
    );
    unsafe {
        lr_network_free(net);
        lr_network_free(again);
    }
}

#[test]
fn cost_model_through_the_c_interface() {
    let mut c = LrCostModel::default();
    assert_eq!(unsafe { lr_cost_model(256, 128, 128, 32, 10, &mut c) }, LrStatus::Ok);
    assert_eq!(c.state_floats, 3850);
    assert_eq!(c.update_floats, 3840);
    assert_eq!(c.qr_workspace_floats, 2916);
    assert_eq!(c.mbgd_flops, 2 * 128 * 256 * 128);
    assert!((c.memory_ratio_streamed - 31.0 / 128.0).abs() < 1e-15);
    assert_eq!(unsafe { lr_cost_model(0, 1, 1, 1, 1, &mut c) }, LrStatus::Config);
}

#[test]
fn run_config_returns_cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.conf");
    std::fs::write(&cfg, "dataset = blobs\nblobs_train = 64\nblobs_test = 32\narchitecture = mlp:16-8-4\nbatch_size = 16\nepochs = 1\n").unwrap();
    let c = CString::new(cfg.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lr_run_config(c.as_ptr()) }, 0);
    std::fs::write(&cfg, "dataset = nothing\n").unwrap();
    assert_eq!(unsafe { lr_run_config(c.as_ptr()) }, 1);
    assert_eq!(unsafe { lr_run_config(ptr::null()) }, 1);
}
