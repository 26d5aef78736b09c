use std::collections::HashMap;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use aspp_scope::data::FeatureGroup;
use aspp_scope::harness::checkpoint_metadata;
use aspp_scope::model::{AsppRates, ModelSpec, MultiTaskNet, Task};
use aspp_scope::tensor::{no_grad, BnMode, Tensor};
use aspp_scope_ffi::*;

const C: usize = 4;

fn save_checkpoint(dir: &Path) -> MultiTaskNet<f32> {
    let spec = ModelSpec { input_size: 64, ..ModelSpec::mini(C, AsppRates::DESK_SMALL) };
    let mut net = MultiTaskNet::<f32>::build(&spec, 7).unwrap();
    net.save(dir, checkpoint_metadata(FeatureGroup::G2, 7, &HashMap::new())).unwrap();
    net.set_mode(BnMode::Eval);
    net
}

fn load(dir: &Path) -> *mut AsppModel {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { aspp_model_load(path.as_ptr(), &mut model) }, AsppStatus::Ok);
    assert!(!model.is_null());
    model
}

fn input(h: usize, w: usize) -> Vec<f32> {
    (0..C * h * w).map(|i| ((i * 7919) % 97) as f32 / 48.0 - 1.0).collect()
}

fn last_error() -> String {
    let p = aspp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn null_arguments_are_reported() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { aspp_model_load(ptr::null(), &mut model) }, AsppStatus::NullPointer);
    assert!(last_error().contains("null"));
    let mut n = 0usize;
    assert_eq!(unsafe { aspp_model_param_count(ptr::null(), &mut n) }, AsppStatus::NullPointer);
    unsafe { aspp_model_free(ptr::null_mut()) };
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { aspp_model_load(path.as_ptr(), &mut model) };
    assert_eq!(status, AsppStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("absent"));
}

#[test]
fn forward_matches_rust_model() {
    let dir = tempfile::tempdir().unwrap();
    let net = save_checkpoint(dir.path());
    let model = load(dir.path());

    let mut count = 0usize;
    let mut channels = 0usize;
    unsafe {
        assert_eq!(aspp_model_param_count(model, &mut count), AsppStatus::Ok);
        assert_eq!(aspp_model_input_channels(model, &mut channels), AsppStatus::Ok);
        assert_eq!(CStr::from_ptr(aspp_model_feature_group(model)).to_str().unwrap(), "g2");
    }
    assert_eq!(count, net.param_count());
    assert_eq!(channels, C);
    assert!(aspp_last_error_message().is_null());

    let (h, w) = (64, 64);
    let x = input(h, w);
    let k = Task::Sod.classes();
    let mut out = vec![0.0f32; k * h * w];
    let status = unsafe { aspp_model_forward(model, x.as_ptr(), C, h, w, 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, AsppStatus::Ok);

    let t = Tensor::new(&[1, C, h, w], x).unwrap();
    let expected = no_grad(|| net.forward_task(&t, Task::Sod)).unwrap().logits.to_vec();
    for (a, b) in out.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
    }
    unsafe { aspp_model_free(model) };
}

#[test]
fn predict_is_argmax_of_forward_on_unaligned_input() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path());
    let model = load(dir.path());
    let (h, w) = (40, 52);
    let x = input(h, w);
    let n = h * w;
    let (mut sic, mut sod, mut floe) = (vec![0u8; n], vec![0u8; n], vec![0u8; n]);
    let status = unsafe {
        aspp_model_predict(model, x.as_ptr(), C, h, w, sic.as_mut_ptr(), sod.as_mut_ptr(), floe.as_mut_ptr())
    };
    assert_eq!(status, AsppStatus::Ok);
    for (code, map) in [(0, &sic), (1, &sod), (2, &floe)] {
        let k = aspp_task_classes(code);
        let mut logits = vec![0.0f32; k * n];
        let s = unsafe { aspp_model_forward(model, x.as_ptr(), C, h, w, code, logits.as_mut_ptr(), logits.len()) };
        assert_eq!(s, AsppStatus::Ok);
        for p in 0..n {
            let best = (0..k).fold(0, |b, c| if logits[c * n + p] > logits[b * n + p] { c } else { b });
            assert_eq!(map[p] as usize, best);
        }
    }
    unsafe { aspp_model_free(model) };
}

#[test]
fn argument_errors_have_codes() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path());
    let model = load(dir.path());
    let (h, w) = (32, 32);
    let x = input(h, w);
    let mut out = vec![0.0f32; 11 * h * w];
    unsafe {
        let s = aspp_model_forward(model, x.as_ptr(), C + 1, h, w, 0, out.as_mut_ptr(), out.len());
        assert_eq!(s, AsppStatus::ChannelMismatch);
        assert!(last_error().contains("expects 4 input channels"));

        let s = aspp_model_forward(model, x.as_ptr(), C, h, w, 7, out.as_mut_ptr(), out.len());
        assert_eq!(s, AsppStatus::InvalidArgument);

        let s = aspp_model_forward(model, x.as_ptr(), C, h, w, 0, out.as_mut_ptr(), 10);
        assert_eq!(s, AsppStatus::BufferTooSmall);

        let s = aspp_model_forward(model, ptr::null(), C, h, w, 0, out.as_mut_ptr(), out.len());
        assert_eq!(s, AsppStatus::NullPointer);

        let bad = CString::new("conv9").unwrap();
        let s = aspp_model_gradcam(model, x.as_ptr(), C, h, w, 1, 0, bad.as_ptr(), out.as_mut_ptr(), out.len());
        assert_eq!(s, AsppStatus::InvalidArgument);
        assert!(last_error().contains("conv9"));

        aspp_model_free(model);
    }
    assert_eq!(aspp_task_classes(3), 0);
    assert_eq!(aspp_task_classes(0), 11);
}

#[test]
fn gradcam_is_unit_scaled() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path());
    let model = load(dir.path());
    let (h, w) = (48, 48);
    let x = input(h, w);
    let mut cam = vec![-1.0f32; h * w];
    let s = unsafe { aspp_model_gradcam(model, x.as_ptr(), C, h, w, 1, 2, ptr::null(), cam.as_mut_ptr(), cam.len()) };
    assert_eq!(s, AsppStatus::Ok);
    assert!(cam.iter().all(|v| (0.0..=1.0).contains(v)));
    let max = cam.iter().copied().fold(0.0f32, f32::max);
    assert!(max == 1.0 || max == 0.0);
    unsafe { aspp_model_free(model) };
}

#[test]
fn header_declares_the_abi() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/aspp_scope.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "aspp_model_load",
        "aspp_model_free",
        "aspp_model_forward",
        "aspp_model_predict",
        "aspp_model_gradcam",
        "aspp_last_error_message",
        "ASPP_STATUS_CHANNEL_MISMATCH",
        "typedef struct AsppModel AsppModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // Syntax-check with the system C compiler when one is installed.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
