//! C ABI over the aspp-scope engine.
//!
//! Every fallible call returns an [`AsppStatus`]; on failure the message is
//! available from [`aspp_last_error_message`] on the same thread. Models are
//! opaque [`AsppModel`] handles created by [`aspp_model_load`] and released by
//! [`aspp_model_free`]. Inputs are `float` rasters in `[C, H, W]` order holding
//! features already normalised the way the checkpoint was trained.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aspp_scope::gradcam::{compute_gradcam, normalize, GradCamConfig, DEFAULT_LAYER};
use aspp_scope::harness::checkpoint_inputs;
use aspp_scope::model::{MultiTaskNet, Task, INPUT_MULTIPLE};
use aspp_scope::tensor::{no_grad, BnMode, Tensor};
use aspp_scope::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsppStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    ChannelMismatch = 4,
    Io = 5,
    Format = 6,
    Config = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct AsppModel {
    net: MultiTaskNet<f32>,
    group: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> AsppStatus {
    match err {
        Error::InvalidArgument(_) | Error::RateTooLarge { .. } => AsppStatus::InvalidArgument,
        Error::Shape(_) => AsppStatus::Shape,
        Error::ChannelMismatch(_) | Error::MissingChannel(_) => AsppStatus::ChannelMismatch,
        Error::Io { .. } => AsppStatus::Io,
        Error::Format { .. } => AsppStatus::Format,
        Error::Config(_) => AsppStatus::Config,
        _ => AsppStatus::Internal,
    }
}

struct Failure(AsppStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: AsppStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic for [`aspp_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AsppStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            AsppStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AsppStatus::Panic
        }
    }
}

fn task_of(code: i32) -> Result<Task, Failure> {
    match code {
        0 => Ok(Task::Sic),
        1 => Ok(Task::Sod),
        2 => Ok(Task::Floe),
        _ => Err(fail(AsppStatus::InvalidArgument, format!("unknown task code {code} (0 sic, 1 sod, 2 floe)"))),
    }
}

unsafe fn model_ref<'a>(model: *const AsppModel) -> Result<&'a AsppModel, Failure> {
    model.as_ref().ok_or_else(|| fail(AsppStatus::NullPointer, "model handle is null"))
}

unsafe fn model_mut<'a>(model: *mut AsppModel) -> Result<&'a mut AsppModel, Failure> {
    model.as_mut().ok_or_else(|| fail(AsppStatus::NullPointer, "model handle is null"))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(fail(AsppStatus::NullPointer, format!("{what} buffer is null")));
    }
    if len < needed {
        return Err(fail(AsppStatus::BufferTooSmall, format!("{what} buffer holds {len} values, {needed} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, needed))
}

/// Copies a `[C, H, W]` raster into a zero-padded `[1, C, H', W']` tensor.
unsafe fn padded_input(net: &MultiTaskNet<f32>, input: *const f32, c: usize, h: usize, w: usize) -> Result<Tensor<f32>, Failure> {
    if input.is_null() {
        return Err(fail(AsppStatus::NullPointer, "input buffer is null"));
    }
    if h == 0 || w == 0 {
        return Err(fail(AsppStatus::Shape, format!("empty input {h}x{w}")));
    }
    let expected = net.spec().input_channels;
    if c != expected {
        return Err(fail(
            AsppStatus::ChannelMismatch,
            format!("model expects {expected} input channels, got {c}"),
        ));
    }
    let src = std::slice::from_raw_parts(input, c * h * w);
    let (ph, pw) = (h.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE, w.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE);
    let mut data = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * h + y) * w;
            let d = (ch * ph + y) * pw;
            data[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(Tensor::new(&[1, c, ph, pw], data)?)
}

/// Copies the top-left `h × w` window of each `[k, ph, pw]` plane into `out`.
fn crop_into(src: &[f32], k: usize, (ph, pw): (usize, usize), (h, w): (usize, usize), out: &mut [f32]) {
    for ch in 0..k {
        for y in 0..h {
            let s = (ch * ph + y) * pw;
            let d = (ch * h + y) * w;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aspp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn aspp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Number of classes of a task code (0 sic, 1 sod, 2 floe); 0 for unknown codes.
#[no_mangle]
pub extern "C" fn aspp_task_classes(task: i32) -> usize {
    task_of(task).map_or(0, |t| t.classes())
}

/// Loads a checkpoint directory. On success `*out` owns a new handle.
///
/// # Safety
/// `checkpoint_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_load(checkpoint_dir: *const c_char, out: *mut *mut AsppModel) -> AsppStatus {
    guard(|| {
        if checkpoint_dir.is_null() || out.is_null() {
            return Err(fail(AsppStatus::NullPointer, "checkpoint path or output pointer is null"));
        }
        *out = ptr::null_mut();
        let dir = CStr::from_ptr(checkpoint_dir)
            .to_str()
            .map_err(|_| fail(AsppStatus::InvalidArgument, "checkpoint path is not UTF-8"))?;
        let dir = Path::new(dir);
        let (mut net, manifest) = MultiTaskNet::<f32>::load(dir)?;
        net.set_mode(BnMode::Eval);
        let group = match checkpoint_inputs(&manifest, dir) {
            Ok((g, _)) => g.to_string(),
            Err(_) => String::new(),
        };
        let group = CString::new(group).expect("group names have no NUL");
        *out = Box::into_raw(Box::new(AsppModel { net, group }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`aspp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_free(model: *mut AsppModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_param_count(model: *const AsppModel, out: *mut usize) -> AsppStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_slice(out, 1, 1, "output")?.first_mut().unwrap() = m.net.param_count();
        Ok(())
    })
}

/// Number of input channels the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_input_channels(model: *const AsppModel, out: *mut usize) -> AsppStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_slice(out, 1, 1, "output")?.first_mut().unwrap() = m.net.spec().input_channels;
        Ok(())
    })
}

/// Feature group the checkpoint was trained on (for example "g5"), or "" if unrecorded.
/// The string lives as long as the handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_feature_group(model: *const AsppModel) -> *const c_char {
    model.as_ref().map_or(ptr::null(), |m| m.group.as_ptr())
}

/// Logits of one task for a `[channels, height, width]` input, written as
/// `[classes, height, width]` into `out` (at least `classes * height * width` floats).
///
/// # Safety
/// `input` must hold `channels * height * width` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_forward(
    model: *mut AsppModel,
    input: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    task: i32,
    out: *mut f32,
    out_len: usize,
) -> AsppStatus {
    guard(|| {
        let m = model_mut(model)?;
        let task = task_of(task)?;
        let k = task.classes();
        let out = out_slice(out, out_len, k * height * width, "logits")?;
        let x = padded_input(&m.net, input, channels, height, width)?;
        let [_, _, ph, pw] = x.dims4()?;
        let logits = no_grad(|| m.net.forward_task(&x, task).map(|o| o.logits))?;
        crop_into(&logits.data(), k, (ph, pw), (height, width), out);
        Ok(())
    })
}

/// Arg-max class maps of all three tasks, each `height * width` bytes.
///
/// # Safety
/// `input` must hold `channels * height * width` floats; each output `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_predict(
    model: *mut AsppModel,
    input: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out_sic: *mut u8,
    out_sod: *mut u8,
    out_floe: *mut u8,
) -> AsppStatus {
    guard(|| {
        let m = model_mut(model)?;
        let n = height * width;
        let outs = [
            out_slice(out_sic, n, n, "sic")?,
            out_slice(out_sod, n, n, "sod")?,
            out_slice(out_floe, n, n, "floe")?,
        ];
        let x = padded_input(&m.net, input, channels, height, width)?;
        let [_, _, ph, pw] = x.dims4()?;
        let all = no_grad(|| m.net.forward(&x))?;
        for (task, out) in Task::ALL.into_iter().zip(outs) {
            let k = task.classes();
            let mut cropped = vec![0.0f32; k * n];
            crop_into(&all.get(task).data(), k, (ph, pw), (height, width), &mut cropped);
            for (p, o) in out.iter_mut().enumerate() {
                let mut best = 0;
                for c in 1..k {
                    if cropped[c * n + p] > cropped[best * n + p] {
                        best = c;
                    }
                }
                *o = best as u8;
            }
        }
        Ok(())
    })
}

/// Grad-CAM heatmap in `[0, 1]` of `class` for `task`, `height * width` floats.
/// `layer` may be NULL for the default decoder layer.
///
/// # Safety
/// `input` must hold `channels * height * width` floats, `out` `out_len` floats,
/// and `layer` must be NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn aspp_model_gradcam(
    model: *mut AsppModel,
    input: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    task: i32,
    class: usize,
    layer: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> AsppStatus {
    guard(|| {
        let m = model_mut(model)?;
        let task = task_of(task)?;
        let out = out_slice(out, out_len, height * width, "heatmap")?;
        let layer = if layer.is_null() {
            DEFAULT_LAYER.to_string()
        } else {
            CStr::from_ptr(layer)
                .to_str()
                .map_err(|_| fail(AsppStatus::InvalidArgument, "layer name is not UTF-8"))?
                .to_string()
        };
        let x = padded_input(&m.net, input, channels, height, width)?;
        let [_, _, ph, pw] = x.dims4()?;
        let valid: Vec<bool> = (0..ph * pw).map(|i| i / pw < height && i % pw < width).collect();
        let cfg = GradCamConfig { layer, ..GradCamConfig::new(task, class) };
        let hm = compute_gradcam(&mut m.net, &x, Some(&valid), &cfg, "ffi")?;
        let mut cropped = vec![0.0f32; height * width];
        crop_into(&hm.values, 1, (ph, pw), (height, width), &mut cropped);
        let wide: Vec<f64> = cropped.iter().map(|&v| v as f64).collect();
        out.copy_from_slice(&normalize(&wide));
        Ok(())
    })
}
