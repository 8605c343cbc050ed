//! C ABI over `ier-core`.
//!
//! Every fallible function returns an [`IerStatus`]; on failure a message is
//! available from [`ier_last_error`] on the same thread. Models, configs and
//! inference results are opaque handles released with their `_free`
//! function. Buffers are caller-owned; functions that fill one take its
//! capacity in elements and fail with `IER_STATUS_BUFFER_TOO_SMALL` when it
//! does not fit.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ier_core::audio::{log_mel, MelConfig, Waveform};
use ier_core::checkpoint::{Checkpoint, Stage};
use ier_core::metrics::ciou;
use ier_core::numerics::{cosine_sim, kl_divergence, softmax, FeatureGrid};
use ier_core::pipeline;
use ier_core::referrer::{cross_distillation_loss, infer, Inference, Model, ReferrerConfig, ThresholdMode};
use ier_core::{ExperimentConfig, IerError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IerStatus {
    Ok = 0,
    NullPointer = 1,
    Usage = 2,
    Io = 3,
    Numeric = 4,
    Domain = 5,
    Format = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Training stage selector for [`ier_train`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IerStage {
    One = 1,
    Identifier = 2,
    Two = 3,
}

/// Referrer switches used by [`ier_infer`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IerReferrerOptions {
    /// 1 constant, 2 batch-max ratio, 3 item-max ratio, 4 GAP weight, 5 batch mean.
    pub threshold_mode: u8,
    /// Constant for mode 1, ratio for modes 2 and 3.
    pub threshold_value: f64,
    pub silent_filter: bool,
    pub offscreen_filter: bool,
}

/// A trained model loaded from a checkpoint.
pub struct IerModel {
    model: Model,
    clusters: Vec<usize>,
}

/// An experiment configuration.
pub struct IerConfig {
    config: ExperimentConfig,
}

/// Outputs of one inference call.
pub struct IerInference {
    inference: Inference,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &IerError) -> IerStatus {
    match err {
        IerError::Domain(_) => IerStatus::Domain,
        IerError::Config(_) => IerStatus::Config,
        IerError::Format(_) => IerStatus::Format,
        IerError::Usage(_) => IerStatus::Usage,
        IerError::Numeric(_) => IerStatus::Numeric,
        IerError::Io { .. } => IerStatus::Io,
    }
}

/// Internal failure carrying the status to report.
struct Failure(IerStatus, String);

impl From<IerError> for Failure {
    fn from(e: IerError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(IerStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IerStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            IerStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn string<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(IerStatus::Usage, format!("{what} is not valid UTF-8")))
}

unsafe fn path(ptr: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    string(ptr, what).map(PathBuf::from)
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

fn copy_into(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if dst.len() < src.len() {
        return Err(Failure(
            IerStatus::BufferTooSmall,
            format!("buffer holds {} values, {} needed", dst.len(), src.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ier_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ier_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Defaults: batch-mean threshold, both filters on.
#[no_mangle]
pub extern "C" fn ier_referrer_options_default() -> IerReferrerOptions {
    IerReferrerOptions {
        threshold_mode: 5,
        threshold_value: 0.5,
        silent_filter: true,
        offscreen_filter: true,
    }
}

fn referrer(options: &IerReferrerOptions) -> Result<ReferrerConfig, Failure> {
    Ok(ReferrerConfig {
        threshold: ThresholdMode::from_index(options.threshold_mode, options.threshold_value)?,
        silent_filter: options.silent_filter,
        offscreen_filter: options.offscreen_filter,
    })
}

// ---------------------------------------------------------------- configs

/// Default experiment configuration.
#[no_mangle]
pub unsafe extern "C" fn ier_config_default(config: *mut *mut IerConfig) -> IerStatus {
    guard(|| {
        let slot = out(config, "config")?;
        *slot = Box::into_raw(Box::new(IerConfig {
            config: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Parses a flat JSON configuration; missing keys take their defaults.
#[no_mangle]
pub unsafe extern "C" fn ier_config_from_json(json: *const c_char, config: *mut *mut IerConfig) -> IerStatus {
    guard(|| {
        let text = string(json, "json")?;
        let slot = out(config, "config")?;
        *slot = Box::into_raw(Box::new(IerConfig {
            config: ExperimentConfig::from_json(text)?,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ier_config_free(config: *mut IerConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ---------------------------------------------------------------- pipeline

/// Writes a synthetic dataset to `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn ier_synth(config: *const IerConfig, out_dir: *const c_char) -> IerStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        pipeline::cmd_synth(&c.config, &path(out_dir, "out_dir")?)?;
        Ok(())
    })
}

/// Trains one stage. `from` is the previous checkpoint and may be NULL for
/// stage one.
#[no_mangle]
pub unsafe extern "C" fn ier_train(
    config: *const IerConfig,
    data_dir: *const c_char,
    stage: IerStage,
    from: *const c_char,
    out_path: *const c_char,
) -> IerStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let previous = if from.is_null() { None } else { Some(path(from, "from")?) };
        let stage = match stage {
            IerStage::One => Stage::Stage1,
            IerStage::Identifier => Stage::Identifier,
            IerStage::Two => Stage::Stage2,
        };
        pipeline::cmd_train(&c.config, &path(data_dir, "data_dir")?, stage, previous.as_deref(), &path(out_path, "out_path")?)?;
        Ok(())
    })
}

/// Evaluates a checkpoint and writes `report.json` and `per_sample.csv`.
/// `metrics`, when non-NULL, receives iou_05, auc, ciou_03, nmi, precision,
/// recall and map in that order (7 values).
#[no_mangle]
pub unsafe extern "C" fn ier_eval(
    config: *const IerConfig,
    checkpoint: *const c_char,
    data_dir: *const c_char,
    out_dir: *const c_char,
    metrics: *mut f64,
) -> IerStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let report = pipeline::cmd_eval(
            &c.config,
            &path(checkpoint, "checkpoint")?,
            &path(data_dir, "data_dir")?,
            &path(out_dir, "out_dir")?,
        )?;
        if !metrics.is_null() {
            let values: Vec<f64> = report.fields().iter().map(|(_, v)| *v).collect();
            copy_into(&values, std::slice::from_raw_parts_mut(metrics, values.len()))?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- models

/// Loads a checkpoint that contains prototypes and steps.
#[no_mangle]
pub unsafe extern "C" fn ier_model_load(checkpoint: *const c_char, model: *mut *mut IerModel) -> IerStatus {
    guard(|| {
        let p = path(checkpoint, "checkpoint")?;
        let slot = out(model, "model")?;
        let ck = Checkpoint::load(&p)?;
        *slot = Box::into_raw(Box::new(IerModel {
            model: ck.model()?,
            clusters: ck.clusters()?,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ier_model_free(model: *mut IerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Pseudo-class count K, or 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn ier_model_num_classes(model: *const IerModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.k())
}

/// Visual channel and audio latent sizes the model expects.
#[no_mangle]
pub unsafe extern "C" fn ier_model_input_dims(model: *const IerModel, c_in: *mut usize, a_in: *mut usize) -> IerStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(c_in, "c_in")? = m.model.encoders.visual.input_dim();
        *out(a_in, "a_in")? = m.model.encoders.audio_mid.input_dim();
        Ok(())
    })
}

/// True category of pseudo-class `k`; `SIZE_MAX` when the cluster was empty.
#[no_mangle]
pub unsafe extern "C" fn ier_model_category(model: *const IerModel, k: usize, category: *mut usize) -> IerStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = m
            .clusters
            .get(k)
            .ok_or_else(|| Failure(IerStatus::Domain, format!("class {k} out of range")))?;
        *out(category, "category")? = *c;
        Ok(())
    })
}

/// Runs the referrer on one scene. `grid` is `height × width × channels`,
/// row-major; `audio` holds `audio_len` latent values. Batch statistics come
/// from this scene alone.
#[no_mangle]
pub unsafe extern "C" fn ier_infer(
    model: *const IerModel,
    options: *const IerReferrerOptions,
    grid: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    audio: *const f64,
    audio_len: usize,
    result: *mut *mut IerInference,
) -> IerStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let opts = options.as_ref().ok_or_else(|| null("options"))?;
        let slot = out(result, "result")?;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Failure(IerStatus::Domain, "grid size overflows".into()))?;
        let grid = FeatureGrid::new(height, width, channels, slice(grid, n, "grid")?.to_vec())?;
        let latent = slice(audio, audio_len, "audio")?;
        if channels != m.model.encoders.visual.input_dim() || audio_len != m.model.encoders.audio_mid.input_dim() {
            return Err(Failure(IerStatus::Usage, "input sizes do not match the model".into()));
        }
        let inference = infer(&m.model, &referrer(opts)?, &grid, latent)?;
        *slot = Box::into_raw(Box::new(IerInference { inference }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ier_inference_free(result: *mut IerInference) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Copies the AVMap of class `k` (`height × width` values).
#[no_mangle]
pub unsafe extern "C" fn ier_inference_av_map(
    result: *const IerInference,
    k: usize,
    buffer: *mut f64,
    capacity: usize,
) -> IerStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        let map = r
            .inference
            .av_maps
            .get(k)
            .ok_or_else(|| Failure(IerStatus::Domain, format!("class {k} out of range")))?;
        copy_into(&map.data, slice_mut(buffer, capacity, "buffer")?)
    })
}

/// Copies the audio-guided distribution (K values).
#[no_mangle]
pub unsafe extern "C" fn ier_inference_p_av(result: *const IerInference, buffer: *mut f64, capacity: usize) -> IerStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        copy_into(&r.inference.p_av, slice_mut(buffer, capacity, "buffer")?)
    })
}

/// Copies the visual-guided distribution (K values).
#[no_mangle]
pub unsafe extern "C" fn ier_inference_p_va(result: *const IerInference, buffer: *mut f64, capacity: usize) -> IerStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        copy_into(&r.inference.p_va, slice_mut(buffer, capacity, "buffer")?)
    })
}

// ---------------------------------------------------------------- numerics

/// Cosine similarity of two length-`n` vectors.
#[no_mangle]
pub unsafe extern "C" fn ier_cosine(a: *const f64, b: *const f64, n: usize, value: *mut f64) -> IerStatus {
    guard(|| {
        *out(value, "value")? = cosine_sim(slice(a, n, "a")?, slice(b, n, "b")?)?;
        Ok(())
    })
}

/// Max-shifted softmax of `n` scores into `probabilities`.
#[no_mangle]
pub unsafe extern "C" fn ier_softmax(scores: *const f64, n: usize, probabilities: *mut f64) -> IerStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        if s.is_empty() {
            return Err(Failure(IerStatus::Domain, "softmax of an empty vector".into()));
        }
        copy_into(&softmax(s), slice_mut(probabilities, n, "probabilities")?)
    })
}

/// `KL(p || q)` over `n` entries.
#[no_mangle]
pub unsafe extern "C" fn ier_kl_divergence(p: *const f64, q: *const f64, n: usize, value: *mut f64) -> IerStatus {
    guard(|| {
        *out(value, "value")? = kl_divergence(slice(p, n, "p")?, slice(q, n, "q")?)?;
        Ok(())
    })
}

/// Symmetric KL `½ KL(p‖q) + ½ KL(q‖p)`.
#[no_mangle]
pub unsafe extern "C" fn ier_cross_distillation(p: *const f64, q: *const f64, n: usize, value: *mut f64) -> IerStatus {
    guard(|| {
        *out(value, "value")? = cross_distillation_loss(slice(p, n, "p")?, slice(q, n, "q")?)?;
        Ok(())
    })
}

/// Class-aware IoU: mean of `ious` over entries whose `presence` is nonzero.
#[no_mangle]
pub unsafe extern "C" fn ier_ciou(ious: *const f64, presence: *const u8, n: usize, value: *mut f64) -> IerStatus {
    guard(|| {
        let present: Vec<bool> = slice(presence, n, "presence")?.iter().map(|&p| p != 0).collect();
        *out(value, "value")? = ciou(slice(ious, n, "ious")?, &present)?;
        Ok(())
    })
}

/// Log-mel spectrogram with 160 ms windows and 80 ms hops. Writes
/// `frames × bins` values row-major by frame and stores the frame count.
#[no_mangle]
pub unsafe extern "C" fn ier_log_mel(
    samples: *const f64,
    n: usize,
    sample_rate: u32,
    bins: usize,
    buffer: *mut f64,
    capacity: usize,
    frames: *mut usize,
) -> IerStatus {
    guard(|| {
        let frames = out(frames, "frames")?;
        let wave = Waveform::new(slice(samples, n, "samples")?.to_vec(), sample_rate)?;
        let mel = log_mel(&wave, &MelConfig { bins, ..MelConfig::default() })?;
        *frames = mel.frames;
        copy_into(&mel.data, slice_mut(buffer, capacity, "buffer")?)
    })
}
