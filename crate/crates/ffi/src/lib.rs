//! C ABI over the motiondiff engine.
//!
//! Models and sequences cross the boundary as opaque handles owned by the
//! caller and released with the matching `*_free` function. Every fallible
//! call returns an [`MdStatus`]; the message of the most recent failure on
//! the calling thread is available from [`md_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use motiondiff::data::io::{read_sequence, write_sequence};
use motiondiff::data::{MotionKind, MotionSequence};
use motiondiff::denoiser::{load_checkpoint, ConditionSet, DenoiserModel, Style, Variant};
use motiondiff::diffusion::GuidanceConfig;
use motiondiff::metrics;
use motiondiff::sampling::{
    edit_facial, sample_facial, sample_head_sgdiff, EditOptions, HeadOptions, ImputationSpec,
    SampleRequest,
};
use motiondiff::Tensor;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    /// Model variant or channel count does not fit the input.
    Mismatch = 5,
    Runtime = 6,
    Panic = 7,
}

/// Motion kind codes used by [`md_sequence_new`].
pub const MD_KIND_FACE: u32 = 0;
pub const MD_KIND_HEAD: u32 = 1;

/// Variant codes reported by [`md_model_info`].
pub const MD_VARIANT_FACIAL: u32 = 0;
pub const MD_VARIANT_HEAD: u32 = 1;

/// Opaque trained denoiser.
pub struct MdModel(DenoiserModel);

/// Opaque motion sequence.
pub struct MdSequence(MotionSequence);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MdModelInfo {
    pub variant: u32,
    pub motion_channels: usize,
    pub audio_in: usize,
    pub subjects: usize,
    pub steps: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn md_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

type Fallible<T> = Result<T, (MdStatus, String)>;

fn guard(f: impl FnOnce() -> Fallible<()>) -> MdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside motiondiff");
            MdStatus::Panic
        }
    }
}

fn fail<T>(status: MdStatus, msg: impl std::fmt::Display) -> Fallible<T> {
    Err((status, msg.to_string()))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Fallible<&'a str> {
    if p.is_null() {
        return fail(MdStatus::NullPointer, "path is NULL");
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MdStatus::InvalidArgument, "path is not UTF-8".to_string()))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Fallible<&'a T> {
    p.as_ref()
        .ok_or_else(|| (MdStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn floats<'a>(p: *const f32, len: usize, what: &str) -> Fallible<&'a [f32]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(MdStatus::NullPointer, format!("{what} is NULL"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Fallible<()> {
    if out.is_null() {
        return fail(MdStatus::NullPointer, "output pointer is NULL");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn sampling_status(e: motiondiff::sampling::SamplingError) -> (MdStatus, String) {
    use motiondiff::sampling::SamplingError as E;
    let status = match &e {
        E::Variant { .. } | E::Frames { .. } => MdStatus::Mismatch,
        E::Mask(_) | E::Count | E::EmptyBatch => MdStatus::InvalidArgument,
        _ => MdStatus::Runtime,
    };
    (status, e.to_string())
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn md_model_load(path: *const c_char, out: *mut *mut MdModel) -> MdStatus {
    guard(|| {
        let path = path_arg(path)?;
        let model = load_checkpoint(path).map_err(|e| (MdStatus::Io, e.to_string()))?;
        put(out, MdModel(model))
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`md_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_model_free(model: *mut MdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_model_info(model: *const MdModel, out: *mut MdModelInfo) -> MdStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if out.is_null() {
            return fail(MdStatus::NullPointer, "output pointer is NULL");
        }
        let arch = m.arch();
        *out = MdModelInfo {
            variant: match m.variant() {
                Variant::Facial => MD_VARIANT_FACIAL,
                Variant::Head => MD_VARIANT_HEAD,
            },
            motion_channels: arch.motion_channels,
            audio_in: arch.audio_in,
            subjects: arch.subjects.len(),
            steps: arch.diffusion.steps,
        };
        Ok(())
    })
}

/// Copies `frames * channels` row-major values into a new sequence.
///
/// # Safety
/// `data` must point to `frames * channels` floats and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn md_sequence_new(
    kind: u32,
    fps: f32,
    frames: usize,
    channels: usize,
    data: *const f32,
    out: *mut *mut MdSequence,
) -> MdStatus {
    guard(|| {
        let kind = match kind {
            MD_KIND_FACE => MotionKind::Face,
            MD_KIND_HEAD => MotionKind::Head,
            k => return fail(MdStatus::InvalidArgument, format!("unknown kind {k}")),
        };
        let len = frames
            .checked_mul(channels)
            .ok_or((MdStatus::InvalidArgument, "size overflows".to_string()))?;
        let values = floats(data, len, "data")?.to_vec();
        let t = Tensor::new(vec![frames, channels], values)
            .map_err(|e| (MdStatus::InvalidArgument, e.to_string()))?;
        let seq = MotionSequence::new(kind, fps, "", t)
            .map_err(|e| (MdStatus::InvalidArgument, e.to_string()))?;
        put(out, MdSequence(seq))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_sequence_read(
    path: *const c_char,
    out: *mut *mut MdSequence,
) -> MdStatus {
    guard(|| {
        let path = path_arg(path)?;
        let seq = read_sequence(path).map_err(|e| (MdStatus::Format, e.to_string()))?;
        put(out, MdSequence(seq))
    })
}

/// # Safety
/// `seq` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn md_sequence_write(
    seq: *const MdSequence,
    path: *const c_char,
) -> MdStatus {
    guard(|| {
        let s = &handle(seq, "sequence")?.0;
        let path = path_arg(path)?;
        write_sequence(path, s).map_err(|e| (MdStatus::Io, e.to_string()))
    })
}

/// Frame count, or 0 for NULL.
///
/// # Safety
/// `seq` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_sequence_frames(seq: *const MdSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.0.frames())
}

/// Channel count, or 0 for NULL.
///
/// # Safety
/// `seq` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_sequence_channels(seq: *const MdSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.0.channels())
}

/// Row-major values, valid while the handle lives.
///
/// # Safety
/// `seq` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_sequence_data(seq: *const MdSequence) -> *const f32 {
    seq.as_ref()
        .map_or(ptr::null(), |s| s.0.data().data().as_ptr())
}

/// # Safety
/// `seq` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_sequence_free(seq: *mut MdSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

fn style_for(model: &DenoiserModel, subject: i32) -> Fallible<Style> {
    if subject < 0 {
        return Ok(Style::Mean);
    }
    let s = subject as usize;
    if model.variant() == Variant::Head || s >= model.arch().subjects.len() {
        return fail(MdStatus::InvalidArgument, format!("no subject {subject}"));
    }
    Ok(Style::Subject(s))
}

/// `[frames, audio_in]` audio, or NULL meaning no audio.
unsafe fn audio_arg(
    model: &DenoiserModel,
    audio: *const f32,
    frames: usize,
) -> Fallible<Option<Tensor>> {
    if audio.is_null() {
        return Ok(None);
    }
    let a = model.arch().audio_in;
    let values = floats(audio, frames * a, "audio")?.to_vec();
    Ok(Some(
        Tensor::new(vec![frames, a], values)
            .map_err(|e| (MdStatus::InvalidArgument, e.to_string()))?,
    ))
}

fn guidance(scale: f64) -> Fallible<GuidanceConfig> {
    GuidanceConfig::new(scale).map_err(|e| (MdStatus::InvalidArgument, e.to_string()))
}

/// Draws one sequence of `frames` frames.
///
/// `audio` holds `frames * audio_in` values or is NULL for an unconditional
/// facial draw and silent head motion. `subject` indexes the model's
/// subjects; a negative value selects the mean style.
///
/// # Safety
/// `model` must be a live handle, `audio` NULL or readable for the stated
/// length, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_sample(
    model: *const MdModel,
    frames: usize,
    audio: *const f32,
    subject: i32,
    scale: f64,
    seed: u64,
    out: *mut *mut MdSequence,
) -> MdStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let audio = audio_arg(m, audio, frames)?;
        let g = guidance(scale)?;
        let schedule = m
            .schedule()
            .map_err(|e| (MdStatus::Runtime, e.to_string()))?;
        let zeros = || Tensor::zeros(&[frames, m.arch().audio_in]);
        let seq = match m.variant() {
            Variant::Facial => {
                let style = style_for(m, subject)?;
                let cond = match audio {
                    Some(a) => ConditionSet::new(a, style),
                    None => ConditionSet::new(zeros(), style).null(),
                };
                let mut req = SampleRequest::new(cond, seed, 1);
                req.guidance = g;
                sample_facial(m, &schedule, &req, Default::default())
                    .map_err(sampling_status)?
                    .remove(0)
            }
            Variant::Head => {
                style_for(m, subject)?;
                let audio = audio.unwrap_or_else(zeros);
                let spec = ImputationSpec::empty(frames, 3);
                sample_head_sgdiff(
                    m,
                    &schedule,
                    &audio,
                    &spec,
                    g,
                    seed,
                    &HeadOptions::default(),
                )
                .map_err(sampling_status)?
                .sequence
            }
        };
        put(out, MdSequence(seq))
    })
}

/// Regenerates `base` where `mask` is 0 and keeps it where `mask` is 1.
///
/// `mask` holds one value per frame. Facial models copy known frames into
/// the result; head models use sparse guidance.
///
/// # Safety
/// Handles must be live, `mask` readable for the frame count, `audio` NULL
/// or readable for `frames * audio_in` values, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_edit(
    model: *const MdModel,
    base: *const MdSequence,
    mask: *const f32,
    audio: *const f32,
    subject: i32,
    scale: f64,
    seed: u64,
    out: *mut *mut MdSequence,
) -> MdStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let b = &handle(base, "base")?.0;
        let expected = match m.variant() {
            Variant::Facial => MotionKind::Face,
            Variant::Head => MotionKind::Head,
        };
        if b.kind != expected || b.channels() != m.arch().motion_channels {
            return fail(
                MdStatus::Mismatch,
                format!(
                    "{} model cannot edit {:?} motion with {} channels",
                    m.variant().name(),
                    b.kind,
                    b.channels()
                ),
            );
        }
        let n = b.frames();
        let mask = floats(mask, n, "mask")?.to_vec();
        let audio = audio_arg(m, audio, n)?;
        let g = guidance(scale)?;
        let schedule = m
            .schedule()
            .map_err(|e| (MdStatus::Runtime, e.to_string()))?;
        let spec = ImputationSpec::from_sequence(b, mask).map_err(sampling_status)?;
        let zeros = || Tensor::zeros(&[n, m.arch().audio_in]);
        let seq = match m.variant() {
            Variant::Facial => {
                let style = style_for(m, subject)?;
                let cond = match audio {
                    Some(a) => ConditionSet::new(a, style),
                    None => ConditionSet::new(zeros(), style).null(),
                };
                let opts = EditOptions {
                    fps: b.fps,
                    ..EditOptions::default()
                };
                edit_facial(m, &schedule, &spec, &cond, g, seed, &opts)
                    .map_err(sampling_status)?
                    .sequence
            }
            Variant::Head => {
                style_for(m, subject)?;
                let opts = HeadOptions {
                    fps: b.fps,
                    ..HeadOptions::default()
                };
                let audio = audio.unwrap_or_else(zeros);
                sample_head_sgdiff(m, &schedule, &audio, &spec, g, seed, &opts)
                    .map_err(sampling_status)?
                    .sequence
            }
        };
        put(out, MdSequence(seq))
    })
}

fn metric_status(e: metrics::MetricsError) -> (MdStatus, String) {
    (MdStatus::InvalidArgument, e.to_string())
}

unsafe fn write_out(out: *mut f64, v: f64) -> Fallible<()> {
    if out.is_null() {
        return fail(MdStatus::NullPointer, "output pointer is NULL");
    }
    *out = v;
    Ok(())
}

/// DTW lip-sync error over `region_len` channel indices; all channels when
/// `region` is NULL.
///
/// # Safety
/// Handles must be live, `region` NULL or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_lip_sync(
    pred: *const MdSequence,
    gt: *const MdSequence,
    region: *const usize,
    region_len: usize,
    out: *mut f64,
) -> MdStatus {
    guard(|| {
        let p = &handle(pred, "pred")?.0;
        let g = &handle(gt, "gt")?.0;
        let region: Vec<usize> = if region.is_null() {
            (0..g.channels()).collect()
        } else {
            std::slice::from_raw_parts(region, region_len).to_vec()
        };
        let v = metrics::lip_sync_dtw(p, g, &region).map_err(metric_status)?;
        write_out(out, v)
    })
}

/// Mean pairwise distance over `count` sequences.
///
/// # Safety
/// `seqs` must point to `count` live handles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn md_diversity(
    seqs: *const *const MdSequence,
    count: usize,
    out: *mut f64,
) -> MdStatus {
    guard(|| {
        if seqs.is_null() && count > 0 {
            return fail(MdStatus::NullPointer, "sequence array is NULL");
        }
        let handles = if count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(seqs, count)
        };
        let set: Vec<MotionSequence> = handles
            .iter()
            .map(|&h| handle(h, "sequence").map(|s| s.0.clone()))
            .collect::<Fallible<_>>()?;
        let v = metrics::diversity(&set).map_err(metric_status)?;
        write_out(out, v)
    })
}

/// Beat alignment of head motion against ground truth with kernel width
/// `sigma` in seconds.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_beat_align(
    pred: *const MdSequence,
    gt: *const MdSequence,
    sigma: f64,
    out: *mut f64,
) -> MdStatus {
    guard(|| {
        let p = &handle(pred, "pred")?.0;
        let g = &handle(gt, "gt")?.0;
        let bp = metrics::detect_beats(p).map_err(metric_status)?;
        let bg = metrics::detect_beats(g).map_err(metric_status)?;
        let v = metrics::beat_align(&bp, &bg, sigma).map_err(metric_status)?;
        write_out(out, v)
    })
}
